//! WER/CER scoring and (τ, left-pad) sweeps over labelled corpora.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::decoder::DelaySpec;
use crate::error::Result;
use crate::session::{Engine, TokenEvent};
use crate::train::corpus::SynthSample;

/// Lowercase and collapse whitespace.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(r: &[T], h: &[T]) -> usize {
    let mut d: Vec<usize> = (0..=h.len()).collect();
    for (i, a) in r.iter().enumerate() {
        let mut diag = d[0];
        d[0] = i + 1;
        for (j, b) in h.iter().enumerate() {
            let up = d[j + 1];
            d[j + 1] = (up + 1).min(d[j] + 1).min(diag + usize::from(a != b));
            diag = up;
        }
    }
    d[h.len()]
}

/// Word errors and reference length after normalisation.
pub fn word_errors(reference: &str, hypothesis: &str) -> (usize, usize) {
    let r = normalize_text(reference);
    let h = normalize_text(hypothesis);
    let r: Vec<&str> = r.split(' ').filter(|w| !w.is_empty()).collect();
    let h: Vec<&str> = h.split(' ').filter(|w| !w.is_empty()).collect();
    (edit_distance(&r, &h), r.len())
}

/// Character errors, spaces included, after normalisation.
pub fn char_errors(reference: &str, hypothesis: &str) -> (usize, usize) {
    let r: Vec<char> = normalize_text(reference).chars().collect();
    let h: Vec<char> = normalize_text(hypothesis).chars().collect();
    (edit_distance(&r, &h), r.len())
}

fn rate((e, n): (usize, usize)) -> f64 {
    e as f64 / n.max(1) as f64
}

pub fn wer(reference: &str, hypothesis: &str) -> f64 {
    rate(word_errors(reference, hypothesis))
}

pub fn cer(reference: &str, hypothesis: &str) -> f64 {
    rate(char_errors(reference, hypothesis))
}

/// A labelled utterance.
#[derive(Debug, Clone)]
pub struct EvalUtterance {
    pub id: String,
    pub subset: String,
    pub pcm: Vec<f32>,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtteranceScore {
    pub id: String,
    pub subset: String,
    pub reference: String,
    pub hypothesis: String,
    pub word_errors: usize,
    pub ref_words: usize,
    pub char_errors: usize,
    pub ref_chars: usize,
    pub wer: f64,
    /// Frame of the first non-pad token, if any.
    pub first_token_frame: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalCell {
    pub delay_ms: u32,
    pub left_pad_frames: usize,
    pub word_errors: usize,
    pub ref_words: usize,
    pub char_errors: usize,
    pub ref_chars: usize,
    pub corpus_wer: f64,
    pub corpus_cer: f64,
    /// Unweighted mean of per-subset corpus WER.
    pub macro_wer: f64,
    pub subset_wer: BTreeMap<String, f64>,
    pub utterances: Vec<UtteranceScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub cells: Vec<EvalCell>,
}

impl EvalReport {
    pub fn cell(&self, delay_ms: u32, left_pad_frames: usize) -> Option<&EvalCell> {
        self.cells.iter().find(|c| c.delay_ms == delay_ms && c.left_pad_frames == left_pad_frames)
    }

    /// One JSON object per cell, per-utterance scores included.
    pub fn to_jsonl(&self) -> String {
        self.cells.iter().map(|c| serde_json::to_string(c).expect("serialisable") + "\n").collect()
    }

    /// Corpus WER (%) with one row per left pad and one column per delay.
    pub fn table(&self) -> String {
        let mut taus: Vec<u32> = self.cells.iter().map(|c| c.delay_ms).collect();
        taus.sort_unstable();
        taus.dedup();
        let mut pads: Vec<usize> = self.cells.iter().map(|c| c.left_pad_frames).collect();
        pads.sort_unstable();
        pads.dedup();
        let mut s = format!("{:>10}", "pad \\ tau");
        for t in &taus {
            let _ = write!(s, " {:>8}", format!("{t}ms"));
        }
        s.push('\n');
        for p in &pads {
            let _ = write!(s, "{p:>10}");
            for t in &taus {
                match self.cell(*t, *p) {
                    Some(c) => {
                        let _ = write!(s, " {:>8.2}", 100.0 * c.corpus_wer);
                    }
                    None => s.push_str(&format!(" {:>8}", "-")),
                }
            }
            s.push('\n');
        }
        s
    }
}

impl EvalUtterance {
    /// Synthetic samples labelled `short` (up to four words) or `long`.
    pub fn from_synth(samples: &[SynthSample]) -> Vec<Self> {
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| EvalUtterance {
                id: format!("utt{i:04}"),
                subset: if s.words.len() <= 4 { "short" } else { "long" }.into(),
                pcm: s.pcm.clone(),
                reference: s.text(),
            })
            .collect()
    }
}

/// Stream one utterance through a fresh session (whole buffer, then finish).
pub fn transcribe(engine: &Engine, pcm: &[f32], delay: DelaySpec, left_pad_frames: usize) -> Result<(String, Vec<TokenEvent>)> {
    let mut s = engine.create_session(delay, left_pad_frames)?;
    let mut events = s.append_audio(pcm)?;
    let f = s.finish()?;
    events.extend(f.events);
    Ok((f.transcript, events))
}

pub fn score(u: &EvalUtterance, hypothesis: String, events: &[TokenEvent], engine: &Engine) -> UtteranceScore {
    let (we, rw) = word_errors(&u.reference, &hypothesis);
    let (ce, rc) = char_errors(&u.reference, &hypothesis);
    let pad = engine.model().vocab().pad_id();
    UtteranceScore {
        id: u.id.clone(),
        subset: u.subset.clone(),
        reference: u.reference.clone(),
        word_errors: we,
        ref_words: rw,
        char_errors: ce,
        ref_chars: rc,
        wer: rate((we, rw)),
        first_token_frame: events.iter().find(|e| e.token_id != pad).map(|e| e.frame_index),
        hypothesis,
    }
}

fn aggregate(delay_ms: u32, left_pad_frames: usize, utterances: Vec<UtteranceScore>) -> EvalCell {
    let sum = |f: fn(&UtteranceScore) -> usize| utterances.iter().map(f).sum::<usize>();
    let (we, rw, ce, rc) = (sum(|u| u.word_errors), sum(|u| u.ref_words), sum(|u| u.char_errors), sum(|u| u.ref_chars));
    let mut by_subset: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for u in &utterances {
        let e = by_subset.entry(u.subset.clone()).or_default();
        e.0 += u.word_errors;
        e.1 += u.ref_words;
    }
    let subset_wer: BTreeMap<String, f64> = by_subset.into_iter().map(|(k, v)| (k, rate(v))).collect();
    let macro_wer = if subset_wer.is_empty() { 0.0 } else { subset_wer.values().sum::<f64>() / subset_wer.len() as f64 };
    EvalCell {
        delay_ms,
        left_pad_frames,
        word_errors: we,
        ref_words: rw,
        char_errors: ce,
        ref_chars: rc,
        corpus_wer: rate((we, rw)),
        corpus_cer: rate((ce, rc)),
        macro_wer,
        subset_wer,
        utterances,
    }
}

/// Score every utterance at every (delay, pad) pair. Utterances are split
/// across `threads` workers; results keep corpus order.
pub fn eval_sweep(
    engine: &Engine,
    corpus: &[EvalUtterance],
    delays: &[DelaySpec],
    left_pads: &[usize],
    threads: usize,
) -> Result<EvalReport> {
    let threads = threads.clamp(1, corpus.len().max(1));
    let mut cells = Vec::new();
    for &d in delays {
        for &pad in left_pads {
            let chunk = corpus.len().div_ceil(threads).max(1);
            let parts: Vec<Result<Vec<UtteranceScore>>> = std::thread::scope(|s| {
                let handles: Vec<_> = corpus
                    .chunks(chunk)
                    .map(|part| {
                        s.spawn(move || {
                            part.iter()
                                .map(|u| {
                                    let (hyp, ev) = transcribe(engine, &u.pcm, d, pad)?;
                                    Ok(score(u, hyp, &ev, engine))
                                })
                                .collect()
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
            });
            let mut scores = Vec::with_capacity(corpus.len());
            for p in parts {
                scores.extend(p?);
            }
            cells.push(aggregate(d.ms(), pad, scores));
        }
    }
    Ok(EvalReport { cells })
}
