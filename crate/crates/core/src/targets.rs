//! Frame-synchronous target streams: one token per 80 ms frame, `[P]` while
//! waiting, `[W]` opening each emission group.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

use crate::decoder::{DelaySpec, FRAME_MS};
use crate::error::{Error, Result};
use crate::tokenizer::{StreamToken, TokenId, TokenKind, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimedWord {
    pub text: String,
    /// Acoustic end of the word.
    pub end_ms: u32,
}

impl TimedWord {
    pub fn new(text: impl Into<String>, end_ms: u32) -> Self {
        Self { text: text.into(), end_ms }
    }
}

/// When consecutive words share a `[W]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Every word gets its own `[W]`.
    Off,
    /// Words whose emission continues an uninterrupted run share one `[W]`.
    #[default]
    Contiguous,
    /// Only words with the identical emission frame share a `[W]`.
    SameFrame,
}

impl From<bool> for Grouping {
    fn from(on: bool) -> Self {
        if on {
            Grouping::Contiguous
        } else {
            Grouping::Off
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetStream {
    pub tokens: Vec<StreamToken>,
    pub n_frames: usize,
}

impl TargetStream {
    pub fn ids(&self) -> Vec<TokenId> {
        self.tokens.iter().map(|t| t.id).collect()
    }

    /// Space-separated ids, the on-disk inspection format.
    pub fn to_line(&self) -> String {
        self.tokens.iter().map(|t| t.id.to_string()).collect::<Vec<_>>().join(" ")
    }

    /// One line per frame: index, time span, id and rendered piece.
    pub fn render_debug(&self, vocab: &Vocabulary) -> String {
        let mut s = String::new();
        for (t, tok) in self.tokens.iter().enumerate() {
            let piece = match tok.kind {
                TokenKind::Pad => "[P]".to_string(),
                TokenKind::WordBoundary => "[W]".to_string(),
                TokenKind::Subword => vocab.subwords[tok.id as usize].clone(),
            };
            let lo = t as u32 * FRAME_MS;
            s.push_str(&format!("{t:>5} {lo:>6}-{:<6} {:>3} {piece}\n", lo + FRAME_MS, tok.id));
        }
        s
    }
}

/// First frame whose end is at least `end_ms + τ`.
pub fn emission_frame(end_ms: u32, delay: DelaySpec) -> usize {
    ((end_ms + delay.ms()).div_ceil(FRAME_MS) as usize).saturating_sub(1)
}

fn check_sorted(words: &[TimedWord]) -> Result<()> {
    if let Some(i) = words.windows(2).position(|w| w[1].end_ms < w[0].end_ms) {
        return Err(Error::Config(format!(
            "word {:?} (index {}) ends before its predecessor",
            words[i + 1].text,
            i + 1
        )));
    }
    Ok(())
}

/// FIFO scheduler: ready words enqueue their subwords at their emission
/// frame; each frame emits the queue head or `[P]`.
pub fn build_targets(
    words: &[TimedWord],
    delay: DelaySpec,
    n_frames: usize,
    vocab: &Vocabulary,
    grouping: Grouping,
) -> Result<TargetStream> {
    check_sorted(words)?;
    let pieces = words.iter().map(|w| vocab.tokenize_word(&w.text)).collect::<Result<Vec<_>>>()?;
    let ready: Vec<usize> = words.iter().map(|w| emission_frame(w.end_ms, delay)).collect();

    let mut queue: VecDeque<(usize, TokenId)> = VecDeque::new();
    let mut tokens = Vec::with_capacity(n_frames);
    let mut next = 0;
    let mut prev_emitted = false;
    for t in 0..n_frames {
        let mut first_this_frame = true;
        while next < words.len() && ready[next] == t {
            let w_tok = match grouping {
                Grouping::Off => true,
                Grouping::Contiguous => queue.is_empty() && !prev_emitted,
                Grouping::SameFrame => first_this_frame,
            };
            if w_tok {
                queue.push_back((next, vocab.word_id()));
            }
            queue.extend(pieces[next].iter().map(|&p| (next, p)));
            first_this_frame = false;
            next += 1;
        }
        match queue.pop_front() {
            Some((_, id)) => {
                tokens.push(vocab.token(id));
                prev_emitted = true;
            }
            None => {
                tokens.push(vocab.pad());
                prev_emitted = false;
            }
        }
    }
    let overflow = queue.front().map(|&(i, _)| i).or((next < words.len()).then_some(next));
    if let Some(index) = overflow {
        return Err(Error::TargetOverflow { word: words[index].text.clone(), index, n_frames });
    }
    Ok(TargetStream { tokens, n_frames })
}

/// Independent reference for [`build_targets`]: lays out each group's token
/// block explicitly and places it at `max(ready, previous block end)`.
pub fn oracle_build(
    words: &[TimedWord],
    delay: DelaySpec,
    n_frames: usize,
    vocab: &Vocabulary,
    grouping: Grouping,
) -> Result<TargetStream> {
    check_sorted(words)?;
    let mut grid: Vec<Option<TokenId>> = vec![None; n_frames];
    // Frame just past the last placed token.
    let mut cursor = 0usize;
    let mut last_ready: Option<usize> = None;
    for (i, w) in words.iter().enumerate() {
        let ids = vocab.tokenize_word(&w.text)?;
        let r = ((w.end_ms + delay.ms()) as usize).div_ceil(FRAME_MS as usize) - 1;
        let start = r.max(cursor);
        // The word continues a run when its block begins exactly where the
        // previous one ended and that frame was not idle.
        let joins = match grouping {
            Grouping::Off => false,
            Grouping::Contiguous => i > 0 && cursor >= r,
            Grouping::SameFrame => last_ready == Some(r),
        };
        let mut block = Vec::new();
        if !joins {
            block.push(vocab.word_id());
        }
        block.extend(ids);
        for (k, id) in block.into_iter().enumerate() {
            let f = start + k;
            if f >= n_frames {
                return Err(Error::TargetOverflow { word: w.text.clone(), index: i, n_frames });
            }
            grid[f] = Some(id);
        }
        cursor = start + if joins { 0 } else { 1 } + vocab.tokenize_word(&w.text)?.len();
        last_ready = Some(r);
    }
    let tokens = grid
        .into_iter()
        .map(|c| c.map_or(vocab.pad(), |id| vocab.token(id)))
        .collect();
    Ok(TargetStream { tokens, n_frames })
}
