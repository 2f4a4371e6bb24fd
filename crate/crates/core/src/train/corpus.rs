//! Synthetic tone-word corpus.
//!
//! Every vocabulary word has a fixed two-segment tone signature: a low-band
//! tone followed by a high-band tone, each unique to the word. Utterances
//! string random words together with random gaps; word boundaries fall on a
//! 20 ms grid, so end timestamps are exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{DelaySpec, FRAME_MS};
use crate::error::{Error, Result};
use crate::frontend::{MelFrontend, SAMPLE_RATE};
use crate::targets::{build_targets, Grouping, TargetStream, TimedWord};
use crate::tokenizer::Vocabulary;

pub const GRID_MS: u32 = 20;
pub const MIN_TRAILING_MS: u32 = 240;
const RAMP_MS: f32 = 10.0;
const LOW_BAND: (f64, f64) = (250.0, 1200.0);
const HIGH_BAND: (f64, f64) = (1500.0, 6500.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_words: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub max_lead_ms: u32,
    pub max_gap_ms: u32,
    pub trailing_ms: u32,
    pub amplitude: f32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_words: 24,
            min_words: 2,
            max_words: 8,
            max_lead_ms: 400,
            max_gap_ms: 320,
            trailing_ms: MIN_TRAILING_MS,
            amplitude: 0.3,
        }
    }
}

/// Acoustic signature of one word.
#[derive(Debug, Clone, PartialEq)]
pub struct Signature {
    pub duration_ms: u32,
    pub low_hz: f64,
    pub high_hz: f64,
}

impl Signature {
    pub fn samples(&self) -> usize {
        (self.duration_ms * SAMPLE_RATE / 1000) as usize
    }

    /// Unit-amplitude waveform.
    pub fn render(&self) -> Vec<f32> {
        let n = self.samples();
        let half = n / 2;
        let sr = SAMPLE_RATE as f64;
        let ramp = (RAMP_MS * SAMPLE_RATE as f32 / 1000.0) as usize;
        (0..n)
            .map(|i| {
                let (f, j, len) = if i < half { (self.low_hz, i, half) } else { (self.high_hz, i - half, n - half) };
                let edge = j.min(len - 1 - j);
                let env = if edge < ramp {
                    0.5 - 0.5 * (std::f32::consts::PI * edge as f32 / ramp as f32).cos()
                } else {
                    1.0
                };
                env * (2.0 * std::f64::consts::PI * f * i as f64 / sr).sin() as f32
            })
            .collect()
    }
}

/// Deterministic signatures for `n_words` words: durations cycle through
/// 160..=320 ms in 20 ms steps and tone frequencies are log-spaced per band.
pub fn signatures(n_words: usize) -> Vec<Signature> {
    let log_space = |(lo, hi): (f64, f64), i: usize| {
        let a = if n_words > 1 { i as f64 / (n_words - 1) as f64 } else { 0.0 };
        (lo.ln() + a * (hi.ln() - lo.ln())).exp()
    };
    (0..n_words)
        .map(|i| Signature {
            duration_ms: 160 + GRID_MS * ((i as u32 * 5) % 9),
            low_hz: log_space(LOW_BAND, i),
            // Reverse the high band so neighbours in one band are far apart in the other.
            high_hz: log_space(HIGH_BAND, (i * 7) % n_words),
        })
        .collect()
}

/// Maximum |normalised cross-correlation| of two signals over lags in `-max_lag..=max_lag`.
pub fn max_ncc(a: &[f32], b: &[f32], max_lag: usize) -> f32 {
    let na = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let mut best = 0.0f64;
    for lag in -(max_lag as isize)..=max_lag as isize {
        let mut s = 0.0f64;
        for (i, &x) in a.iter().enumerate() {
            let j = i as isize + lag;
            if j >= 0 && (j as usize) < b.len() {
                s += x as f64 * b[j as usize] as f64;
            }
        }
        best = best.max(s.abs());
    }
    (best / (na * nb)) as f32
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub pcm: Vec<f32>,
    pub words: Vec<TimedWord>,
}

impl SynthSample {
    pub fn duration_ms(&self) -> u32 {
        (self.pcm.len() as u64 * 1000 / SAMPLE_RATE as u64) as u32
    }

    /// Decoder frames covering the audio.
    pub fn audio_frames(&self) -> usize {
        self.duration_ms().div_ceil(FRAME_MS) as usize
    }

    pub fn text(&self) -> String {
        self.words.iter().map(|w| w.text.as_str()).collect::<Vec<_>>().join(" ")
    }
}

/// Generates utterances for one vocabulary.
#[derive(Debug, Clone)]
pub struct Synthesizer {
    cfg: CorpusConfig,
    vocab: Vocabulary,
    waves: Vec<Vec<f32>>,
}

impl Synthesizer {
    pub fn new(cfg: CorpusConfig) -> Result<Self> {
        if cfg.min_words == 0 || cfg.min_words > cfg.max_words {
            return Err(Error::Config(format!("bad word count range {}..={}", cfg.min_words, cfg.max_words)));
        }
        if cfg.trailing_ms < MIN_TRAILING_MS {
            return Err(Error::Config(format!("trailing silence must be at least {MIN_TRAILING_MS} ms")));
        }
        let vocab = Vocabulary::synthetic(cfg.n_words)?;
        let waves = signatures(cfg.n_words).iter().map(Signature::render).collect();
        Ok(Self { cfg, vocab, waves })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn config(&self) -> &CorpusConfig {
        &self.cfg
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SynthSample {
        let c = &self.cfg;
        let n_words = rng.random_range(c.min_words..=c.max_words);
        let grid = |rng: &mut R, max_ms: u32| GRID_MS * rng.random_range(0..=max_ms / GRID_MS);
        let ms_to_samples = |ms: u32| (ms * SAMPLE_RATE / 1000) as usize;
        let gain = c.amplitude * rng.random_range(0.5f32..=1.0);
        let mut t_ms = grid(rng, c.max_lead_ms);
        let mut pcm = vec![0.0f32; ms_to_samples(t_ms)];
        let mut words = Vec::with_capacity(n_words);
        for k in 0..n_words {
            if k > 0 {
                let gap = grid(rng, c.max_gap_ms);
                pcm.resize(pcm.len() + ms_to_samples(gap), 0.0);
                t_ms += gap;
            }
            let w = rng.random_range(0..self.vocab.words.len());
            pcm.extend(self.waves[w].iter().map(|x| x * gain));
            t_ms += signatures_duration(&self.waves[w]);
            words.push(TimedWord::new(self.vocab.words[w].clone(), t_ms));
        }
        pcm.resize(pcm.len() + ms_to_samples(c.trailing_ms), 0.0);
        SynthSample { pcm, words }
    }

    pub fn corpus(&self, n: usize, seed: u64) -> Vec<SynthSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sample(&mut rng)).collect()
    }
}

fn signatures_duration(wave: &[f32]) -> u32 {
    (wave.len() as u64 * 1000 / SAMPLE_RATE as u64) as u32
}

/// `synth_corpus(vocab_size, n_samples, seed)` with default settings.
pub fn synth_corpus(n_words: usize, n_samples: usize, seed: u64) -> Result<Vec<SynthSample>> {
    let s = Synthesizer::new(CorpusConfig { n_words, ..Default::default() })?;
    Ok(s.corpus(n_samples, seed))
}

/// A sample with its log-mel features precomputed.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub words: Vec<TimedWord>,
    /// Raw log-mel rows of the audio; frames past the end are silence.
    pub mel: Vec<f32>,
    pub mel_frames: usize,
    pub audio_frames: usize,
}

impl PreparedSample {
    pub fn new(sample: &SynthSample, frontend: &MelFrontend) -> Self {
        let frames = frontend.log_mel(&sample.pcm);
        let mel_frames = frames.len();
        let mel = frames.into_iter().flat_map(|f| f.bins).collect();
        Self { words: sample.words.clone(), mel, mel_frames, audio_frames: sample.audio_frames() }
    }

    /// Decoder frames needed to flush every word at `delay`, plus `margin`.
    pub fn frames_for(&self, delay: DelaySpec, vocab: &Vocabulary, grouping: Grouping, margin: usize) -> Result<usize> {
        let tokens: usize = self.words.iter().map(|w| vocab.tokenize_word(&w.text).map(|t| t.len() + 1)).sum::<Result<usize>>()?;
        let last = self.words.last().map_or(0, |w| crate::targets::emission_frame(w.end_ms, delay));
        let upper = last + tokens + 1;
        let t = build_targets(&self.words, delay, upper, vocab, grouping)?;
        let used = t.tokens.iter().rposition(|x| x.id != vocab.pad_id()).map_or(0, |i| i + 1);
        Ok((used + margin).max(self.audio_frames))
    }

    pub fn targets(&self, delay: DelaySpec, n_frames: usize, vocab: &Vocabulary, grouping: Grouping) -> Result<TargetStream> {
        build_targets(&self.words, delay, n_frames, vocab, grouping)
    }

    /// `8 · n_frames` mel rows, padding with the silence floor.
    pub fn mel_rows(&self, n_frames: usize, n_mels: usize, floor: f32) -> Vec<f32> {
        let rows = 8 * n_frames;
        let mut m = Vec::with_capacity(rows * n_mels);
        let have = self.mel_frames.min(rows);
        m.extend_from_slice(&self.mel[..have * n_mels]);
        m.resize(rows * n_mels, floor);
        m
    }
}
