//! Causal log-Mel frontend.
//!
//! Frame `i` covers samples `[160·i − 240, 160·i + 160)` with zeros before
//! the stream start, so a frame is final as soon as its hop has arrived and
//! `T` samples always yield `floor(T / 160)` frames. The streaming state keeps
//! only the 240-sample carry plus the unfinished hop.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::nn::ops::dot;

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub n_mels: usize,
    pub hop: usize,
    pub window: usize,
    pub f_min: f32,
    pub f_max: f32,
    pub floor_eps: f32,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            n_mels: 128,
            hop: 160,
            window: 400,
            f_min: 0.0,
            f_max: 8_000.0,
            floor_eps: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelFrame {
    pub index: usize,
    pub bins: Vec<f32>,
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

#[derive(Debug)]
struct Filter {
    start: usize,
    weights: Vec<f32>,
}

/// Precomputed DFT and HTK Mel tables; immutable and shareable.
#[derive(Debug)]
pub struct MelFrontend {
    cfg: FrontendConfig,
    window: Vec<f32>,
    cos: Vec<f32>,
    sin: Vec<f32>,
    n_bins: usize,
    filters: Vec<Filter>,
    centers_hz: Vec<f64>,
}

impl MelFrontend {
    pub fn new(cfg: FrontendConfig) -> Self {
        let n = cfg.window;
        let n_bins = n / 2 + 1;
        let window: Vec<f32> = (0..n)
            .map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()) as f32)
            .collect();
        let mut cos = vec![0.0; n_bins * n];
        let mut sin = vec![0.0; n_bins * n];
        for k in 0..n_bins {
            for t in 0..n {
                let a = 2.0 * PI * ((k * t) % n) as f64 / n as f64;
                cos[k * n + t] = a.cos() as f32;
                sin[k * n + t] = a.sin() as f32;
            }
        }
        let (lo, hi) = (hz_to_mel(cfg.f_min as f64), hz_to_mel(cfg.f_max as f64));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = |k: usize| k as f64 * SAMPLE_RATE as f64 / n as f64;
        let mut filters = Vec::with_capacity(cfg.n_mels);
        for m in 0..cfg.n_mels {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            let mut start = None;
            let mut weights = Vec::new();
            for k in 0..n_bins {
                let f = bin_hz(k);
                let w = if f > l && f <= c {
                    (f - l) / (c - l)
                } else if f > c && f < r {
                    (r - f) / (r - c)
                } else {
                    0.0
                };
                if w > 0.0 {
                    start.get_or_insert(k);
                    weights.push(w as f32);
                } else if start.is_some() {
                    break;
                }
            }
            filters.push(Filter {
                start: start.unwrap_or(0),
                weights,
            });
        }
        let centers_hz = edges[1..=cfg.n_mels].to_vec();
        Self {
            cfg,
            window,
            cos,
            sin,
            n_bins,
            filters,
            centers_hz,
        }
    }

    pub fn shared(cfg: FrontendConfig) -> Arc<Self> {
        Arc::new(Self::new(cfg))
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    /// Centre frequency of each Mel filter in Hz.
    pub fn center_frequencies(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn floor_value(&self) -> f32 {
        self.cfg.floor_eps.ln()
    }

    /// Log-Mel bins of one analysis window of exactly `cfg.window` samples.
    pub fn frame(&self, samples: &[f32]) -> Vec<f32> {
        let n = self.cfg.window;
        debug_assert_eq!(samples.len(), n);
        let windowed: Vec<f32> = samples.iter().zip(&self.window).map(|(s, w)| s * w).collect();
        let mut power = vec![0.0f32; self.n_bins];
        for (k, p) in power.iter_mut().enumerate() {
            let re = dot(&windowed, &self.cos[k * n..(k + 1) * n]);
            let im = dot(&windowed, &self.sin[k * n..(k + 1) * n]);
            *p = re * re + im * im;
        }
        self.filters
            .iter()
            .map(|f| {
                let e = dot(&f.weights, &power[f.start..f.start + f.weights.len()]);
                (e + self.cfg.floor_eps).ln()
            })
            .collect()
    }

    /// Batch log-Mel over a complete signal.
    pub fn log_mel(&self, pcm: &[f32]) -> Vec<MelFrame> {
        let carry = self.cfg.window - self.cfg.hop;
        let mut padded = vec![0.0f32; carry];
        padded.extend_from_slice(pcm);
        let n_frames = pcm.len() / self.cfg.hop;
        (0..n_frames)
            .map(|i| {
                let s = i * self.cfg.hop;
                MelFrame {
                    index: i,
                    bins: self.frame(&padded[s..s + self.cfg.window]),
                }
            })
            .collect()
    }

    pub fn stream(self: &Arc<Self>) -> FrontendState {
        FrontendState::new(Arc::clone(self))
    }
}

/// Per-stream incremental state of the frontend.
#[derive(Debug, Clone)]
pub struct FrontendState {
    frontend: Arc<MelFrontend>,
    buffer: Vec<f32>,
    frames_emitted: usize,
}

impl FrontendState {
    pub fn new(frontend: Arc<MelFrontend>) -> Self {
        let carry = frontend.cfg.window - frontend.cfg.hop;
        Self {
            frontend,
            buffer: vec![0.0; carry],
            frames_emitted: 0,
        }
    }

    pub fn frames_emitted(&self) -> usize {
        self.frames_emitted
    }

    /// Samples held beyond the carry, i.e. not yet covered by a full hop.
    pub fn buffered(&self) -> usize {
        self.buffer.len() - (self.frontend.cfg.window - self.frontend.cfg.hop)
    }

    pub fn feed(&mut self, chunk: &[f32]) -> Vec<MelFrame> {
        if chunk.is_empty() {
            return Vec::new();
        }
        let (win, hop) = (self.frontend.cfg.window, self.frontend.cfg.hop);
        self.buffer.extend_from_slice(chunk);
        let mut out = Vec::new();
        let mut start = 0;
        while self.buffer.len() - start >= win {
            out.push(MelFrame {
                index: self.frames_emitted,
                bins: self.frontend.frame(&self.buffer[start..start + win]),
            });
            self.frames_emitted += 1;
            start += hop;
        }
        self.buffer.drain(..start);
        out
    }

    pub fn feed_i16(&mut self, chunk: &[i16]) -> Vec<MelFrame> {
        let f: Vec<f32> = chunk.iter().map(|&s| pcm16_to_f32(s)).collect();
        self.feed(&f)
    }
}

#[inline]
pub fn pcm16_to_f32(s: i16) -> f32 {
    s as f32 / 32_768.0
}

pub fn f32_to_pcm16(s: f32) -> i16 {
    (s * 32_768.0).round().clamp(i16::MIN as f32, i16::MAX as f32) as i16
}
