//! Adapter, delay conditioning and the autoregressive text decoder.

use serde::{Deserialize, Serialize};

use crate::cache::{KvStore, WindowKv};
use crate::config::Conditioning;
use crate::error::{shape_err, Error, Result};
use crate::model::{block_row, BlockScratch, BlockSpec, Model};
use crate::nn::ops::{self, gelu, rms_norm_into, rope_table, sinusoidal_embedding};
use crate::tokenizer::{StreamToken, TokenId};
use crate::weights::MAX_DELAY_FRAMES;

/// Duration of one decoder frame.
pub const FRAME_MS: u32 = 80;
pub const MAX_DELAY_MS: u32 = FRAME_MS * MAX_DELAY_FRAMES as u32;

/// Target transcription delay, a whole number of 80 ms frames in `[80, 2400]` ms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DelaySpec {
    frames: u32,
}

impl DelaySpec {
    pub fn from_ms(ms: u32) -> Result<Self> {
        if ms == 0 || ms % FRAME_MS != 0 || ms > MAX_DELAY_MS {
            return Err(Error::Delay(ms));
        }
        Ok(Self { frames: ms / FRAME_MS })
    }

    pub fn from_frames(frames: u32) -> Result<Self> {
        Self::from_ms(frames.saturating_mul(FRAME_MS))
    }

    pub fn frames(self) -> u32 {
        self.frames
    }

    pub fn ms(self) -> u32 {
        self.frames * FRAME_MS
    }
}

/// Per-session delay conditioning, computed once from τ.
#[derive(Debug, Clone)]
pub enum DelayCond {
    /// One `g(τ)` row per decoder layer.
    Ada(Vec<Vec<f32>>),
    Sum(Vec<f32>),
    Token(usize),
}

/// Decoder state for one stream; generic over K/V storage.
#[derive(Debug, Clone)]
pub struct DecoderState<K> {
    pub kv: K,
    frame: usize,
    last_token: TokenId,
    delay: DelaySpec,
    cond: DelayCond,
    scratch: BlockScratch,
}

impl<K> DecoderState<K> {
    /// Next decoder position.
    pub fn frame(&self) -> usize {
        self.frame
    }

    pub fn last_token(&self) -> TokenId {
        self.last_token
    }

    pub fn delay(&self) -> DelaySpec {
        self.delay
    }

    /// Override the text-stream input for the next step.
    pub fn set_last_token(&mut self, id: TokenId) {
        self.last_token = id;
    }
}

/// Result of one decoder step.
#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub token: StreamToken,
    pub logits: Vec<f32>,
}

/// Batched output of a single decoder block, for inspection.
#[derive(Debug, Clone)]
pub struct BlockOutput {
    /// Attention-branch contribution per row.
    pub attn_branch: Vec<f32>,
    pub output: Vec<f32>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(x: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

impl Model {
    /// Stack four consecutive encoder frames and project to the decoder width.
    pub fn adapt(&self, frames: &[f32]) -> Result<Vec<f32>> {
        let e = self.config().encoder.d_model;
        let d = self.config().decoder.d_model;
        let pool = self.config().decoder.pooling;
        if frames.len() != pool * e {
            return Err(shape_err("adapt", format!("expected {pool}x{e} values, got {}", frames.len())));
        }
        let w = &self.weights().adapter;
        let mut h = ops::linear_row(frames, w.w1.data(), d);
        h.iter_mut().for_each(|v| *v = gelu(*v));
        Ok(ops::linear_row(&h, w.w2.data(), d))
    }

    /// `g(τ)` for one decoder layer, or `None` without adaptive norms.
    pub fn delay_gain(&self, layer: usize, delay: DelaySpec) -> Option<Vec<f32>> {
        let d = &self.config().decoder;
        let c = self.weights().decoder.layers.get(layer)?.cond.as_ref()?;
        let s = sinusoidal_embedding(delay.frames() as f32, d.d_model);
        let mut h = ops::linear_row(&s, c.w1.data(), d.cond_inner);
        h.iter_mut().for_each(|v| *v = gelu(*v));
        Some(ops::linear_row(&h, c.w2.data(), d.d_model))
    }

    pub fn delay_cond(&self, delay: DelaySpec) -> DelayCond {
        let d = &self.config().decoder;
        match d.conditioning {
            Conditioning::AdaRmsNorm => DelayCond::Ada(
                (0..d.n_layers).map(|l| self.delay_gain(l, delay).expect("ada weights")).collect(),
            ),
            Conditioning::SumEmbedding => DelayCond::Sum(sinusoidal_embedding(delay.frames() as f32, d.d_model)),
            Conditioning::SpecialToken => DelayCond::Token(delay.frames() as usize),
        }
    }

    /// Whether the text stream carries the delay token at `frame`.
    pub fn is_delay_token_frame(&self, frame: usize) -> bool {
        self.config().decoder.conditioning == Conditioning::SpecialToken
            && frame % self.config().decoder.window_tokens == 0
    }

    /// Decoder input at `frame`: adapter output plus the previous token's
    /// embedding (or the delay token), plus the delay embedding in sum mode.
    pub fn fuse_streams(&self, audio: &[f32], prev: TokenId, frame: usize, cond: &DelayCond) -> Result<Vec<f32>> {
        let d = self.config().decoder.d_model;
        if audio.len() != d {
            return Err(shape_err("fuse_streams", format!("audio row has {} values, expected {d}", audio.len())));
        }
        let dw = &self.weights().decoder;
        let text = match cond {
            DelayCond::Token(tau) if self.is_delay_token_frame(frame) => {
                dw.delay_tokens.as_ref().expect("delay token table").row(*tau)
            }
            _ => {
                let v = self.vocab().size();
                if prev as usize >= v {
                    return Err(Error::Config(format!("token id {prev} outside vocabulary of {v}")));
                }
                dw.embedding.row(prev as usize)
            }
        };
        let mut x: Vec<f32> = audio.iter().zip(text).map(|(a, b)| a + b).collect();
        if let DelayCond::Sum(s) = cond {
            for (xi, si) in x.iter_mut().zip(s) {
                *xi += si;
            }
        }
        Ok(x)
    }

    pub fn decoder_state(&self, delay: DelaySpec) -> DecoderState<WindowKv> {
        let d = &self.config().decoder;
        self.decoder_state_with(delay, WindowKv::new(d.n_layers, d.attention().kv_dim()))
    }

    /// Decoder state over caller-provided K/V storage.
    pub fn decoder_state_with<K: KvStore>(&self, delay: DelaySpec, kv: K) -> DecoderState<K> {
        let d = &self.config().decoder;
        DecoderState {
            kv,
            frame: 0,
            last_token: self.vocab().pad_id(),
            delay,
            cond: self.delay_cond(delay),
            scratch: BlockScratch::new(d.d_model, &d.attention(), d.ffn_hidden),
        }
    }

    fn decoder_layers_row<K: KvStore>(&self, state: &mut DecoderState<K>, x: &mut [f32]) -> Result<()> {
        let d = &self.config().decoder;
        let attn = d.attention();
        let pos = state.frame;
        let (cos, sin) = rope_table(pos, &self.dec_freqs);
        for (l, w) in self.weights().decoder.layers.iter().enumerate() {
            let spec = BlockSpec { w: &w.block, attn: &attn, ffn_hidden: d.ffn_hidden, eps: d.norm_eps };
            let scale = match &state.cond {
                DelayCond::Ada(g) => Some(g[l].as_slice()),
                _ => None,
            };
            block_row(&spec, x, pos, (&cos, &sin), l, &mut state.kv, scale, &mut state.scratch)?;
        }
        Ok(())
    }

    fn check_step<K: KvStore>(&self, state: &DecoderState<K>, audio: &[f32]) -> Result<()> {
        let d = &self.config().decoder;
        if audio.len() != d.d_model {
            return Err(shape_err("decode_step", format!("audio row has {} values, expected {}", audio.len(), d.d_model)));
        }
        for l in 0..d.n_layers {
            if state.kv.len(l) != state.frame {
                return Err(Error::Desync(format!(
                    "decoder layer {l} holds {} positions but the stream is at frame {}",
                    state.kv.len(l),
                    state.frame
                )));
            }
        }
        Ok(())
    }

    /// One greedy decoder step from an adapter output row.
    pub fn decode_step<K: KvStore>(&self, state: &mut DecoderState<K>, audio: &[f32]) -> Result<DecodeOutput> {
        self.check_step(state, audio)?;
        let mut x = self.fuse_streams(audio, state.last_token, state.frame, &state.cond)?;
        self.decoder_layers_row(state, &mut x)?;
        let d = &self.config().decoder;
        let mut h = vec![0.0; d.d_model];
        rms_norm_into(&x, self.weights().decoder.final_norm.data(), d.norm_eps, &mut h);
        let emb = &self.weights().decoder.embedding;
        let logits: Vec<f32> = (0..emb.rows()).map(|v| ops::dot(&h, emb.row(v))).collect();
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decoder logits"));
        }
        let id = argmax(&logits) as TokenId;
        state.last_token = id;
        state.frame += 1;
        Ok(DecodeOutput { token: self.vocab().token(id), logits })
    }

    /// Advance the decoder with a forced next-token input and no output head.
    pub fn decode_forced<K: KvStore>(&self, state: &mut DecoderState<K>, audio: &[f32], next: TokenId) -> Result<()> {
        self.check_step(state, audio)?;
        let mut x = self.fuse_streams(audio, state.last_token, state.frame, &state.cond)?;
        self.decoder_layers_row(state, &mut x)?;
        state.last_token = next;
        state.frame += 1;
        Ok(())
    }

    /// Run one decoder block over a sequence with a fresh cache, starting at
    /// position 0, optionally with `g(τ)` applied.
    pub fn decoder_block(&self, layer: usize, x: &[f32], delay: Option<DelaySpec>) -> Result<BlockOutput> {
        let d = &self.config().decoder;
        let w = self
            .weights()
            .decoder
            .layers
            .get(layer)
            .ok_or_else(|| Error::Config(format!("decoder has no layer {layer}")))?;
        if x.is_empty() || x.len() % d.d_model != 0 {
            return Err(shape_err("decoder_block", format!("{} values for width {}", x.len(), d.d_model)));
        }
        let attn = d.attention();
        let spec = BlockSpec { w: &w.block, attn: &attn, ffn_hidden: d.ffn_hidden, eps: d.norm_eps };
        let g = delay.and_then(|t| self.delay_gain(layer, t));
        let mut kv = WindowKv::new(d.n_layers, attn.kv_dim());
        let mut scratch = BlockScratch::new(d.d_model, &attn, d.ffn_hidden);
        let mut output = x.to_vec();
        let mut attn_branch = Vec::with_capacity(x.len());
        for (pos, row) in output.chunks_exact_mut(d.d_model).enumerate() {
            let (cos, sin) = rope_table(pos, &self.dec_freqs);
            block_row(&spec, row, pos, (&cos, &sin), layer, &mut kv, g.as_deref(), &mut scratch)?;
            attn_branch.extend_from_slice(&scratch.attn_out);
        }
        Ok(BlockOutput { attn_branch, output })
    }
}
