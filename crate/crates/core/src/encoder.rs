//! Causal audio encoder: conv stem (stride 2) and sliding-window blocks.
//!
//! The step path consumes mel frames in pairs and produces one 50 Hz output
//! per pair. The batch path runs the same per-row kernels over a whole
//! utterance, so the two agree bit for bit.

use crate::cache::{KvStore, WindowKv};
use crate::error::{shape_err, Error, Result};
use crate::model::{block_row, BlockScratch, BlockSpec, Model};
use crate::nn::ops::{self, conv_row_into, gelu, rms_norm_into, rope_table};

/// Log-mel values are mapped through `(x - MEL_SHIFT) / MEL_SCALE` before the stem.
pub const MEL_SHIFT: f32 = -8.0;
pub const MEL_SCALE: f32 = 8.0;

/// Mel frames consumed per encoder output.
pub const ENCODER_STRIDE: usize = 2;

/// Mel frames of stem context kept between steps: the conv2 window at output
/// `t` reads conv1 outputs `2t-2 ..= 2t`, which in turn read mel `2t-4 ..= 2t`.
const STEM_HISTORY: usize = 4;

pub fn normalize_mel(x: f32) -> f32 {
    (x - MEL_SHIFT) / MEL_SCALE
}

/// Streaming encoder state: stem history, windowed K/V and position.
#[derive(Debug, Clone)]
pub struct EncoderState<K = WindowKv> {
    /// Normalised mel frames `2t-4 .. 2t-1` for the next step `t`.
    history: Vec<f32>,
    steps: usize,
    kv: K,
    conv1: Vec<f32>,
    scratch: BlockScratch,
}

impl<K> EncoderState<K> {
    /// Encoder frames produced so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn kv(&self) -> &K {
        &self.kv
    }

    pub fn kv_mut(&mut self) -> &mut K {
        &mut self.kv
    }
}

impl Model {
    pub fn encoder_state(&self) -> EncoderState {
        let e = &self.config().encoder;
        self.encoder_state_with(WindowKv::new(e.n_layers, e.attention().kv_dim()))
    }

    /// Encoder state over caller-provided K/V storage.
    pub fn encoder_state_with<K: KvStore>(&self, kv: K) -> EncoderState<K> {
        let e = &self.config().encoder;
        let a = e.attention();
        EncoderState {
            history: vec![0.0; STEM_HISTORY * e.n_mels],
            steps: 0,
            kv,
            conv1: vec![0.0; 3 * e.conv_channels],
            scratch: BlockScratch::new(e.d_model, &a, e.ffn_hidden),
        }
    }

    /// Consume mel frames `2t` and `2t+1` and return encoder frame `t`.
    pub fn encode_step<K: KvStore>(&self, state: &mut EncoderState<K>, mel: [&[f32]; 2]) -> Result<Vec<f32>> {
        let e = &self.config().encoder;
        let n = e.n_mels;
        for m in mel {
            if m.len() != n {
                return Err(shape_err("encode_step", format!("mel frame has {} bins, expected {n}", m.len())));
            }
        }
        let t = state.steps;
        let mut window = Vec::with_capacity((STEM_HISTORY + 2) * n);
        window.extend_from_slice(&state.history);
        for m in mel {
            window.extend(m.iter().map(|&x| normalize_mel(x)));
        }
        let c = e.conv_channels;
        let w1 = self.weights().encoder.conv1.data();
        // conv1 outputs at mel positions 2t-2, 2t-1, 2t; window row r is mel 2t-4+r.
        for j in 0..3 {
            let out = &mut state.conv1[j * c..(j + 1) * c];
            let p = 2 * t + j;
            if p < 2 {
                out.fill(0.0);
                continue;
            }
            let taps = [&window[j * n..(j + 1) * n], &window[(j + 1) * n..(j + 2) * n], &window[(j + 2) * n..(j + 3) * n]];
            conv_row_into(taps, w1, c, out);
            out.iter_mut().for_each(|v| *v = gelu(*v));
        }
        let mut x = vec![0.0; e.d_model];
        let taps = [&state.conv1[..c], &state.conv1[c..2 * c], &state.conv1[2 * c..]];
        conv_row_into(taps, self.weights().encoder.conv2.data(), e.d_model, &mut x);
        x.iter_mut().for_each(|v| *v = gelu(*v));
        state.history.copy_from_slice(&window[2 * n..]);

        let out = self.encoder_layers_row(&mut x, t, &mut state.kv, &mut state.scratch)?;
        state.steps += 1;
        Ok(out)
    }

    fn encoder_layers_row<K: KvStore>(
        &self,
        x: &mut [f32],
        pos: usize,
        kv: &mut K,
        scratch: &mut BlockScratch,
    ) -> Result<Vec<f32>> {
        let e = &self.config().encoder;
        let attn = e.attention();
        let (cos, sin) = rope_table(pos, &self.enc_freqs);
        for (l, w) in self.weights().encoder.layers.iter().enumerate() {
            let spec = BlockSpec { w, attn: &attn, ffn_hidden: e.ffn_hidden, eps: e.norm_eps };
            block_row(&spec, x, pos, (&cos, &sin), l, kv, None, scratch)?;
        }
        let mut y = vec![0.0; e.d_model];
        rms_norm_into(x, self.weights().encoder.final_norm.data(), e.norm_eps, &mut y);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder"));
        }
        Ok(y)
    }

    /// Conv stem over a whole utterance of raw log-mel rows; returns
    /// `ceil(T/2)` rows of width `d_model`.
    pub fn encoder_stem(&self, mel: &[f32]) -> Result<Vec<f32>> {
        let e = &self.config().encoder;
        if mel.is_empty() {
            return Err(Error::EmptyInput("encoder_stem"));
        }
        if mel.len() % e.n_mels != 0 {
            return Err(shape_err("encoder_stem", format!("{} values is not a multiple of {}", mel.len(), e.n_mels)));
        }
        let x: Vec<f32> = mel.iter().map(|&v| normalize_mel(v)).collect();
        let w = &self.weights().encoder;
        let mut h = ops::causal_conv1d(&x, e.n_mels, w.conv1.data(), e.conv_channels, 1)?;
        h.iter_mut().for_each(|v| *v = gelu(*v));
        let mut h = ops::causal_conv1d(&h, e.conv_channels, w.conv2.data(), e.d_model, ENCODER_STRIDE)?;
        h.iter_mut().for_each(|v| *v = gelu(*v));
        Ok(h)
    }

    /// Encode a whole utterance; returns `floor(T/2)` rows (complete pairs only).
    pub fn encode_batch(&self, mel: &[f32]) -> Result<Vec<f32>> {
        let e = &self.config().encoder;
        let mut h = self.encoder_stem(mel)?;
        let t_out = mel.len() / e.n_mels / ENCODER_STRIDE;
        h.truncate(t_out * e.d_model);
        let a = e.attention();
        let mut kv = WindowKv::new(e.n_layers, a.kv_dim());
        let mut scratch = BlockScratch::new(e.d_model, &a, e.ffn_hidden);
        let mut out = Vec::with_capacity(h.len());
        for (t, row) in h.chunks_exact_mut(e.d_model).enumerate() {
            out.extend(self.encoder_layers_row(row, t, &mut kv, &mut scratch)?);
        }
        Ok(out)
    }
}
