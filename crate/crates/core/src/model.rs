//! Model container and the shared pre-norm transformer block.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cache::KvStore;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::frontend::MelFrontend;
use crate::nn::ops::{self, rms_norm_into, rope_freqs, rope_rotate, swiglu_row_into, SwigluParams};
use crate::nn::{attend_query, AttentionConfig, Tensor};
use crate::tokenizer::Vocabulary;
use crate::weights::{param_shapes, BlockWeights, Weights};

/// Configuration plus weights; immutable once built and shared by sessions.
#[derive(Debug)]
pub struct Model {
    config: ModelConfig,
    weights: Weights<Tensor>,
    frontend: Arc<MelFrontend>,
    pub(crate) enc_freqs: Vec<f64>,
    pub(crate) dec_freqs: Vec<f64>,
}

impl Model {
    pub fn new(config: ModelConfig, weights: Weights<Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = param_shapes(&config);
        let mut got = Vec::new();
        weights.for_each(|i, t| got.push((i.name.to_string(), t.shape().to_vec())));
        let mut want = Vec::new();
        expected.for_each(|i, s| want.push((i.name.to_string(), s.clone())));
        if got != want {
            let diff = want
                .iter()
                .zip(&got)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("expected {} {:?}, found {} {:?}", a.0, a.1, b.0, b.1))
                .unwrap_or_else(|| format!("expected {} tensors, found {}", want.len(), got.len()));
            return Err(Error::Config(format!("weights do not match config: {diff}")));
        }
        let enc = config.encoder.attention();
        let dec = config.decoder.attention();
        Ok(Self {
            frontend: MelFrontend::shared(config.frontend.clone()),
            enc_freqs: rope_freqs(enc.head_dim, enc.rope_theta),
            dec_freqs: rope_freqs(dec.head_dim, dec.rope_theta),
            config,
            weights,
        })
    }

    /// Freshly initialised model from a seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let weights = Weights::init(&config, &mut ChaCha8Rng::seed_from_u64(seed));
        Self::new(config, weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights<Tensor> {
        &self.weights
    }

    /// Mutable access for optimizers; shapes must not change.
    pub fn weights_mut(&mut self) -> &mut Weights<Tensor> {
        &mut self.weights
    }

    pub fn into_parts(self) -> (ModelConfig, Weights<Tensor>) {
        (self.config, self.weights)
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.config.vocab
    }

    pub fn frontend(&self) -> &Arc<MelFrontend> {
        &self.frontend
    }
}

/// Reusable buffers for [`block_row`].
#[derive(Debug, Clone)]
pub(crate) struct BlockScratch {
    xn: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    attn: Vec<f32>,
    /// Attention branch output of the last call.
    pub attn_out: Vec<f32>,
    ffn_hidden: Vec<f32>,
    ffn_out: Vec<f32>,
}

impl BlockScratch {
    pub fn new(d_model: usize, attn: &AttentionConfig, ffn_hidden: usize) -> Self {
        Self {
            xn: vec![0.0; d_model],
            q: vec![0.0; attn.q_dim()],
            k: vec![0.0; attn.kv_dim()],
            v: vec![0.0; attn.kv_dim()],
            attn: vec![0.0; attn.q_dim()],
            attn_out: vec![0.0; d_model],
            ffn_hidden: vec![0.0; 2 * ffn_hidden],
            ffn_out: vec![0.0; d_model],
        }
    }
}

/// Static description of one block for [`block_row`].
pub(crate) struct BlockSpec<'a> {
    pub w: &'a BlockWeights<Tensor>,
    pub attn: &'a AttentionConfig,
    pub ffn_hidden: usize,
    pub eps: f32,
}

/// One position through a pre-norm block, in place:
/// `x += attn(norm(x))`, then `x += ffn(norm(x) ⊙ (1 + ffn_scale))`.
///
/// `rope` holds the `(cos, sin)` tables for `pos`. The new K/V row is
/// appended to `kv` at `pos`, which must be the next position of `layer`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn block_row<K: KvStore>(
    spec: &BlockSpec<'_>,
    x: &mut [f32],
    pos: usize,
    rope: (&[f32], &[f32]),
    layer: usize,
    kv: &mut K,
    ffn_scale: Option<&[f32]>,
    s: &mut BlockScratch,
) -> Result<()> {
    if kv.len(layer) != pos {
        return Err(Error::Desync(format!("layer {layer} holds {} positions, step is at {pos}", kv.len(layer))));
    }
    let w = spec.w;
    let a = spec.attn;
    let hd = a.head_dim;
    rms_norm_into(x, w.attn_norm.data(), spec.eps, &mut s.xn);
    ops::linear_row_into(&s.xn, w.wq.data(), a.q_dim(), &mut s.q);
    ops::linear_row_into(&s.xn, w.wk.data(), a.kv_dim(), &mut s.k);
    ops::linear_row_into(&s.xn, w.wv.data(), a.kv_dim(), &mut s.v);
    rope_rotate(&mut s.q, hd, rope.0, rope.1, 1.0);
    rope_rotate(&mut s.k, hd, rope.0, rope.1, 1.0);
    let lo = a.window_start(pos);
    kv.retire(layer, lo);
    kv.append(layer, &s.k, &s.v)?;
    attend_query(&s.q, kv.source(layer), lo, pos, a, &mut s.attn, None);
    ops::linear_row_into(&s.attn, w.wo.data(), x.len(), &mut s.attn_out);
    for (xi, oi) in x.iter_mut().zip(&s.attn_out) {
        *xi += oi;
    }
    rms_norm_into(x, w.ffn_norm.data(), spec.eps, &mut s.xn);
    if let Some(g) = ffn_scale {
        for (h, gi) in s.xn.iter_mut().zip(g) {
            *h *= 1.0 + gi;
        }
    }
    let p = SwigluParams {
        gate: w.w_gate.data(),
        up: w.w_up.data(),
        down: w.w_down.data(),
        d_model: x.len(),
        hidden: spec.ffn_hidden,
    };
    swiglu_row_into(&s.xn, &p, &mut s.ffn_hidden, &mut s.ffn_out);
    for (xi, fi) in x.iter_mut().zip(&s.ffn_out) {
        *xi += fi;
    }
    Ok(())
}
