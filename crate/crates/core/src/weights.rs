//! Parameter containers.
//!
//! The structs are generic over the per-parameter payload so the same layout
//! holds tensors, graph node ids, gradients and optimizer moments.

use rand::Rng;

use crate::config::{Conditioning, ModelConfig};
use crate::nn::ops::CONV_KERNEL;
use crate::nn::Tensor;

/// Which sub-network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Encoder,
    Adapter,
    Decoder,
}

/// Whether weight decay applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Matrix,
    Norm,
    Embedding,
}

#[derive(Debug, Clone, Copy)]
pub struct ParamInfo<'a> {
    pub name: &'a str,
    pub group: Group,
    pub kind: ParamKind,
}

#[derive(Debug, Clone)]
pub struct BlockWeights<T> {
    pub attn_norm: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub ffn_norm: T,
    pub w_gate: T,
    pub w_up: T,
    pub w_down: T,
}

/// `g(τ) = w2 · gelu(w1 · sinusoid(τ))`
#[derive(Debug, Clone)]
pub struct CondWeights<T> {
    pub w1: T,
    pub w2: T,
}

#[derive(Debug, Clone)]
pub struct EncoderWeights<T> {
    pub conv1: T,
    pub conv2: T,
    pub layers: Vec<BlockWeights<T>>,
    pub final_norm: T,
}

#[derive(Debug, Clone)]
pub struct AdapterWeights<T> {
    pub w1: T,
    pub w2: T,
}

#[derive(Debug, Clone)]
pub struct DecoderLayerWeights<T> {
    pub block: BlockWeights<T>,
    pub cond: Option<CondWeights<T>>,
}

#[derive(Debug, Clone)]
pub struct DecoderWeights<T> {
    /// `[vocab, d]`; also the output head.
    pub embedding: T,
    /// `[max_delay_frames + 1, d]`, special-token conditioning only.
    pub delay_tokens: Option<T>,
    pub layers: Vec<DecoderLayerWeights<T>>,
    pub final_norm: T,
}

#[derive(Debug, Clone)]
pub struct Weights<T> {
    pub encoder: EncoderWeights<T>,
    pub adapter: AdapterWeights<T>,
    pub decoder: DecoderWeights<T>,
}

impl<T> BlockWeights<T> {
    fn map<'s, U>(&'s self, prefix: &str, group: Group, f: &mut impl FnMut(ParamInfo<'_>, &'s T) -> U) -> BlockWeights<U> {
        let mut g = |name: &str, kind, t: &'s T| f(ParamInfo { name: &format!("{prefix}.{name}"), group, kind }, t);
        use ParamKind::{Matrix, Norm};
        BlockWeights {
            attn_norm: g("attn_norm", Norm, &self.attn_norm),
            wq: g("wq", Matrix, &self.wq),
            wk: g("wk", Matrix, &self.wk),
            wv: g("wv", Matrix, &self.wv),
            wo: g("wo", Matrix, &self.wo),
            ffn_norm: g("ffn_norm", Norm, &self.ffn_norm),
            w_gate: g("w_gate", Matrix, &self.w_gate),
            w_up: g("w_up", Matrix, &self.w_up),
            w_down: g("w_down", Matrix, &self.w_down),
        }
    }

    fn each_mut<'s>(&'s mut self, prefix: &str, group: Group, f: &mut impl FnMut(ParamInfo<'_>, &'s mut T)) {
        use ParamKind::{Matrix, Norm};
        let items: [(&str, ParamKind, &'s mut T); 9] = [
            ("attn_norm", Norm, &mut self.attn_norm),
            ("wq", Matrix, &mut self.wq),
            ("wk", Matrix, &mut self.wk),
            ("wv", Matrix, &mut self.wv),
            ("wo", Matrix, &mut self.wo),
            ("ffn_norm", Norm, &mut self.ffn_norm),
            ("w_gate", Matrix, &mut self.w_gate),
            ("w_up", Matrix, &mut self.w_up),
            ("w_down", Matrix, &mut self.w_down),
        ];
        for (name, kind, t) in items {
            f(ParamInfo { name: &format!("{prefix}.{name}"), group, kind }, t);
        }
    }
}

impl<T> Weights<T> {
    /// Structure-preserving map; parameters are visited in a fixed order,
    /// which is also the checkpoint order.
    pub fn map<'s, U>(&'s self, mut f: impl FnMut(ParamInfo<'_>, &'s T) -> U) -> Weights<U> {
        use Group::*;
        use ParamKind::*;
        let e = &self.encoder;
        let mut one = |name: &str, group, kind, t: &'s T| f(ParamInfo { name, group, kind }, t);
        let conv1 = one("encoder.conv1", Encoder, Matrix, &e.conv1);
        let conv2 = one("encoder.conv2", Encoder, Matrix, &e.conv2);
        drop(one);
        let layers = e
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.map(&format!("encoder.layers.{i}"), Encoder, &mut f))
            .collect();
        let final_norm = f(ParamInfo { name: "encoder.final_norm", group: Encoder, kind: Norm }, &e.final_norm);
        let encoder = EncoderWeights { conv1, conv2, layers, final_norm };

        let adapter = AdapterWeights {
            w1: f(ParamInfo { name: "adapter.w1", group: Adapter, kind: Matrix }, &self.adapter.w1),
            w2: f(ParamInfo { name: "adapter.w2", group: Adapter, kind: Matrix }, &self.adapter.w2),
        };

        let d = &self.decoder;
        let embedding = f(ParamInfo { name: "decoder.embedding", group: Decoder, kind: Embedding }, &d.embedding);
        let delay_tokens = d
            .delay_tokens
            .as_ref()
            .map(|t| f(ParamInfo { name: "decoder.delay_tokens", group: Decoder, kind: Embedding }, t));
        let layers = d
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let prefix = format!("decoder.layers.{i}");
                let block = l.block.map(&prefix, Decoder, &mut f);
                let cond = l.cond.as_ref().map(|c| CondWeights {
                    w1: f(ParamInfo { name: &format!("{prefix}.cond.w1"), group: Decoder, kind: Matrix }, &c.w1),
                    w2: f(ParamInfo { name: &format!("{prefix}.cond.w2"), group: Decoder, kind: Matrix }, &c.w2),
                });
                DecoderLayerWeights { block, cond }
            })
            .collect();
        let final_norm = f(ParamInfo { name: "decoder.final_norm", group: Decoder, kind: Norm }, &d.final_norm);
        let decoder = DecoderWeights { embedding, delay_tokens, layers, final_norm };

        Weights { encoder, adapter, decoder }
    }

    pub fn for_each<'s>(&'s self, mut f: impl FnMut(ParamInfo<'_>, &'s T)) {
        let _ = self.map(|i, t| f(i, t));
    }

    /// Mutable visit in the same order as [`Weights::map`].
    pub fn for_each_mut<'s>(&'s mut self, mut f: impl FnMut(ParamInfo<'_>, &'s mut T)) {
        use Group::*;
        use ParamKind::*;
        let e = &mut self.encoder;
        f(ParamInfo { name: "encoder.conv1", group: Encoder, kind: Matrix }, &mut e.conv1);
        f(ParamInfo { name: "encoder.conv2", group: Encoder, kind: Matrix }, &mut e.conv2);
        for (i, l) in e.layers.iter_mut().enumerate() {
            l.each_mut(&format!("encoder.layers.{i}"), Encoder, &mut f);
        }
        f(ParamInfo { name: "encoder.final_norm", group: Encoder, kind: Norm }, &mut e.final_norm);
        f(ParamInfo { name: "adapter.w1", group: Adapter, kind: Matrix }, &mut self.adapter.w1);
        f(ParamInfo { name: "adapter.w2", group: Adapter, kind: Matrix }, &mut self.adapter.w2);
        let d = &mut self.decoder;
        f(ParamInfo { name: "decoder.embedding", group: Decoder, kind: Embedding }, &mut d.embedding);
        if let Some(t) = d.delay_tokens.as_mut() {
            f(ParamInfo { name: "decoder.delay_tokens", group: Decoder, kind: Embedding }, t);
        }
        for (i, l) in d.layers.iter_mut().enumerate() {
            let prefix = format!("decoder.layers.{i}");
            l.block.each_mut(&prefix, Decoder, &mut f);
            if let Some(c) = l.cond.as_mut() {
                f(ParamInfo { name: &format!("{prefix}.cond.w1"), group: Decoder, kind: Matrix }, &mut c.w1);
                f(ParamInfo { name: &format!("{prefix}.cond.w2"), group: Decoder, kind: Matrix }, &mut c.w2);
            }
        }
        f(ParamInfo { name: "decoder.final_norm", group: Decoder, kind: Norm }, &mut d.final_norm);
    }

    /// Visit `self` and `other` in lockstep.
    pub fn zip_mut<U>(&mut self, other: &Weights<U>, mut f: impl FnMut(ParamInfo<'_>, &mut T, &U)) {
        let mut refs: Vec<&U> = Vec::new();
        other.for_each(|_, u| refs.push(u));
        let mut it = refs.into_iter();
        self.for_each_mut(|info, t| f(info, t, it.next().expect("matching layouts")));
    }
}

/// Largest delay, in decoder frames, covered by the delay-token table.
pub const MAX_DELAY_FRAMES: usize = 30;

/// How a parameter is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Ones,
    Zeros,
    Normal(f32),
}

impl<T> Weights<T> {
    /// Build every parameter from its shape and initialiser. Residual output
    /// projections get an extra `1/sqrt(2·n_layers)`; the delay MLP output
    /// starts at zero so conditioning is initially the identity.
    pub fn build(cfg: &ModelConfig, mut make: impl FnMut(&[usize], Init) -> T) -> Self {
        let e = &cfg.encoder;
        let d = &cfg.decoder;
        let inv = |n: usize| 1.0 / (n as f32).sqrt();
        let mut block = |dm: usize, q: usize, kv: usize, ffn: usize, layers: usize| {
            let res = inv(2 * layers);
            BlockWeights {
                attn_norm: make(&[dm], Init::Ones),
                wq: make(&[dm, q], Init::Normal(inv(dm))),
                wk: make(&[dm, kv], Init::Normal(inv(dm))),
                wv: make(&[dm, kv], Init::Normal(inv(dm))),
                wo: make(&[q, dm], Init::Normal(inv(q) * res)),
                ffn_norm: make(&[dm], Init::Ones),
                w_gate: make(&[dm, ffn], Init::Normal(inv(dm))),
                w_up: make(&[dm, ffn], Init::Normal(inv(dm))),
                w_down: make(&[ffn, dm], Init::Normal(inv(ffn) * res)),
            }
        };
        let ea = e.attention();
        let enc_layers: Vec<_> = (0..e.n_layers)
            .map(|_| block(e.d_model, ea.q_dim(), ea.kv_dim(), e.ffn_hidden, e.n_layers))
            .collect();
        let da = d.attention();
        let dec_blocks: Vec<_> = (0..d.n_layers)
            .map(|_| block(d.d_model, da.q_dim(), da.kv_dim(), d.ffn_hidden, d.n_layers))
            .collect();
        let encoder = EncoderWeights {
            conv1: make(&[CONV_KERNEL, e.n_mels, e.conv_channels], Init::Normal(inv(CONV_KERNEL * e.n_mels))),
            conv2: make(&[CONV_KERNEL, e.conv_channels, e.d_model], Init::Normal(inv(CONV_KERNEL * e.conv_channels))),
            layers: enc_layers,
            final_norm: make(&[e.d_model], Init::Ones),
        };
        let pooled = d.pooling * e.d_model;
        let adapter = AdapterWeights {
            w1: make(&[pooled, d.d_model], Init::Normal(inv(pooled))),
            w2: make(&[d.d_model, d.d_model], Init::Normal(inv(d.d_model))),
        };
        let embedding = make(&[cfg.vocab.size(), d.d_model], Init::Normal(inv(d.d_model)));
        let delay_tokens = (d.conditioning == Conditioning::SpecialToken)
            .then(|| make(&[MAX_DELAY_FRAMES + 1, d.d_model], Init::Normal(inv(d.d_model))));
        let layers = dec_blocks
            .into_iter()
            .map(|block| DecoderLayerWeights {
                block,
                cond: (d.conditioning == Conditioning::AdaRmsNorm).then(|| CondWeights {
                    w1: make(&[d.d_model, d.cond_inner], Init::Normal(inv(d.d_model))),
                    w2: make(&[d.cond_inner, d.d_model], Init::Zeros),
                }),
            })
            .collect();
        let final_norm = make(&[d.d_model], Init::Ones);
        let decoder = DecoderWeights { embedding, delay_tokens, layers, final_norm };
        Self { encoder, adapter, decoder }
    }
}

/// Parameter shapes of a configuration, without allocating tensors.
pub fn param_shapes(cfg: &ModelConfig) -> Weights<Vec<usize>> {
    Weights::build(cfg, |s, _| s.to_vec())
}

pub fn count_params(cfg: &ModelConfig) -> usize {
    let mut n = 0;
    param_shapes(cfg).for_each(|_, s| n += s.iter().product::<usize>());
    n
}

impl Weights<Tensor> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        Self::build(cfg, |shape, init| match init {
            Init::Ones => Tensor::filled(shape, 1.0),
            Init::Zeros => Tensor::zeros(shape),
            Init::Normal(std) => Tensor::randn(shape, std, rng),
        })
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.len());
        n
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_, t| Tensor::zeros(t.shape()))
    }
}
