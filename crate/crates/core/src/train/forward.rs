//! Teacher-forced forward pass on the autodiff tape.

use crate::config::Conditioning;
use crate::decoder::DelaySpec;
use crate::encoder::{normalize_mel, ENCODER_STRIDE};
use crate::model::Model;
use crate::nn::ops::sinusoidal_embedding;
use crate::nn::{Graph, NodeId, Tensor};
use crate::tokenizer::TokenId;
use crate::weights::{BlockWeights, Group, Weights};

/// Graph handles produced by [`forward`].
pub struct ForwardNodes {
    pub params: Weights<NodeId>,
    pub logits: NodeId,
    /// Adapter output rows.
    pub audio: NodeId,
}

fn block(
    g: &mut Graph,
    w: &BlockWeights<NodeId>,
    mut h: NodeId,
    attn: crate::nn::AttentionConfig,
    eps: f32,
    ffn_scale: Option<NodeId>,
) -> NodeId {
    let xn = g.rms_norm(h, w.attn_norm, eps);
    let q = g.linear(xn, w.wq);
    let k = g.linear(xn, w.wk);
    let v = g.linear(xn, w.wv);
    let q = g.rope(q, attn.head_dim, 0, attn.rope_theta);
    let k = g.rope(k, attn.head_dim, 0, attn.rope_theta);
    let a = g.attention(q, k, v, attn);
    let o = g.linear(a, w.wo);
    h = g.add(h, o);
    let mut hn = g.rms_norm(h, w.ffn_norm, eps);
    if let Some(s) = ffn_scale {
        hn = g.scale_one_plus(hn, s);
    }
    let gate = g.linear(hn, w.w_gate);
    let gate = g.silu(gate);
    let up = g.linear(hn, w.w_up);
    let m = g.mul(gate, up);
    let f = g.linear(m, w.w_down);
    g.add(h, f)
}

/// Build the full model on `g` for one utterance.
///
/// `mel` holds `8 · prev_tokens.len()` raw log-mel rows; `prev_tokens[t]` is
/// the text-stream input at frame `t`. Parameters in groups for which
/// `trainable` returns false are added as constant leaves.
pub fn forward(
    g: &mut Graph,
    model: &Model,
    mel: &[f32],
    prev_tokens: &[TokenId],
    delay: DelaySpec,
    trainable: impl Fn(Group) -> bool,
) -> ForwardNodes {
    let params = param_leaves(g, model, trainable);
    let audio = forward_audio(g, model, &params, mel, prev_tokens.len());
    let logits = forward_text(g, model, &params, audio, prev_tokens, delay);
    ForwardNodes { params, logits, audio }
}

pub fn param_leaves(g: &mut Graph, model: &Model, trainable: impl Fn(Group) -> bool) -> Weights<NodeId> {
    model.weights().map(|info, t| g.leaf(t.clone(), trainable(info.group)))
}

/// Encoder and adapter: `n` adapter rows from `8 · n` mel rows.
pub fn forward_audio(g: &mut Graph, model: &Model, params: &Weights<NodeId>, mel: &[f32], n: usize) -> NodeId {
    let cfg = model.config();
    let (e, d) = (&cfg.encoder, &cfg.decoder);
    let x: Vec<f32> = mel.iter().map(|&v| normalize_mel(v)).collect();
    let rows = x.len() / e.n_mels;
    assert_eq!(rows, 8 * n, "forward: mel rows vs frames");
    let x = g.leaf(Tensor::new(vec![rows, e.n_mels], x).expect("mel shape"), false);
    let pe = &params.encoder;
    let c1 = g.conv(x, pe.conv1, 1);
    let c1 = g.gelu(c1);
    let c2 = g.conv(c1, pe.conv2, ENCODER_STRIDE);
    let mut h = g.gelu(c2);
    let ea = e.attention();
    for l in &pe.layers {
        h = block(g, l, h, ea, e.norm_eps, None);
    }
    let enc = g.rms_norm(h, pe.final_norm, e.norm_eps);

    let pooled = g.reshape(enc, vec![n, d.pooling * e.d_model]);
    let a1 = g.linear(pooled, params.adapter.w1);
    let a1 = g.gelu(a1);
    g.linear(a1, params.adapter.w2)
}

/// Decoder logits over adapter rows `audio` at one delay.
pub fn forward_text(
    g: &mut Graph,
    model: &Model,
    params: &Weights<NodeId>,
    audio: NodeId,
    prev_tokens: &[TokenId],
    delay: DelaySpec,
) -> NodeId {
    let d = &model.config().decoder;
    let n = prev_tokens.len();
    let pd = &params.decoder;
    let tau = delay.frames() as usize;
    let ids: Vec<Option<usize>> = (0..n)
        .map(|t| (!model.is_delay_token_frame(t)).then_some(prev_tokens[t] as usize))
        .collect();
    let text = g.gather(pd.embedding, ids);
    let text = match (d.conditioning, pd.delay_tokens) {
        (Conditioning::SpecialToken, Some(table)) => {
            let ids = (0..n).map(|t| model.is_delay_token_frame(t).then_some(tau)).collect();
            let dt = g.gather(table, ids);
            g.add(text, dt)
        }
        _ => text,
    };
    let mut h = g.add(audio, text);
    let s = sinusoidal_embedding(tau as f32, d.d_model);
    if d.conditioning == Conditioning::SumEmbedding {
        let se = g.leaf(Tensor::new(vec![1, d.d_model], s.clone()).expect("row"), false);
        h = g.add_row(h, se);
    }
    let da = d.attention();
    for l in &pd.layers {
        let scale = l.cond.as_ref().map(|c| {
            let s = g.leaf(Tensor::new(vec![1, d.d_model], s.clone()).expect("row"), false);
            let z = g.linear(s, c.w1);
            let z = g.gelu(z);
            g.linear(z, c.w2)
        });
        h = block(g, &l.block, h, da, d.norm_eps, scale);
    }
    let hn = g.rms_norm(h, pd.final_norm, d.norm_eps);
    g.linear_transposed(hn, pd.embedding)
}
