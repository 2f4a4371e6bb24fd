//! Causal sliding-window grouped-query attention.

use serde::{Deserialize, Serialize};

use super::ops::{axpy, dot};
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    /// Past positions visible to a query, counting the query itself.
    pub window: usize,
    pub rope_theta: f32,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.n_kv_heads == 0 || self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} must be a positive multiple of n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.window == 0 {
            return Err(Error::Config("attention window must be >= 1".into()));
        }
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(Error::Config(format!("head_dim {} must be even", self.head_dim)));
        }
        if !(self.rope_theta > 0.0) {
            return Err(Error::Config("rope_theta must be positive".into()));
        }
        Ok(())
    }

    pub fn q_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    /// KV head read by query head `h`.
    pub fn kv_head(&self, h: usize) -> usize {
        h / (self.n_heads / self.n_kv_heads)
    }

    pub fn scale(&self) -> f32 {
        1.0 / (self.head_dim as f32).sqrt()
    }

    /// First position visible from query position `t`.
    pub fn window_start(&self, t: usize) -> usize {
        (t + 1).saturating_sub(self.window)
    }
}

/// Random-access view of a key/value sequence; rows are `[n_kv_heads * head_dim]`.
pub trait KvSource {
    fn key(&self, pos: usize) -> &[f32];
    fn value(&self, pos: usize) -> &[f32];
}

/// Contiguous row-major K/V buffers.
pub struct ContiguousKv<'a> {
    pub keys: &'a [f32],
    pub values: &'a [f32],
    pub width: usize,
}

impl KvSource for ContiguousKv<'_> {
    #[inline]
    fn key(&self, pos: usize) -> &[f32] {
        &self.keys[pos * self.width..(pos + 1) * self.width]
    }
    #[inline]
    fn value(&self, pos: usize) -> &[f32] {
        &self.values[pos * self.width..(pos + 1) * self.width]
    }
}

/// Attend one query row over positions `lo ..= hi` of `kv`.
///
/// Scores, softmax and the value sum all run in increasing position order.
/// When `probs` is given, the softmax weights are appended head by head.
pub fn attend_query<S: KvSource + ?Sized>(
    q: &[f32],
    kv: &S,
    lo: usize,
    hi: usize,
    cfg: &AttentionConfig,
    out: &mut [f32],
    mut probs: Option<&mut Vec<f32>>,
) {
    let hd = cfg.head_dim;
    let scale = cfg.scale();
    let n = hi + 1 - lo;
    let mut scores = vec![0.0f32; n];
    out.fill(0.0);
    for h in 0..cfg.n_heads {
        let g = cfg.kv_head(h);
        let qh = &q[h * hd..(h + 1) * hd];
        let mut max = f32::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            let k = &kv.key(lo + j)[g * hd..(g + 1) * hd];
            *s = dot(qh, k) * scale;
            max = max.max(*s);
        }
        let mut sum = 0.0f32;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        let inv = 1.0 / sum;
        let oh = &mut out[h * hd..(h + 1) * hd];
        for (j, s) in scores.iter_mut().enumerate() {
            *s *= inv;
            axpy(*s, &kv.value(lo + j)[g * hd..(g + 1) * hd], oh);
        }
        if let Some(p) = probs.as_deref_mut() {
            p.extend_from_slice(&scores);
        }
    }
}

/// Saved softmax weights of a batched causal attention call.
#[derive(Debug, Clone, Default)]
pub struct AttentionProbs {
    /// For each query position `t`, `n_heads * visible(t)` weights.
    pub probs: Vec<f32>,
    pub offsets: Vec<usize>,
}

/// Batched causal attention; `q` is `[T, n_heads*head_dim]`, `k`/`v` are
/// `[T, n_kv_heads*head_dim]`. Position `t` sees `[t − window + 1, t]`.
pub fn causal_attention(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    cfg: &AttentionConfig,
) -> Result<Vec<f32>> {
    cfg.validate()?;
    let (qd, kd) = (cfg.q_dim(), cfg.kv_dim());
    if q.len() % qd != 0 || k.len() % kd != 0 || k.len() != v.len() || q.len() / qd != k.len() / kd {
        return Err(shape_err(
            "causal_attention",
            format!("q={} k={} v={} q_dim={qd} kv_dim={kd}", q.len(), k.len(), v.len()),
        ));
    }
    if q.is_empty() {
        return Err(Error::EmptyInput("causal_attention"));
    }
    Ok(causal_attention_with_probs(q, k, v, cfg, false).0)
}

pub(crate) fn causal_attention_with_probs(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    cfg: &AttentionConfig,
    keep_probs: bool,
) -> (Vec<f32>, AttentionProbs) {
    let qd = cfg.q_dim();
    let t_len = q.len() / qd;
    let kv = ContiguousKv {
        keys: k,
        values: v,
        width: cfg.kv_dim(),
    };
    let mut out = vec![0.0; q.len()];
    let mut probs = AttentionProbs::default();
    for t in 0..t_len {
        let lo = cfg.window_start(t);
        if keep_probs {
            probs.offsets.push(probs.probs.len());
        }
        attend_query(
            &q[t * qd..(t + 1) * qd],
            &kv,
            lo,
            t,
            cfg,
            &mut out[t * qd..(t + 1) * qd],
            keep_probs.then_some(&mut probs.probs),
        );
    }
    (out, probs)
}

pub(crate) fn causal_attention_backward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    cfg: &AttentionConfig,
    probs: &AttentionProbs,
    dout: &[f32],
    dq: &mut [f32],
    dk: &mut [f32],
    dv: &mut [f32],
) {
    let (qd, kd, hd) = (cfg.q_dim(), cfg.kv_dim(), cfg.head_dim);
    let scale = cfg.scale();
    let t_len = q.len() / qd;
    let mut dp = Vec::new();
    for t in 0..t_len {
        let lo = cfg.window_start(t);
        let n = t + 1 - lo;
        dp.resize(n, 0.0);
        for h in 0..cfg.n_heads {
            let g = cfg.kv_head(h);
            let p = &probs.probs[probs.offsets[t] + h * n..probs.offsets[t] + (h + 1) * n];
            let doh = &dout[t * qd + h * hd..t * qd + (h + 1) * hd];
            let mut s = 0.0f32;
            for j in 0..n {
                let pos = lo + j;
                dp[j] = dot(doh, &v[pos * kd + g * hd..pos * kd + (g + 1) * hd]);
                s += p[j] * dp[j];
                axpy(p[j], doh, &mut dv[pos * kd + g * hd..pos * kd + (g + 1) * hd]);
            }
            let qh = &q[t * qd + h * hd..t * qd + (h + 1) * hd];
            for j in 0..n {
                let pos = lo + j;
                let ds = p[j] * (dp[j] - s) * scale;
                axpy(ds, &k[pos * kd + g * hd..pos * kd + (g + 1) * hd], &mut dq[t * qd + h * hd..t * qd + (h + 1) * hd]);
                axpy(ds, qh, &mut dk[pos * kd + g * hd..pos * kd + (g + 1) * hd]);
            }
        }
    }
}
