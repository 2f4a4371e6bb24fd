//! Dense f64 re-implementation of the encoder, written from the layer
//! definitions rather than the streaming kernels.

use dstream_core::config::ModelConfig;
use dstream_core::encoder::normalize_mel;
use dstream_core::model::Model;
use dstream_core::nn::Tensor;
use dstream_core::weights::BlockWeights;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type M = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> M {
    let c = *t.shape().last().unwrap();
    t.data().chunks(c).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

fn matmul(x: &M, w: &M) -> M {
    x.iter()
        .map(|r| (0..w[0].len()).map(|j| r.iter().zip(w).map(|(a, wr)| a * wr[j]).sum()).collect())
        .collect()
}

fn rms(x: &M, w: &Tensor, eps: f64) -> M {
    x.iter()
        .map(|r| {
            let ms = r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64;
            r.iter().zip(w.data()).map(|(v, g)| v / (ms + eps).sqrt() * *g as f64).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// `y[t] = Σ_k x[s·t - 2 + k] · w[k]`, zero outside the sequence.
fn conv(x: &M, w: &Tensor, stride: usize) -> M {
    let (c_in, c_out) = (w.shape()[1], w.shape()[2]);
    let wd = w.data();
    (0..x.len().div_ceil(stride))
        .map(|t| {
            let mut y = vec![0.0; c_out];
            for k in 0..3 {
                let p = (stride * t + k) as isize - 2;
                if p < 0 || p as usize >= x.len() {
                    continue;
                }
                for i in 0..c_in {
                    for (o, yo) in y.iter_mut().enumerate() {
                        *yo += x[p as usize][i] * wd[(k * c_in + i) * c_out + o] as f64;
                    }
                }
            }
            y
        })
        .collect()
}

fn rope(x: &mut [f64], head_dim: usize, pos: usize, theta: f64) {
    for h in x.chunks_mut(head_dim) {
        for i in 0..head_dim / 2 {
            let a = pos as f64 * theta.powf(-2.0 * i as f64 / head_dim as f64);
            let (u, v) = (h[2 * i], h[2 * i + 1]);
            h[2 * i] = u * a.cos() - v * a.sin();
            h[2 * i + 1] = u * a.sin() + v * a.cos();
        }
    }
}

fn block(x: &mut M, w: &BlockWeights<Tensor>, n_heads: usize, window: usize, theta: f64, eps: f64) {
    let n = rms(x, &w.attn_norm, eps);
    let (mut q, mut k, v) = (matmul(&n, &mat(&w.wq)), matmul(&n, &mat(&w.wk)), matmul(&n, &mat(&w.wv)));
    let hd = q[0].len() / n_heads;
    for t in 0..x.len() {
        rope(&mut q[t], hd, t, theta);
        rope(&mut k[t], hd, t, theta);
    }
    let mut att = vec![vec![0.0; q[0].len()]; x.len()];
    for t in 0..x.len() {
        let lo = (t + 1).saturating_sub(window);
        for h in 0..n_heads {
            let s: Vec<f64> = (lo..=t)
                .map(|j| (0..hd).map(|d| q[t][h * hd + d] * k[j][h * hd + d]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
            for (j, sj) in (lo..=t).zip(&s) {
                let p = (sj - m).exp() / z;
                for d in 0..hd {
                    att[t][h * hd + d] += p * v[j][h * hd + d];
                }
            }
        }
    }
    let o = matmul(&att, &mat(&w.wo));
    for (r, d) in x.iter_mut().zip(&o) {
        r.iter_mut().zip(d).for_each(|(a, b)| *a += b);
    }
    let n = rms(x, &w.ffn_norm, eps);
    let (g, u) = (matmul(&n, &mat(&w.w_gate)), matmul(&n, &mat(&w.w_up)));
    let h: M = g.iter().zip(&u).map(|(gr, ur)| gr.iter().zip(ur).map(|(a, b)| a / (1.0 + (-a).exp()) * b).collect()).collect();
    let f = matmul(&h, &mat(&w.w_down));
    for (r, d) in x.iter_mut().zip(&f) {
        r.iter_mut().zip(d).for_each(|(a, b)| *a += b);
    }
}

fn oracle(m: &Model, mel: &[f32]) -> M {
    let e = &m.config().encoder;
    let w = &m.weights().encoder;
    let x: M = mel.chunks(e.n_mels).map(|r| r.iter().map(|&v| normalize_mel(v) as f64).collect()).collect();
    let h: M = conv(&x, &w.conv1, 1).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
    let mut h: M = conv(&h, &w.conv2, 2).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
    h.truncate(x.len() / 2);
    for l in &w.layers {
        block(&mut h, l, e.n_heads, e.window_frames, e.rope_theta as f64, e.norm_eps as f64);
    }
    rms(&h, &w.final_norm, e.norm_eps as f64)
}

#[test]
fn encoder_matches_dense_f64_oracle() {
    let m = Model::init(ModelConfig::tiny(), 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // longer than the 32-frame window so eviction is exercised
    for rows in [2usize, 9, 90] {
        let mel: Vec<f32> = (0..rows * 128).map(|_| rng.random_range(-18.0f32..3.0)).collect();
        let got = m.encode_batch(&mel).unwrap();
        let want = oracle(&m, &mel);
        assert_eq!(got.len(), want.len() * 64);
        let max = got.iter().zip(want.iter().flatten()).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max);
        assert!(max < 1e-4, "rows {rows}: max abs diff {max}");
    }
}
