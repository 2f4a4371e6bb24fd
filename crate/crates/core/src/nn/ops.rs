//! Row-wise numeric kernels and their backward passes.
//!
//! Every kernel fixes its summation order so that a row computed alone
//! (streaming) is bit-identical to the same row computed inside a batch.
//! Linear weights are stored `[d_in, d_out]` row-major.

use crate::error::{shape_err, Result};

pub const DEFAULT_RMS_EPS: f32 = 1e-5;
pub const DEFAULT_ROPE_THETA: f32 = 10_000.0;

/// Dot product with eight fixed accumulators.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += a * x`
#[inline]
pub fn axpy(a: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

// ---------------------------------------------------------------- linear

/// `y = x · W` for one row; `w` is `[d_in, d_out]`.
#[inline]
pub fn linear_row_into(x: &[f32], w: &[f32], d_out: usize, y: &mut [f32]) {
    debug_assert_eq!(w.len(), x.len() * d_out);
    y.fill(0.0);
    for (i, &xi) in x.iter().enumerate() {
        axpy(xi, &w[i * d_out..(i + 1) * d_out], y);
    }
}

pub fn linear_row(x: &[f32], w: &[f32], d_out: usize) -> Vec<f32> {
    let mut y = vec![0.0; d_out];
    linear_row_into(x, w, d_out, &mut y);
    y
}

/// Row-wise linear map over `rows` rows of width `d_in`.
pub fn linear_rows(x: &[f32], w: &[f32], d_in: usize, d_out: usize) -> Vec<f32> {
    let rows = x.len() / d_in;
    let mut y = vec![0.0; rows * d_out];
    for r in 0..rows {
        linear_row_into(
            &x[r * d_in..(r + 1) * d_in],
            w,
            d_out,
            &mut y[r * d_out..(r + 1) * d_out],
        );
    }
    y
}

pub fn linear_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    d_in: usize,
    d_out: usize,
    dx: Option<&mut [f32]>,
    dw: Option<&mut [f32]>,
) {
    let rows = x.len() / d_in;
    if let Some(dx) = dx {
        for r in 0..rows {
            let dyr = &dy[r * d_out..(r + 1) * d_out];
            for i in 0..d_in {
                dx[r * d_in + i] += dot(dyr, &w[i * d_out..(i + 1) * d_out]);
            }
        }
    }
    if let Some(dw) = dw {
        for r in 0..rows {
            let dyr = &dy[r * d_out..(r + 1) * d_out];
            for i in 0..d_in {
                axpy(x[r * d_in + i], dyr, &mut dw[i * d_out..(i + 1) * d_out]);
            }
        }
    }
}

// ---------------------------------------------------------------- rms norm

#[inline]
pub fn rms_norm_into(x: &[f32], weight: &[f32], eps: f32, y: &mut [f32]) {
    let n = x.len() as f32;
    let ms = x.iter().map(|v| v * v).sum::<f32>() / n;
    let r = 1.0 / (ms + eps).sqrt();
    for ((yi, xi), wi) in y.iter_mut().zip(x).zip(weight) {
        *yi = xi * r * wi;
    }
}

/// `y[i] = x[i] / sqrt(mean(x²) + eps) · weight[i]`
pub fn rms_norm(x: &[f32], weight: &[f32], eps: f32) -> Result<Vec<f32>> {
    if x.len() != weight.len() {
        return Err(shape_err(
            "rms_norm",
            format!("x has {} values, weight {}", x.len(), weight.len()),
        ));
    }
    if !(eps > 0.0) {
        return Err(shape_err("rms_norm", "eps must be positive"));
    }
    let mut y = vec![0.0; x.len()];
    rms_norm_into(x, weight, eps, &mut y);
    Ok(y)
}

pub fn rms_norm_rows(x: &[f32], weight: &[f32], eps: f32) -> Vec<f32> {
    let d = weight.len();
    let mut y = vec![0.0; x.len()];
    for (xr, yr) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        rms_norm_into(xr, weight, eps, yr);
    }
    y
}

pub fn rms_norm_rows_backward(
    x: &[f32],
    weight: &[f32],
    eps: f32,
    dy: &[f32],
    dx: Option<&mut [f32]>,
    mut dw: Option<&mut [f32]>,
) {
    let d = weight.len();
    let n = d as f32;
    let mut dx = dx;
    for (row, (xr, dyr)) in x.chunks_exact(d).zip(dy.chunks_exact(d)).enumerate() {
        let ms = xr.iter().map(|v| v * v).sum::<f32>() / n;
        let r = 1.0 / (ms + eps).sqrt();
        if let Some(dw) = dw.as_deref_mut() {
            for i in 0..d {
                dw[i] += dyr[i] * xr[i] * r;
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let mut s = 0.0f32;
            for i in 0..d {
                s += dyr[i] * weight[i] * xr[i];
            }
            let c = r * r * r / n * s;
            let dxr = &mut dx[row * d..(row + 1) * d];
            for i in 0..d {
                dxr[i] += r * weight[i] * dyr[i] - c * xr[i];
            }
        }
    }
}

// ---------------------------------------------------------------- activations

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f32) -> f32 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_K: f32 = 0.044_715;

/// tanh-approximated GELU
#[inline]
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

// ---------------------------------------------------------------- swiglu

/// Weights of a bias-free SwiGLU feed-forward block.
#[derive(Debug, Clone, Copy)]
pub struct SwigluParams<'a> {
    /// `[d, hidden]`
    pub gate: &'a [f32],
    /// `[d, hidden]`
    pub up: &'a [f32],
    /// `[hidden, d]`
    pub down: &'a [f32],
    pub d_model: usize,
    pub hidden: usize,
}

impl SwigluParams<'_> {
    fn check(&self, x_len: usize) -> Result<()> {
        let (d, h) = (self.d_model, self.hidden);
        if x_len != d || self.gate.len() != d * h || self.up.len() != d * h || self.down.len() != h * d
        {
            return Err(shape_err(
                "swiglu_ffn",
                format!("x={x_len} d={d} hidden={h} gate={} up={} down={}", self.gate.len(), self.up.len(), self.down.len()),
            ));
        }
        Ok(())
    }
}

pub(crate) fn swiglu_row_into(x: &[f32], p: &SwigluParams<'_>, scratch: &mut [f32], y: &mut [f32]) {
    let h = p.hidden;
    let (g, u) = scratch.split_at_mut(h);
    linear_row_into(x, p.gate, h, g);
    linear_row_into(x, p.up, h, u);
    for (gi, ui) in g.iter_mut().zip(u.iter()) {
        *gi = silu(*gi) * ui;
    }
    linear_row_into(g, p.down, p.d_model, y);
}

/// `down(silu(gate(x)) ⊙ up(x))`
pub fn swiglu_ffn(x: &[f32], params: &SwigluParams<'_>) -> Result<Vec<f32>> {
    params.check(x.len())?;
    let mut scratch = vec![0.0; 2 * params.hidden];
    let mut y = vec![0.0; params.d_model];
    swiglu_row_into(x, params, &mut scratch, &mut y);
    Ok(y)
}

// ---------------------------------------------------------------- rope

/// Rotation frequencies `theta^(-2i/head_dim)` for each pair.
pub fn rope_freqs(head_dim: usize, theta: f32) -> Vec<f64> {
    (0..head_dim / 2)
        .map(|i| (theta as f64).powf(-2.0 * i as f64 / head_dim as f64))
        .collect()
}

/// `(cos, sin)` tables for one absolute position.
pub fn rope_table(position: usize, freqs: &[f64]) -> (Vec<f32>, Vec<f32>) {
    freqs
        .iter()
        .map(|f| {
            let a = position as f64 * f;
            (a.cos() as f32, a.sin() as f32)
        })
        .unzip()
}

/// Rotate consecutive pairs of each head in place; `sign = -1` applies the inverse.
pub(crate) fn rope_rotate(x: &mut [f32], head_dim: usize, cos: &[f32], sin: &[f32], sign: f32) {
    for head in x.chunks_exact_mut(head_dim) {
        for (i, pair) in head.chunks_exact_mut(2).enumerate() {
            let (c, s) = (cos[i], sign * sin[i]);
            let (a, b) = (pair[0], pair[1]);
            pair[0] = a * c - b * s;
            pair[1] = a * s + b * c;
        }
    }
}

/// Apply rotary embeddings to a row of concatenated heads at `position`.
pub fn rope_apply(x: &[f32], head_dim: usize, position: usize, theta: f32) -> Result<Vec<f32>> {
    if head_dim == 0 || head_dim % 2 != 0 || x.len() % head_dim != 0 {
        return Err(shape_err(
            "rope_apply",
            format!("head_dim {head_dim} must be even and divide {}", x.len()),
        ));
    }
    let (cos, sin) = rope_table(position, &rope_freqs(head_dim, theta));
    let mut y = x.to_vec();
    rope_rotate(&mut y, head_dim, &cos, &sin, 1.0);
    Ok(y)
}

// ---------------------------------------------------------------- conv

pub const CONV_KERNEL: usize = 3;

/// One output row of a kernel-3 causal conv. `taps[j]` is the input row for
/// tap `j`; tap 2 is the current frame. `w` is `[3, c_in, c_out]`.
#[inline]
pub fn conv_row_into(taps: [&[f32]; CONV_KERNEL], w: &[f32], c_out: usize, y: &mut [f32]) {
    let c_in = taps[0].len();
    y.fill(0.0);
    for (j, tap) in taps.iter().enumerate() {
        let wj = &w[j * c_in * c_out..(j + 1) * c_in * c_out];
        for (i, &xi) in tap.iter().enumerate() {
            axpy(xi, &wj[i * c_out..(i + 1) * c_out], y);
        }
    }
}

pub fn conv_output_len(t_in: usize, stride: usize) -> usize {
    t_in.div_ceil(stride)
}

/// Causal kernel-3 convolution with zero left padding; output `t` reads
/// inputs `stride·t − 2 ..= stride·t`.
pub fn causal_conv1d(x: &[f32], c_in: usize, w: &[f32], c_out: usize, stride: usize) -> Result<Vec<f32>> {
    if x.is_empty() {
        return Err(crate::Error::EmptyInput("causal_conv1d"));
    }
    if !(stride == 1 || stride == 2) || x.len() % c_in != 0 || w.len() != CONV_KERNEL * c_in * c_out {
        return Err(shape_err(
            "causal_conv1d",
            format!("stride={stride} x={} c_in={c_in} w={} c_out={c_out}", x.len(), w.len()),
        ));
    }
    Ok(causal_conv1d_unchecked(x, c_in, w, c_out, stride))
}

pub(crate) fn causal_conv1d_unchecked(x: &[f32], c_in: usize, w: &[f32], c_out: usize, stride: usize) -> Vec<f32> {
    let t_in = x.len() / c_in;
    let t_out = conv_output_len(t_in, stride);
    let zero = vec![0.0f32; c_in];
    let mut y = vec![0.0; t_out * c_out];
    for t in 0..t_out {
        let centre = stride * t;
        let taps: [&[f32]; CONV_KERNEL] = std::array::from_fn(|j| {
            let back = CONV_KERNEL - 1 - j;
            if centre >= back {
                let p = centre - back;
                &x[p * c_in..(p + 1) * c_in]
            } else {
                &zero[..]
            }
        });
        conv_row_into(taps, w, c_out, &mut y[t * c_out..(t + 1) * c_out]);
    }
    y
}

pub fn causal_conv1d_backward(
    x: &[f32],
    c_in: usize,
    w: &[f32],
    c_out: usize,
    stride: usize,
    dy: &[f32],
    mut dx: Option<&mut [f32]>,
    mut dw: Option<&mut [f32]>,
) {
    let t_in = x.len() / c_in;
    let t_out = conv_output_len(t_in, stride);
    for t in 0..t_out {
        let dyr = &dy[t * c_out..(t + 1) * c_out];
        let centre = stride * t;
        for j in 0..CONV_KERNEL {
            let back = CONV_KERNEL - 1 - j;
            if centre < back {
                continue;
            }
            let p = centre - back;
            let wj = &w[j * c_in * c_out..(j + 1) * c_in * c_out];
            if let Some(dx) = dx.as_deref_mut() {
                for i in 0..c_in {
                    dx[p * c_in + i] += dot(dyr, &wj[i * c_out..(i + 1) * c_out]);
                }
            }
            if let Some(dw) = dw.as_deref_mut() {
                let dwj = &mut dw[j * c_in * c_out..(j + 1) * c_in * c_out];
                for i in 0..c_in {
                    axpy(x[p * c_in + i], dyr, &mut dwj[i * c_out..(i + 1) * c_out]);
                }
            }
        }
    }
}

// ---------------------------------------------------------------- embeddings

/// Standard transformer sinusoidal embedding of a scalar.
pub fn sinusoidal_embedding(value: f32, dim: usize) -> Vec<f32> {
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let freq = 10_000f64.powf(-2.0 * i as f64 / dim as f64);
        let a = value as f64 * freq;
        out[2 * i] = a.sin() as f32;
        out[2 * i + 1] = a.cos() as f32;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    #[test]
    fn rms_norm_zero_input_is_zero() {
        let y = rms_norm(&[0.0; 6], &[0.3, -1.0, 2.0, 1.0, 1.0, 5.0], 1e-5).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rms_norm_constant_input_closed_form() {
        let c = 0.7f32;
        let eps = 1e-5f32;
        let w = [0.5f32, -2.0, 1.5, 3.0];
        let y = rms_norm(&[c; 4], &w, eps).unwrap();
        let expect = c as f64 / ((c as f64).powi(2) + eps as f64).sqrt();
        for (yi, wi) in y.iter().zip(&w) {
            assert!((*yi as f64 - expect * *wi as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn rms_norm_positive_scale_keeps_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x = rand_vec(&mut rng, 16);
            let w = rand_vec(&mut rng, 16);
            let alpha = rng.random_range(0.1f32..10.0);
            let xs: Vec<f32> = x.iter().map(|v| v * alpha).collect();
            let am = |v: &[f32]| {
                v.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                    .unwrap()
                    .0
            };
            assert_eq!(am(&rms_norm(&x, &w, 1e-5).unwrap()), am(&rms_norm(&xs, &w, 1e-5).unwrap()));
        }
    }

    #[test]
    fn rms_norm_rejects_mismatch() {
        assert!(rms_norm(&[1.0, 2.0], &[1.0], 1e-5).is_err());
    }

    #[test]
    fn swiglu_zero_input_and_zero_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (d, h) = (6, 10);
        let gate = rand_vec(&mut rng, d * h);
        let up = rand_vec(&mut rng, d * h);
        let down = rand_vec(&mut rng, h * d);
        let p = SwigluParams { gate: &gate, up: &up, down: &down, d_model: d, hidden: h };
        assert!(swiglu_ffn(&vec![0.0; d], &p).unwrap().iter().all(|&v| v == 0.0));
        let zero_gate = vec![0.0; d * h];
        let p0 = SwigluParams { gate: &zero_gate, ..p };
        let x = rand_vec(&mut rng, d);
        assert!(swiglu_ffn(&x, &p0).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn swiglu_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (d, h) = (7, 12);
        let gate = rand_vec(&mut rng, d * h);
        let up = rand_vec(&mut rng, d * h);
        let down = rand_vec(&mut rng, h * d);
        let x = rand_vec(&mut rng, d);
        let p = SwigluParams { gate: &gate, up: &up, down: &down, d_model: d, hidden: h };
        let y = swiglu_ffn(&x, &p).unwrap();
        // naive loop in f64
        let mut hid = vec![0.0f64; h];
        for j in 0..h {
            let (mut g, mut u) = (0.0f64, 0.0f64);
            for i in 0..d {
                g += x[i] as f64 * gate[i * h + j] as f64;
                u += x[i] as f64 * up[i * h + j] as f64;
            }
            hid[j] = g / (1.0 + (-g).exp()) * u;
        }
        for o in 0..d {
            let mut acc = 0.0f64;
            for j in 0..h {
                acc += hid[j] * down[j * d + o] as f64;
            }
            assert!((acc - y[o] as f64).abs() <= 1e-6, "{acc} vs {}", y[o]);
        }
        let bad = SwigluParams { hidden: 11, ..p };
        assert!(swiglu_ffn(&x, &bad).is_err());
    }

    #[test]
    fn rope_identity_at_zero_and_rotation_formula() {
        let x = [0.3f32, -1.2, 0.5, 2.0];
        assert_eq!(rope_apply(&x, 4, 0, 10_000.0).unwrap(), x.to_vec());
        for m in [1usize, 2, 7, 100] {
            let y = rope_apply(&[1.0, 0.0], 2, m, 10_000.0).unwrap();
            assert!((y[0] - (m as f32).cos()).abs() < 1e-6);
            assert!((y[1] - (m as f32).sin()).abs() < 1e-6);
        }
        assert!(rope_apply(&[1.0, 2.0, 3.0], 3, 1, 10_000.0).is_err());
    }

    #[test]
    fn rope_relative_position_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let q = rand_vec(&mut rng, 16);
            let k = rand_vec(&mut rng, 16);
            let m = rng.random_range(0..200usize);
            let n = rng.random_range(0..200usize);
            let s = rng.random_range(0..200usize);
            let a = dot(&rope_apply(&q, 16, m, 10_000.0).unwrap(), &rope_apply(&k, 16, n, 10_000.0).unwrap());
            let b = dot(&rope_apply(&q, 16, m + s, 10_000.0).unwrap(), &rope_apply(&k, 16, n + s, 10_000.0).unwrap());
            assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn conv_identity_kernel_and_length() {
        let c = 3;
        // identity tap on the current frame
        let mut w = vec![0.0; CONV_KERNEL * c * c];
        for i in 0..c {
            w[2 * c * c + i * c + i] = 1.0;
        }
        let x: Vec<f32> = (0..7 * c).map(|v| v as f32 * 0.25 - 1.0).collect();
        assert_eq!(causal_conv1d(&x, c, &w, c, 1).unwrap(), x);
        let y = causal_conv1d(&x, c, &w, c, 2).unwrap();
        assert_eq!(y.len() / c, 4);
        assert!(causal_conv1d(&[], c, &w, c, 1).is_err());
        assert!(causal_conv1d(&x, c, &w, c, 3).is_err());
    }

    #[test]
    fn conv_impulse_response_is_reversed_taps() {
        let taps = [0.5f32, -2.0, 3.0];
        let x = {
            let mut v = vec![0.0; 8];
            v[3] = 1.0;
            v
        };
        let y = causal_conv1d(&x, 1, &taps, 1, 1).unwrap();
        assert_eq!(y, vec![0.0, 0.0, 0.0, 3.0, -2.0, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn conv_is_causal_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (c_in, c_out, t) = (4, 5, 11);
        let w = rand_vec(&mut rng, 3 * c_in * c_out);
        let x = rand_vec(&mut rng, t * c_in);
        for stride in [1usize, 2] {
            let base = causal_conv1d(&x, c_in, &w, c_out, stride).unwrap();
            for p in 0..t {
                let mut x2 = x.clone();
                x2[p * c_in + 1] += 3.0;
                let y2 = causal_conv1d(&x2, c_in, &w, c_out, stride).unwrap();
                for o in 0..conv_output_len(t, stride) {
                    let row = |v: &[f32]| v[o * c_out..(o + 1) * c_out].iter().map(|f| f.to_bits()).collect::<Vec<_>>();
                    if stride * o < p {
                        assert_eq!(row(&base), row(&y2), "stride {stride} out {o} perturbed {p}");
                    }
                }
            }
        }
    }

    #[test]
    fn dot_matches_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in [0usize, 1, 7, 8, 9, 33] {
            let a = rand_vec(&mut rng, n);
            let b = rand_vec(&mut rng, n);
            let r: f64 = a.iter().zip(&b).map(|(x, y)| *x as f64 * *y as f64).sum();
            assert!((dot(&a, &b) as f64 - r).abs() < 1e-5);
        }
    }
}
