//! Forward kernels shared by the tape and by direct (graph-free) evaluation.
//!
//! Matrices are row-major `[rows, cols]` slices. Weight matrices of affine
//! maps are stored `[out, in]`, so `linear(x, w, b) = x · wᵀ + b`.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Strided read-only view of a matrix inside a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> View<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        View {
            data,
            offset: 0,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major `[_, cols]` buffer.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        View {
            data,
            offset: 0,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// `c = alpha · a · b + beta · c` where `a` is `m×k`, `b` is `k×n` and `c` is
/// a row-major `m×n` block starting at `c_offset` with row stride `c_stride`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: View<'_>,
    b: View<'_>,
    beta: f64,
    c: &mut [f64],
    c_offset: usize,
    c_stride: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c_offset + (m - 1) * c_stride + n <= c.len(), "gemm: output out of bounds");
    if k == 0 {
        for r in 0..m {
            for v in &mut c[c_offset + r * c_stride..c_offset + r * c_stride + n] {
                *v *= beta;
            }
        }
        return;
    }
    assert!(a.last_index(m, k) < a.data.len(), "gemm: lhs out of bounds");
    assert!(b.last_index(k, n) < b.data.len(), "gemm: rhs out of bounds");
    // SAFETY: every index touched by dgemm lies inside the slices, checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr().add(c_offset),
            c_stride as isize,
            1,
        );
    }
}

/// `a · b` for row-major `a: m×k`, `b: k×n`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, 1.0, View::rows(a, k), View::rows(b, n), 0.0, &mut out, 0, n);
    out
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        return Err(Error::shape(op, format!("expected a matrix, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Affine map over rows: `x · wᵀ + b` with `w: [out, in]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (out_dim, in_dim) = require_2d("linear", w)?;
    if x.last_dim() != in_dim {
        return Err(Error::shape(
            "linear",
            format!("input width {} vs weight {:?}", x.last_dim(), w.shape()),
        ));
    }
    if let Some(b) = b {
        if b.len() != out_dim {
            return Err(Error::shape("linear", format!("bias {:?} vs out {out_dim}", b.shape())));
        }
    }
    let rows = x.rows();
    let mut out = vec![0.0; rows * out_dim];
    if let Some(b) = b {
        for r in 0..rows {
            out[r * out_dim..(r + 1) * out_dim].copy_from_slice(b.data());
        }
    }
    gemm(
        rows,
        in_dim,
        out_dim,
        1.0,
        View::rows(x.data(), in_dim),
        View::transposed(w.data(), in_dim),
        if b.is_some() { 1.0 } else { 0.0 },
        &mut out,
        0,
        out_dim,
    );
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out_dim;
    Tensor::new(&shape, out)
}

/// Per-row normalization statistics: normalized values and `1/σ`.
pub(crate) fn layer_norm_stats(x: &[f64], d: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + eps).sqrt();
        rstd[r] = s;
        for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = (v - mean) * s;
        }
    }
    (xhat, rstd)
}

/// Layer normalization over the last axis (population variance).
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.last_dim();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::shape(
            "layer_norm",
            format!("width {d} vs gamma {:?} / beta {:?}", gamma.shape(), beta.shape()),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
    }
    let (xhat, _) = layer_norm_stats(x.data(), d, eps);
    let out = xhat
        .iter()
        .enumerate()
        .map(|(i, v)| v * gamma.data()[i % d] + beta.data()[i % d])
        .collect();
    Tensor::new(x.shape(), out)
}

/// Numerically stable in-place softmax of each row.
pub(crate) fn softmax_rows(buf: &mut [f64], cols: usize) {
    for row in buf.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

pub(crate) fn check_heads(d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "embedding width {d} is not divisible by {heads} heads"
        )));
    }
    Ok(d / heads)
}

/// Scaled dot-product attention for already-projected `q`, `k`, `v`, split
/// into `heads` column groups. Returns the concatenated head outputs and the
/// softmax weights laid out `[heads, T_q, T_k]`.
pub(crate) fn attention_core(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    tq: usize,
    tk: usize,
    d: usize,
    heads: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let dh = check_heads(d, heads)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; heads * tq * tk];
    let mut out = vec![0.0; tq * d];
    for h in 0..heads {
        let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
        let qh = View { data: q, offset: h * dh, row_stride: d, col_stride: 1 };
        let kt = View { data: k, offset: h * dh, row_stride: 1, col_stride: d };
        gemm(tq, dh, tk, scale, qh, kt, 0.0, p, 0, tk);
        softmax_rows(p, tk);
        let vh = View { data: v, offset: h * dh, row_stride: d, col_stride: 1 };
        gemm(tq, tk, dh, 1.0, View::rows(p, tk), vh, 0.0, &mut out, h * dh, d);
    }
    Ok((out, probs))
}

/// Multi-head attention over projected queries/keys/values followed by the
/// output projection `out_w` (`[d, d]`) and `out_b`.
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    out_w: &Tensor,
    out_b: &Tensor,
) -> Result<Tensor> {
    let (tq, d) = require_2d("attention", q)?;
    let (tk, dk) = require_2d("attention", k)?;
    if dk != d || v.shape() != k.shape() {
        return Err(Error::shape(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let (mixed, _) = attention_core(q.data(), k.data(), v.data(), tq, tk, d, heads)?;
    linear(&Tensor::new(&[tq, d], mixed)?, out_w, Some(out_b))
}

/// Softmax weights of [`attention`], `[heads, T_q, T_k]`.
pub fn attention_weights(q: &Tensor, k: &Tensor, heads: usize) -> Result<Tensor> {
    let (tq, d) = require_2d("attention", q)?;
    let (tk, _) = require_2d("attention", k)?;
    let zeros = vec![0.0; tk * d];
    let (_, probs) = attention_core(q.data(), k.data(), &zeros, tq, tk, d, heads)?;
    Tensor::new(&[heads, tq, tk], probs)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn require_chw(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    if t.ndim() != 3 {
        return Err(Error::shape(op, format!("expected C×H×W, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1], t.shape()[2]))
}

/// Unfolds `[C, H, W]` into `[C·k·k, H·W]` with zero padding `(k-1)/2`.
pub(crate) fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; c * k * k * hw];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &x[ci * hw + sy as usize * w..ci * hw + (sy as usize + 1) * w];
                    for xx in 0..w {
                        let sx = xx as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            dst[y * w + xx] = src[sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub(crate) fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut x = vec![0.0; c * hw];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            x[ci * hw + sy as usize * w + sx as usize] += src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn check_conv(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let (c_in, h, w) = require_chw("conv2d", input)?;
    if kernel.ndim() != 4 {
        return Err(Error::shape("conv2d", format!("kernel must be 4-d, got {:?}", kernel.shape())));
    }
    let ks = kernel.shape();
    let (c_out, kc, k) = (ks[0], ks[1], ks[2]);
    if ks[3] != k || k % 2 == 0 {
        return Err(Error::shape("conv2d", format!("kernel must be square and odd, got {ks:?}")));
    }
    if kc != c_in {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c_in} channels but kernel expects {kc}"),
        ));
    }
    if bias.len() != c_out {
        return Err(Error::shape("conv2d", format!("bias {:?} vs {c_out} output channels", bias.shape())));
    }
    Ok((c_in, h, w, c_out, k))
}

/// Same-size 2-D cross-correlation with per-channel bias.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c_in, h, w, c_out, k) = check_conv(input, kernel, bias)?;
    let hw = h * w;
    let cols = im2col(input.data(), c_in, h, w, k);
    let mut out = vec![0.0; c_out * hw];
    for (co, chunk) in out.chunks_mut(hw).enumerate() {
        chunk.fill(bias.data()[co]);
    }
    let ckk = c_in * k * k;
    gemm(c_out, ckk, hw, 1.0, View::rows(kernel.data(), ckk), View::rows(&cols, hw), 1.0, &mut out, 0, hw);
    Tensor::new(&[c_out, h, w], out)
}

/// 2×2 max-pooling with stride 2. Ties resolve to the first position in
/// row-major window order. Also returns the flat source index per output.
pub(crate) fn maxpool2(x: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    let mut arg = vec![0; c * oh * ow];
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = ci * h * w + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ci * h * w + (2 * y + dy) * w + 2 * xx + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                let o = (ci * oh + y) * ow + xx;
                out[o] = x[best];
                arg[o] = best;
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour 2× upsampling of `[C, H, W]`.
pub(crate) fn upsample2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out[(ci * oh + y) * ow + xx] = x[(ci * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// Splits `[C, H, W]` into a `[(H/ph)·(W/pw), C·ph·pw]` token matrix. Tokens
/// are ordered row-major over the patch grid; each token's features are
/// ordered channel, then row, then column within the patch.
pub(crate) fn patchify(x: &[f64], c: usize, h: usize, w: usize, ph: usize, pw: usize) -> Vec<f64> {
    let (gh, gw) = (h / ph, w / pw);
    let feat = c * ph * pw;
    let mut out = vec![0.0; gh * gw * feat];
    for gi in 0..gh {
        for gj in 0..gw {
            let t = gi * gw + gj;
            for ci in 0..c {
                for py in 0..ph {
                    let src = ci * h * w + (gi * ph + py) * w + gj * pw;
                    let dst = t * feat + (ci * ph + py) * pw;
                    out[dst..dst + pw].copy_from_slice(&x[src..src + pw]);
                }
            }
        }
    }
    out
}

/// Adjoint (and inverse) of [`patchify`].
pub(crate) fn unpatchify(tokens: &[f64], c: usize, h: usize, w: usize, ph: usize, pw: usize) -> Vec<f64> {
    let (gh, gw) = (h / ph, w / pw);
    let feat = c * ph * pw;
    let mut out = vec![0.0; c * h * w];
    for gi in 0..gh {
        for gj in 0..gw {
            let t = gi * gw + gj;
            for ci in 0..c {
                for py in 0..ph {
                    let dst = ci * h * w + (gi * ph + py) * w + gj * pw;
                    let src = t * feat + (ci * ph + py) * pw;
                    out[dst..dst + pw].copy_from_slice(&tokens[src..src + pw]);
                }
            }
        }
    }
    out
}

/// Replicates one value per patch over its `ph×pw` footprint, giving `[H, W]`.
pub(crate) fn spread_patches(values: &[f64], gh: usize, gw: usize, ph: usize, pw: usize) -> Vec<f64> {
    let (h, w) = (gh * ph, gw * pw);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = values[(y / ph) * gw + x / pw];
        }
    }
    out
}
