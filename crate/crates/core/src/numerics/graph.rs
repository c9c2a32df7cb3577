//! Tensor-level reverse-mode tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with
//! whatever the backward pass needs. Leaves registered from a
//! [`ParameterStore`] carry the entry's trainable flag; nodes that depend on no
//! trainable leaf are skipped during backpropagation, so gradients are never
//! produced for frozen tensors.

use indexmap::IndexMap;

use super::ops::{self, View};
use super::store::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    Conv2d { x: Var, k: Var, b: Var, cols: Vec<f64> },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Upsample2(Var),
    Concat(Var, Var),
    SliceRows { x: Var, start: usize },
    Patchify { x: Var, ph: usize, pw: usize },
    SpreadPatches { x: Var, grid: (usize, usize), patch: (usize, usize) },
    Sum(Var),
    MulConst(Var, Tensor),
    AddScalar(Var),
    Div(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Attention { .. } => "attention",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::Upsample2(_) => "upsample2",
            Op::Concat(..) => "concat",
            Op::SliceRows { .. } => "slice_rows",
            Op::Patchify { .. } => "patchify",
            Op::SpreadPatches { .. } => "spread_patches",
            Op::Sum(_) => "sum",
            Op::MulConst(..) => "mul_const",
            Op::AddScalar(_) => "add_scalar",
            Op::Div(..) => "div",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub loss: f64,
    pub grads: IndexMap<String, Tensor>,
}

impl GradientReport {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: IndexMap<String, (Var, bool)>,
    kinks: u64,
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: IndexMap::new(),
            kinks: FNV_OFFSET,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Hash of every piecewise-linear branch taken so far (ReLU signs and
    /// max-pool winners). Two evaluations with equal signatures lie on the
    /// same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        self.kinks
    }

    fn mix(&mut self, word: u64) {
        self.kinks = (self.kinks ^ word).wrapping_mul(FNV_PRIME);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} (node {})",
                op.name(),
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// Registers (once) the store entry `name` as a leaf.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&(v, _)) = self.params.get(name) {
            return Ok(v);
        }
        let entry = store.entry(name)?;
        let v = self.push(entry.value.clone(), Op::Leaf, entry.trainable)?;
        self.params.insert(name.to_string(), (v, entry.trainable));
        Ok(v)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Adds a `[d]` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let d = tx.last_dim();
        if tr.len() != d {
            return Err(Error::shape("add_row", format!("{:?} vs {:?}", tx.shape(), tr.shape())));
        }
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tr.data()[i % d])
            .collect();
        let out = Tensor::new(tx.shape(), data)?;
        let rg = self.rg(&[x, row]);
        self.push(out, Op::AddRow(x, row), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.last_dim();
        if tg.len() != d || tb.len() != d {
            return Err(Error::shape("layer_norm", format!("width {d} vs gamma {:?}", tg.shape())));
        }
        let (xhat, rstd) = ops::layer_norm_stats(tx.data(), d, eps);
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| v * tg.data()[i % d] + tb.data()[i % d])
            .collect();
        let out = Tensor::new(tx.shape(), data)?;
        let rg = self.rg(&[x, gamma, beta]);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(ops::gelu);
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let mut word = 0u64;
        let mut words = Vec::new();
        for (i, &v) in self.value(x).data().iter().enumerate() {
            word = (word << 1) | u64::from(v > 0.0);
            if i % 64 == 63 {
                words.push(word);
                word = 0;
            }
        }
        words.push(word);
        for w in words {
            self.mix(w);
        }
        let out = self.value(x).map(ops::relu);
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(ops::sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Multi-head scaled dot-product attention on projected `q`, `k`, `v`
    /// (no output projection).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.ndim() != 2 || tk.ndim() != 2 || tk.shape() != tv.shape() || tq.shape()[1] != tk.shape()[1] {
            return Err(Error::shape(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", tq.shape(), tk.shape(), tv.shape()),
            ));
        }
        let (nq, d) = (tq.shape()[0], tq.shape()[1]);
        let nk = tk.shape()[0];
        let (out, probs) = ops::attention_core(tq.data(), tk.data(), tv.data(), nq, nk, d, heads)?;
        let out = Tensor::new(&[nq, d], out)?;
        let rg = self.rg(&[q, k, v]);
        self.push(out, Op::Attention { q, k, v, heads, probs }, rg)
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let (tx, tk, tb) = (self.value(x), self.value(k), self.value(b));
        let (c_in, h, w, c_out, ks) = ops::check_conv(tx, tk, tb)?;
        let cols = ops::im2col(tx.data(), c_in, h, w, ks);
        let hw = h * w;
        let ckk = c_in * ks * ks;
        let mut out = vec![0.0; c_out * hw];
        for (co, chunk) in out.chunks_mut(hw).enumerate() {
            chunk.fill(tb.data()[co]);
        }
        ops::gemm(c_out, ckk, hw, 1.0, View::rows(tk.data(), ckk), View::rows(&cols, hw), 1.0, &mut out, 0, hw);
        let out = Tensor::new(&[c_out, h, w], out)?;
        let rg = self.rg(&[x, k, b]);
        let cols = if rg { cols } else { Vec::new() };
        self.push(out, Op::Conv2d { x, k, b, cols }, rg)
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (c, h, w) = chw("maxpool2", t)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("maxpool2", format!("odd spatial size {h}×{w}")));
        }
        let (out, argmax) = ops::maxpool2(t.data(), c, h, w);
        for &a in &argmax {
            self.mix(a as u64);
        }
        let out = Tensor::new(&[c, h / 2, w / 2], out)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::MaxPool2 { x, argmax }, rg)
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (c, h, w) = chw("upsample2", t)?;
        let out = Tensor::new(&[c, 2 * h, 2 * w], ops::upsample2(t.data(), c, h, w))?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Upsample2(x), rg)
    }

    /// Concatenation along the leading axis (channels of a `C×H×W` map, or
    /// rows of a token matrix).
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != tb.ndim() || ta.shape()[1..] != tb.shape()[1..] {
            return Err(Error::shape("concat", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let mut shape = ta.shape().to_vec();
        shape[0] += tb.shape()[0];
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Concat(a, b), rg)
    }

    /// Rows `start..` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize) -> Result<Var> {
        let t = self.value(x);
        if start >= t.shape()[0] {
            return Err(Error::shape("slice_rows", format!("start {start} of {:?}", t.shape())));
        }
        let row = t.len() / t.shape()[0];
        let mut shape = t.shape().to_vec();
        shape[0] -= start;
        let out = Tensor::new(&shape, t.data()[start * row..].to_vec())?;
        let rg = self.rg(&[x]);
        self.push(out, Op::SliceRows { x, start }, rg)
    }

    /// `C×H×W` image to a `[patches, C·ph·pw]` token matrix.
    pub fn patchify(&mut self, x: Var, ph: usize, pw: usize) -> Result<Var> {
        let t = self.value(x);
        let (c, h, w) = chw("patchify", t)?;
        if h % ph != 0 || w % pw != 0 {
            return Err(Error::shape("patchify", format!("{h}×{w} not divisible by {ph}×{pw}")));
        }
        let data = ops::patchify(t.data(), c, h, w, ph, pw);
        let out = Tensor::new(&[(h / ph) * (w / pw), c * ph * pw], data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Patchify { x, ph, pw }, rg)
    }

    /// One value per patch (`[gh·gw]` or `[gh·gw, 1]`) replicated to `[H, W]`.
    pub fn spread_patches(&mut self, x: Var, grid: (usize, usize), patch: (usize, usize)) -> Result<Var> {
        let t = self.value(x);
        if t.len() != grid.0 * grid.1 {
            return Err(Error::shape("spread_patches", format!("{:?} vs grid {grid:?}", t.shape())));
        }
        let data = ops::spread_patches(t.data(), grid.0, grid.1, patch.0, patch.1);
        let out = Tensor::new(&[grid.0 * patch.0, grid.1 * patch.1], data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::SpreadPatches { x, grid, patch }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let t = self.value(x);
        if t.shape() != c.shape() {
            return Err(Error::shape("mul_const", format!("{:?} vs {:?}", t.shape(), c.shape())));
        }
        let data = t.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let out = Tensor::new(t.shape(), data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::MulConst(x, c.clone()), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + s);
        let rg = self.rg(&[x]);
        self.push(out, Op::AddScalar(x), rg)
    }

    /// Quotient of two scalars.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != 1 || tb.len() != 1 {
            return Err(Error::shape("div", "operands must be scalars"));
        }
        let out = Tensor::scalar(ta.item() / tb.item());
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Div(a, b), rg)
    }

    /// Backpropagates from the scalar `loss` and returns gradients for every
    /// trainable parameter leaf that was registered.
    pub fn backward(&self, loss: Var) -> Result<GradientReport> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", lt.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if self.requires_grad(loss) {
            grads[loss.0] = Some(Tensor::new(lt.shape(), vec![1.0])?);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop(node, &dy, &mut grads);
        }
        let mut out = IndexMap::new();
        for (name, &(v, trainable)) in &self.params {
            if trainable {
                let g = grads
                    .get_mut(v.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
                out.insert(name.clone(), g);
            }
        }
        Ok(GradientReport {
            loss: lt.item(),
            grads: out,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.requires_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.value(v).shape(), data).expect("gradient shape")
    }

    fn backprop(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let dyd = dy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (out_dim, in_dim) = (tw.shape()[0], tw.shape()[1]);
                let rows = tx.rows();
                if self.requires_grad(*x) {
                    let dx = ops::matmul(dyd, tw.data(), rows, out_dim, in_dim);
                    self.accumulate(grads, *x, self.like(*x, dx));
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![0.0; out_dim * in_dim];
                    ops::gemm(
                        out_dim,
                        rows,
                        in_dim,
                        1.0,
                        View::transposed(dyd, out_dim),
                        View::rows(tx.data(), in_dim),
                        0.0,
                        &mut dw,
                        0,
                        in_dim,
                    );
                    self.accumulate(grads, *w, self.like(*w, dw));
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let mut db = vec![0.0; out_dim];
                        for row in dyd.chunks(out_dim) {
                            for (a, g) in db.iter_mut().zip(row) {
                                *a += g;
                            }
                        }
                        self.accumulate(grads, *b, self.like(*b, db));
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let da = dyd.iter().zip(tb).map(|(g, v)| g * v).collect();
                let db = dyd.iter().zip(ta).map(|(g, v)| g * v).collect();
                self.accumulate(grads, *a, self.like(*a, da));
                self.accumulate(grads, *b, self.like(*b, db));
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, dy.clone());
                if self.requires_grad(*row) {
                    let d = dy.last_dim();
                    let mut dr = vec![0.0; d];
                    for r in dyd.chunks(d) {
                        for (a, g) in dr.iter_mut().zip(r) {
                            *a += g;
                        }
                    }
                    self.accumulate(grads, *row, self.like(*row, dr));
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, dy.map(|g| g * s)),
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = dy.last_dim();
                let tg = self.value(*gamma).data();
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (r, row) in dyd.chunks(d).enumerate() {
                        for j in 0..d {
                            dg[j] += row[j] * xhat[r * d + j];
                            db[j] += row[j];
                        }
                    }
                    self.accumulate(grads, *gamma, self.like(*gamma, dg));
                    self.accumulate(grads, *beta, self.like(*beta, db));
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; dyd.len()];
                    for (r, row) in dyd.chunks(d).enumerate() {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_g = 0.0;
                        let mut mean_gx = 0.0;
                        for j in 0..d {
                            let g = row[j] * tg[j];
                            mean_g += g;
                            mean_gx += g * xh[j];
                        }
                        mean_g /= d as f64;
                        mean_gx /= d as f64;
                        for j in 0..d {
                            let g = row[j] * tg[j];
                            dx[r * d + j] = rstd[r] * (g - mean_g - xh[j] * mean_gx);
                        }
                    }
                    self.accumulate(grads, *x, self.like(*x, dx));
                }
            }
            Op::Gelu(x) => {
                let tx = self.value(*x).data();
                let dx = dyd.iter().zip(tx).map(|(g, &v)| g * ops::gelu_grad(v)).collect();
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Relu(x) => {
                let tx = self.value(*x).data();
                let dx = dyd
                    .iter()
                    .zip(tx)
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Sigmoid(x) => {
                let s = node.value.data();
                let dx = dyd.iter().zip(s).map(|(g, s)| g * s * (1.0 - s)).collect();
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(dy, *q, *k, *v, *heads, probs, grads);
            }
            Op::Conv2d { x, k, b, cols } => {
                let tk = self.value(*k);
                let ks = tk.shape();
                let (c_out, c_in, kk) = (ks[0], ks[1], ks[2]);
                let (h, w) = (dy.shape()[1], dy.shape()[2]);
                let hw = h * w;
                let ckk = c_in * kk * kk;
                if self.requires_grad(*b) {
                    let db = dyd.chunks(hw).map(|c| c.iter().sum()).collect();
                    self.accumulate(grads, *b, self.like(*b, db));
                }
                if self.requires_grad(*k) {
                    let mut dk = vec![0.0; c_out * ckk];
                    ops::gemm(c_out, hw, ckk, 1.0, View::rows(dyd, hw), View::transposed(cols, hw), 0.0, &mut dk, 0, ckk);
                    self.accumulate(grads, *k, self.like(*k, dk));
                }
                if self.requires_grad(*x) {
                    let mut dcols = vec![0.0; ckk * hw];
                    ops::gemm(ckk, c_out, hw, 1.0, View::transposed(tk.data(), ckk), View::rows(dyd, hw), 0.0, &mut dcols, 0, hw);
                    let dx = ops::col2im(&dcols, c_in, h, w, kk);
                    self.accumulate(grads, *x, self.like(*x, dx));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (g, &a) in dyd.iter().zip(argmax) {
                    dx[a] += g;
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Upsample2(x) => {
                let s = self.value(*x).shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; c * h * w];
                let ow = 2 * w;
                for ci in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..ow {
                            dx[(ci * h + y / 2) * w + xx / 2] += dyd[(ci * 2 * h + y) * ow + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).len();
                self.accumulate(grads, *a, self.like(*a, dyd[..na].to_vec()));
                self.accumulate(grads, *b, self.like(*b, dyd[na..].to_vec()));
            }
            Op::SliceRows { x, start } => {
                let tx = self.value(*x);
                let row = tx.len() / tx.shape()[0];
                let mut dx = vec![0.0; tx.len()];
                dx[start * row..].copy_from_slice(dyd);
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Patchify { x, ph, pw } => {
                let s = self.value(*x).shape();
                let dx = ops::unpatchify(dyd, s[0], s[1], s[2], *ph, *pw);
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::SpreadPatches { x, grid, patch } => {
                let w = grid.1 * patch.1;
                let mut dx = vec![0.0; grid.0 * grid.1];
                for (i, g) in dyd.iter().enumerate() {
                    let (y, xx) = (i / w, i % w);
                    dx[(y / patch.0) * grid.1 + xx / patch.1] += g;
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Sum(x) => {
                let g = dyd[0];
                let n = self.value(*x).len();
                self.accumulate(grads, *x, self.like(*x, vec![g; n]));
            }
            Op::MulConst(x, c) => {
                let dx = dyd.iter().zip(c.data()).map(|(g, c)| g * c).collect();
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, dy.clone()),
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).item(), self.value(*b).item());
                let g = dyd[0];
                self.accumulate(grads, *a, Tensor::scalar(g / vb));
                self.accumulate(grads, *b, Tensor::scalar(-g * va / (vb * vb)));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        dy: &Tensor,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = (tq.shape()[0], tq.shape()[1]);
        let nk = tk.shape()[0];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let need_qk = self.requires_grad(q) || self.requires_grad(k);
        let mut dq = vec![0.0; nq * d];
        let mut dk = vec![0.0; nk * d];
        let mut dv = vec![0.0; nk * d];
        let mut dp = vec![0.0; nq * nk];
        let dyd = dy.data();
        for h in 0..heads {
            let p = &probs[h * nq * nk..(h + 1) * nq * nk];
            let dyh = View { data: dyd, offset: h * dh, row_stride: d, col_stride: 1 };
            if self.requires_grad(v) {
                // dV_h = Pᵀ · dY_h
                ops::gemm(nk, nq, dh, 1.0, View::transposed(p, nk), dyh, 0.0, &mut dv, h * dh, d);
            }
            if !need_qk {
                continue;
            }
            // dP = dY_h · V_hᵀ
            let vt = View { data: tv.data(), offset: h * dh, row_stride: 1, col_stride: d };
            ops::gemm(nq, dh, nk, 1.0, dyh, vt, 0.0, &mut dp, 0, nk);
            for r in 0..nq {
                let pr = &p[r * nk..(r + 1) * nk];
                let dr = &mut dp[r * nk..(r + 1) * nk];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (g, &pv) in dr.iter_mut().zip(pr) {
                    *g = pv * (*g - dot);
                }
            }
            if self.requires_grad(q) {
                let kh = View { data: tk.data(), offset: h * dh, row_stride: d, col_stride: 1 };
                ops::gemm(nq, nk, dh, scale, View::rows(&dp, nk), kh, 0.0, &mut dq, h * dh, d);
            }
            if self.requires_grad(k) {
                let qh = View { data: tq.data(), offset: h * dh, row_stride: d, col_stride: 1 };
                ops::gemm(nk, nq, dh, scale, View::transposed(&dp, nk), qh, 0.0, &mut dk, h * dh, d);
            }
        }
        if self.requires_grad(q) {
            self.accumulate(grads, q, self.like(q, dq));
        }
        if self.requires_grad(k) {
            self.accumulate(grads, k, self.like(k, dk));
        }
        if self.requires_grad(v) {
            self.accumulate(grads, v, self.like(v, dv));
        }
    }
}

fn chw(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    if t.ndim() != 3 {
        return Err(Error::shape(op, format!("expected C×H×W, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1], t.shape()[2]))
}

/// Builds the loss with `build` and returns gradients for every trainable
/// entry of `stores` (zero for entries the loss never touched), in store
/// order.
pub fn grad<F>(stores: &[&ParameterStore], build: F) -> Result<GradientReport>
where
    F: FnOnce(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g)?;
    let mut report = g.backward(loss)?;
    let mut ordered = IndexMap::new();
    for store in stores {
        for (name, e) in store.iter() {
            if e.trainable {
                let t = report
                    .grads
                    .swap_remove(name)
                    .unwrap_or_else(|| Tensor::zeros(e.value.shape()));
                ordered.insert(name.to_string(), t);
            }
        }
    }
    report.grads = ordered;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor, trainable: bool) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert(name, t, trainable).unwrap();
        s
    }

    #[test]
    fn quadratic_gradient_is_twice_w() {
        let w = Tensor::new(&[3], vec![1.5, -2.0, 0.25]).unwrap();
        let s = store_with("w", w.clone(), true);
        let report = grad(&[&s], |g| {
            let v = g.param(&s, "w")?;
            let v2 = g.param(&s, "w")?;
            assert_eq!(v, v2);
            let sq = g.mul(v, v2)?;
            g.sum(sq)
        })
        .unwrap();
        assert_eq!(report.loss, 1.5 * 1.5 + 4.0 + 0.0625);
        assert_eq!(report.get("w").unwrap().data(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn independent_loss_gives_zero_gradient() {
        let s = store_with("w", Tensor::full(&[2, 2], 3.0), true);
        let report = grad(&[&s], |g| {
            let c = g.constant(Tensor::full(&[4], 1.0))?;
            g.sum(c)
        })
        .unwrap();
        assert!(report.get("w").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frozen_parameters_receive_no_gradient() {
        let mut s = store_with("frozen", Tensor::full(&[2], 1.0), false);
        s.insert("live", Tensor::full(&[2], 2.0), true).unwrap();
        let report = grad(&[&s], |g| {
            let a = g.param(&s, "frozen")?;
            let b = g.param(&s, "live")?;
            let c = g.add(a, b)?;
            g.sum(c)
        })
        .unwrap();
        assert!(report.get("frozen").is_none());
        assert_eq!(report.get("live").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_finite_intermediate_is_named() {
        let s = store_with("w", Tensor::scalar(0.0), true);
        let err = grad(&[&s], |g| {
            let w = g.param(&s, "w")?;
            let z = g.param(&s, "w")?;
            g.div(w, z)
        })
        .unwrap_err();
        assert!(err.to_string().contains("div"), "{err}");
    }
}
