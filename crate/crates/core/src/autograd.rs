//! Tape-based reverse-mode differentiation over the tensor operation set.
//!
//! A [`Tape`] is an append-only execution trace: every operation pushes a
//! node holding its output value and the ids of its inputs, so nodes are
//! topologically ordered by construction and cycles cannot occur.
//! [`Tape::backward`] walks the trace in reverse, accumulating
//! vector-Jacobian products.
//!
//! Subgradient conventions: `relu` and `abs` use 0 at the kink; max-pool
//! windows with tied maxima propagate no gradient. Tests sample away from
//! kinks.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{
    self, BorderMode, PaddingMode, Tensor, LAYER_NORM_EPS,
};

pub type ValueId = usize;

/// Denominators below this threshold take the symmetric 0.5 fallback in
/// [`Tape::safe_div`] and contribute no gradient there.
pub const SAFE_DIV_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Div(ValueId, ValueId),
    SafeDiv(ValueId, ValueId),
    Scale(ValueId, f64),
    // the added constant is not needed for the backward pass
    AddScalar(ValueId),
    Relu(ValueId),
    Sigmoid(ValueId),
    Abs(ValueId),
    MatMul(ValueId, ValueId),
    Transpose(ValueId),
    SoftmaxRows(ValueId),
    LayerNorm {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
    },
    AddRow {
        x: ValueId,
        row: ValueId,
    },
    SliceCols {
        x: ValueId,
        start: usize,
        len: usize,
    },
    PadReflect {
        x: ValueId,
        pad: usize,
    },
    ConvValid {
        x: ValueId,
        w: ValueId,
        b: ValueId,
        stride: usize,
    },
    FilterFixed {
        x: ValueId,
        kernel: Vec<f64>,
        k: usize,
        border: BorderMode,
    },
    MaxPool2(ValueId),
    Upsample2(ValueId),
    CyclicShift {
        x: ValueId,
        dy: i64,
        dx: i64,
    },
    ConcatC(Vec<ValueId>),
    TokensFromMap(ValueId),
    MapFromTokens {
        x: ValueId,
        h: usize,
        w: usize,
    },
    Sum(ValueId),
    Mean(ValueId),
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// Execution trace for one forward pass. Values are computed eagerly as
/// operations are recorded.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: ValueId) -> Result<f64> {
        self.nodes[id].value.scalar_value()
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> ValueId {
        self.nodes.push(Node { value, needs_grad, op });
        self.nodes.len() - 1
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Record an input tensor. `needs_grad` marks trainable leaves.
    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> ValueId {
        self.push(value, needs_grad, Op::Leaf)
    }

    /// Record a constant input (no gradient flows into it).
    pub fn constant(&mut self, value: Tensor) -> ValueId {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, self.needs(a) || self.needs(b), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, self.needs(a) || self.needs(b), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, self.needs(a) || self.needs(b), Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        Ok(self.push(v, self.needs(a) || self.needs(b), Op::Div(a, b)))
    }

    /// Elementwise `a / b` with a 0.5 fallback where `|b| < SAFE_DIV_EPS`.
    pub fn safe_div(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| {
            if y.abs() < SAFE_DIV_EPS {
                0.5
            } else {
                x / y
            }
        })?;
        Ok(self.push(v, self.needs(a) || self.needs(b), Op::SafeDiv(a, b)))
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> ValueId {
        let v = self.value(x).map(|v| v * c);
        self.push(v, self.needs(x), Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: ValueId, c: f64) -> ValueId {
        let v = self.value(x).map(|v| v + c);
        self.push(v, self.needs(x), Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let v = tensor::relu(self.value(x));
        self.push(v, self.needs(x), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let v = tensor::sigmoid(self.value(x));
        self.push(v, self.needs(x), Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: ValueId) -> ValueId {
        let v = self.value(x).map(f64::abs);
        self.push(v, self.needs(x), Op::Abs(x))
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, self.needs(a) || self.needs(b), Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: ValueId) -> Result<ValueId> {
        let v = tensor::transpose(self.value(x))?;
        Ok(self.push(v, self.needs(x), Op::Transpose(x)))
    }

    pub fn softmax_rows(&mut self, x: ValueId) -> Result<ValueId> {
        let v = tensor::rowwise_softmax(self.value(x))?;
        Ok(self.push(v, self.needs(x), Op::SoftmaxRows(x)))
    }

    pub fn layer_norm(&mut self, x: ValueId, gamma: ValueId, beta: ValueId) -> Result<ValueId> {
        let v = tensor::layer_norm(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
        )?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(v, needs, Op::LayerNorm { x, gamma, beta }))
    }

    /// Broadcast-add a `[M]` row vector onto each row of an `[N, M]` matrix.
    pub fn add_row(&mut self, x: ValueId, row: ValueId) -> Result<ValueId> {
        let (n, m) = self.value(x).dims2()?;
        let r = self.value(row);
        if r.shape() != [m] {
            return Err(Error::shape(format!(
                "add_row: row shape {:?} vs matrix cols {m}",
                r.shape()
            )));
        }
        let xd = self.value(x).data();
        let rd = r.data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = xd[i * m + j] + rd[j];
            }
        }
        let v = Tensor::new_unchecked(vec![n, m], out);
        let needs = self.needs(x) || self.needs(row);
        Ok(self.push(v, needs, Op::AddRow { x, row }))
    }

    /// Take columns `start..start+len` of an `[N, M]` matrix.
    pub fn slice_cols(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let (n, m) = self.value(x).dims2()?;
        if start + len > m {
            return Err(Error::shape(format!(
                "slice_cols {start}..{} out of {m}",
                start + len
            )));
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * len];
        for i in 0..n {
            out[i * len..(i + 1) * len]
                .copy_from_slice(&xd[i * m + start..i * m + start + len]);
        }
        let v = Tensor::new_unchecked(vec![n, len], out);
        Ok(self.push(v, self.needs(x), Op::SliceCols { x, start, len }))
    }

    pub fn pad_reflect(&mut self, x: ValueId, pad: usize) -> Result<ValueId> {
        let v = tensor::pad_reflect(self.value(x), pad)?;
        Ok(self.push(v, self.needs(x), Op::PadReflect { x, pad }))
    }

    /// Convolution with weights `[OUT, IN, KH, KW]` and bias `[OUT]`.
    /// `Same` padding reflect-pads first, then runs the valid kernel.
    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: ValueId,
        stride: usize,
        padding: PaddingMode,
    ) -> Result<ValueId> {
        let src = match padding {
            PaddingMode::Valid => x,
            PaddingMode::Same => {
                let (_, _, kh, kw) = self.value(w).dims4()?;
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::argument(
                        "same-padding convolution requires odd kernel dims",
                    ));
                }
                self.pad_reflect(x, (kh - 1) / 2)?
            }
        };
        let v = tensor::conv2d_valid(
            self.value(src),
            self.value(w),
            self.value(b).data(),
            stride,
        )?;
        let needs = self.needs(src) || self.needs(w) || self.needs(b);
        Ok(self.push(v, needs, Op::ConvValid { x: src, w, b, stride }))
    }

    /// Depthwise correlation with a constant kernel (no gradient into the
    /// kernel); used for mean filters and the SSIM window.
    pub fn filter_fixed(
        &mut self,
        x: ValueId,
        kernel: Vec<f64>,
        k: usize,
        border: BorderMode,
    ) -> Result<ValueId> {
        let v = tensor::filter2d(self.value(x), &kernel, k, border)?;
        Ok(self.push(v, self.needs(x), Op::FilterFixed { x, kernel, k, border }))
    }

    pub fn maxpool2(&mut self, x: ValueId) -> Result<ValueId> {
        let v = tensor::maxpool2(self.value(x))?;
        Ok(self.push(v, self.needs(x), Op::MaxPool2(x)))
    }

    pub fn upsample2(&mut self, x: ValueId) -> Result<ValueId> {
        let v = tensor::upsample2(self.value(x))?;
        Ok(self.push(v, self.needs(x), Op::Upsample2(x)))
    }

    pub fn cyclic_shift(&mut self, x: ValueId, dy: i64, dx: i64) -> Result<ValueId> {
        let v = tensor::cyclic_shift(self.value(x), dy, dx)?;
        Ok(self.push(v, self.needs(x), Op::CyclicShift { x, dy, dx }))
    }

    /// Concatenate `[C_i, H, W]` maps along the channel axis.
    pub fn concat_channels(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::argument("concat of zero maps"));
        }
        let (_, h, w) = self.value(parts[0]).dims3()?;
        let mut total = 0usize;
        for &p in parts {
            let (c, ph, pw) = self.value(p).dims3()?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape("concat_channels: spatial dims differ"));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(total * h * w);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new_unchecked(vec![total, h, w], out);
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(v, needs, Op::ConcatC(parts.to_vec())))
    }

    pub fn tokens_from_map(&mut self, x: ValueId) -> Result<ValueId> {
        let v = tensor::tokens_from_map(self.value(x))?;
        Ok(self.push(v, self.needs(x), Op::TokensFromMap(x)))
    }

    pub fn map_from_tokens(&mut self, x: ValueId, h: usize, w: usize) -> Result<ValueId> {
        let v = tensor::map_from_tokens(self.value(x), h, w)?;
        Ok(self.push(v, self.needs(x), Op::MapFromTokens { x, h, w }))
    }

    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let v = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(v, self.needs(x), Op::Sum(x))
    }

    pub fn mean(&mut self, x: ValueId) -> ValueId {
        let n = self.value(x).numel() as f64;
        let v = Tensor::scalar(self.value(x).data().iter().sum::<f64>() / n);
        self.push(v, self.needs(x), Op::Mean(x))
    }

    /// Mean squared difference of two same-shape values.
    pub fn mse(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse pass from a scalar loss node. Returns one gradient slot per
    /// node; slots that need no gradient stay `None`.
    pub fn backward(&self, loss: ValueId) -> Result<Grads> {
        if loss >= self.nodes.len() {
            return Err(Error::Internal(format!("backward: unknown node {loss}")));
        }
        if !self.nodes[loss].value.is_scalar() {
            return Err(Error::argument(format!(
                "backward requires a scalar loss node, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let out = grads
            .into_iter()
            .enumerate()
            .map(|(id, slot)| {
                slot.map(|g| Tensor::new_unchecked(self.nodes[id].value.shape().to_vec(), g))
            })
            .collect();
        Ok(Grads { grads: out })
    }

    fn propagate(&self, id: ValueId, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        // Accumulation helper: materialize the input slot lazily.
        macro_rules! acc {
            ($input:expr, $body:expr) => {{
                let inp: ValueId = $input;
                if self.nodes[inp].needs_grad {
                    let numel = self.nodes[inp].value.numel();
                    let slot = grads[inp].get_or_insert_with(|| vec![0.0; numel]);
                    #[allow(clippy::redundant_closure_call)]
                    ($body)(slot.as_mut_slice());
                }
            }};
        }

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(*a, |d: &mut [f64]| for (dv, gv) in d.iter_mut().zip(g) { *dv += gv });
                acc!(*b, |d: &mut [f64]| for (dv, gv) in d.iter_mut().zip(g) { *dv += gv });
            }
            Op::Sub(a, b) => {
                acc!(*a, |d: &mut [f64]| for (dv, gv) in d.iter_mut().zip(g) { *dv += gv });
                acc!(*b, |d: &mut [f64]| for (dv, gv) in d.iter_mut().zip(g) { *dv -= gv });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                acc!(*a, |d: &mut [f64]| for i in 0..d.len() { d[i] += g[i] * bv[i] });
                acc!(*b, |d: &mut [f64]| for i in 0..d.len() { d[i] += g[i] * av[i] });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                acc!(*a, |d: &mut [f64]| for i in 0..d.len() { d[i] += g[i] / bv[i] });
                acc!(*b, |d: &mut [f64]| for i in 0..d.len() {
                    d[i] -= g[i] * av[i] / (bv[i] * bv[i])
                });
            }
            Op::SafeDiv(a, b) => {
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                acc!(*a, |d: &mut [f64]| for i in 0..d.len() {
                    if bv[i].abs() >= SAFE_DIV_EPS {
                        d[i] += g[i] / bv[i];
                    }
                });
                acc!(*b, |d: &mut [f64]| for i in 0..d.len() {
                    if bv[i].abs() >= SAFE_DIV_EPS {
                        d[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                acc!(*x, |d: &mut [f64]| for i in 0..d.len() { d[i] += c * g[i] });
            }
            Op::AddScalar(x) => {
                acc!(*x, |d: &mut [f64]| for i in 0..d.len() { d[i] += g[i] });
            }
            Op::Relu(x) => {
                let xv = self.nodes[*x].value.data();
                acc!(*x, |d: &mut [f64]| for i in 0..d.len() {
                    if xv[i] > 0.0 {
                        d[i] += g[i];
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = self.nodes[id].value.data();
                acc!(*x, |d: &mut [f64]| for i in 0..d.len() {
                    d[i] += g[i] * yv[i] * (1.0 - yv[i]);
                });
            }
            Op::Abs(x) => {
                let xv = self.nodes[*x].value.data();
                acc!(*x, |d: &mut [f64]| for i in 0..d.len() {
                    d[i] += g[i] * if xv[i] > 0.0 { 1.0 } else if xv[i] < 0.0 { -1.0 } else { 0.0 };
                });
            }
            Op::MatMul(a, b) => {
                let (n, k) = self.nodes[*a].value.dims2().unwrap();
                let (_, m) = self.nodes[*b].value.dims2().unwrap();
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                // dA = g . B^T
                acc!(*a, |d: &mut [f64]| for i in 0..n {
                    for j in 0..m {
                        let gv = g[i * m + j];
                        if gv == 0.0 { continue; }
                        for kk in 0..k {
                            d[i * k + kk] += gv * bv[kk * m + j];
                        }
                    }
                });
                // dB = A^T . g
                acc!(*b, |d: &mut [f64]| for i in 0..n {
                    for kk in 0..k {
                        let avv = av[i * k + kk];
                        if avv == 0.0 { continue; }
                        for j in 0..m {
                            d[kk * m + j] += avv * g[i * m + j];
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = self.nodes[*x].value.dims2().unwrap();
                acc!(*x, |d: &mut [f64]| for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] += g[j * r + i];
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let (r, c) = self.nodes[id].value.dims2().unwrap();
                let yv = self.nodes[id].value.data();
                acc!(*x, |d: &mut [f64]| for i in 0..r {
                    let dot: f64 = (0..c).map(|j| g[i * c + j] * yv[i * c + j]).sum();
                    for j in 0..c {
                        d[i * c + j] += yv[i * c + j] * (g[i * c + j] - dot);
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (n, dim) = self.nodes[*x].value.dims2().unwrap();
                let xv = self.nodes[*x].value.data();
                let gv = self.nodes[*gamma].value.data();
                let df = dim as f64;
                // Recompute per-row statistics (cheaper than saving them).
                let mut stats = Vec::with_capacity(n);
                for i in 0..n {
                    let row = &xv[i * dim..(i + 1) * dim];
                    let mean = row.iter().sum::<f64>() / df;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / df;
                    stats.push((mean, 1.0 / (var + LAYER_NORM_EPS).sqrt()));
                }
                acc!(*gamma, |d: &mut [f64]| for i in 0..n {
                    let (mean, inv) = stats[i];
                    for j in 0..dim {
                        d[j] += g[i * dim + j] * (xv[i * dim + j] - mean) * inv;
                    }
                });
                acc!(*beta, |d: &mut [f64]| for i in 0..n {
                    for j in 0..dim {
                        d[j] += g[i * dim + j];
                    }
                });
                acc!(*x, |d: &mut [f64]| for i in 0..n {
                    let (mean, inv) = stats[i];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..dim {
                        let xhat = (xv[i * dim + j] - mean) * inv;
                        let dxhat = g[i * dim + j] * gv[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    for j in 0..dim {
                        let xhat = (xv[i * dim + j] - mean) * inv;
                        let dxhat = g[i * dim + j] * gv[j];
                        d[i * dim + j] +=
                            inv * (dxhat - sum_dxhat / df - xhat * sum_dxhat_xhat / df);
                    }
                });
            }
            Op::AddRow { x, row } => {
                let (n, m) = self.nodes[*x].value.dims2().unwrap();
                acc!(*x, |d: &mut [f64]| for i in 0..d.len() { d[i] += g[i] });
                acc!(*row, |d: &mut [f64]| for i in 0..n {
                    for j in 0..m {
                        d[j] += g[i * m + j];
                    }
                });
            }
            Op::SliceCols { x, start, len } => {
                let (n, m) = self.nodes[*x].value.dims2().unwrap();
                let (start, len) = (*start, *len);
                acc!(*x, |d: &mut [f64]| for i in 0..n {
                    for j in 0..len {
                        d[i * m + start + j] += g[i * len + j];
                    }
                });
            }
            Op::PadReflect { x, pad } => {
                let (c, h, w) = self.nodes[*x].value.dims3().unwrap();
                let pad = *pad;
                let (oh, ow) = (h + 2 * pad, w + 2 * pad);
                acc!(*x, |d: &mut [f64]| for ch in 0..c {
                    for y in 0..oh {
                        let sy = tensor::reflect_index(y as isize - pad as isize, h);
                        for xx in 0..ow {
                            let sx = tensor::reflect_index(xx as isize - pad as isize, w);
                            d[(ch * h + sy) * w + sx] += g[(ch * oh + y) * ow + xx];
                        }
                    }
                });
            }
            Op::ConvValid { x, w, b, stride } => {
                let (in_ch, h, wd) = self.nodes[*x].value.dims3().unwrap();
                let (out_ch, _, kh, kw) = self.nodes[*w].value.dims4().unwrap();
                let (_, oh, ow) = self.nodes[id].value.dims3().unwrap();
                let s = *stride;
                let xv = self.nodes[*x].value.data();
                let wv = self.nodes[*w].value.data();
                acc!(*b, |d: &mut [f64]| for oc in 0..out_ch {
                    let mut acc = 0.0;
                    for p in 0..oh * ow {
                        acc += g[oc * oh * ow + p];
                    }
                    d[oc] += acc;
                });
                acc!(*w, |d: &mut [f64]| for oc in 0..out_ch {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[(oc * oh + oy) * ow + ox];
                            if gv == 0.0 { continue; }
                            for ic in 0..in_ch {
                                for ky in 0..kh {
                                    let iy = oy * s + ky;
                                    for kx in 0..kw {
                                        d[((oc * in_ch + ic) * kh + ky) * kw + kx] +=
                                            gv * xv[(ic * h + iy) * wd + ox * s + kx];
                                    }
                                }
                            }
                        }
                    }
                });
                acc!(*x, |d: &mut [f64]| for oc in 0..out_ch {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[(oc * oh + oy) * ow + ox];
                            if gv == 0.0 { continue; }
                            for ic in 0..in_ch {
                                for ky in 0..kh {
                                    let iy = oy * s + ky;
                                    for kx in 0..kw {
                                        d[(ic * h + iy) * wd + ox * s + kx] +=
                                            gv * wv[((oc * in_ch + ic) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::FilterFixed { x, kernel, k, border } => {
                let (c, h, w) = self.nodes[*x].value.dims3().unwrap();
                let p = (*k / 2) as isize;
                let k = *k;
                let border = *border;
                acc!(*x, |d: &mut [f64]| for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let gv = g[(ch * h + y) * w + xx];
                            if gv == 0.0 { continue; }
                            for ky in 0..k {
                                let ry = y as isize + ky as isize - p;
                                let sy = match border {
                                    BorderMode::Reflect => tensor::reflect_index(ry, h),
                                    BorderMode::Periodic => tensor::wrap_index(ry, h),
                                };
                                for kx in 0..k {
                                    let rx = xx as isize + kx as isize - p;
                                    let sx = match border {
                                        BorderMode::Reflect => tensor::reflect_index(rx, w),
                                        BorderMode::Periodic => tensor::wrap_index(rx, w),
                                    };
                                    d[(ch * h + sy) * w + sx] += gv * kernel[ky * k + kx];
                                }
                            }
                        }
                    }
                });
            }
            Op::MaxPool2(x) => {
                let (c, h, w) = self.nodes[*x].value.dims3().unwrap();
                let (oh, ow) = (h / 2, w / 2);
                let xv = self.nodes[*x].value.data();
                // Route to the unique window maximum; ties propagate nothing.
                acc!(*x, |d: &mut [f64]| for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[(ch * oh + oy) * ow + ox];
                            if gv == 0.0 { continue; }
                            let base = (ch * h + oy * 2) * w + ox * 2;
                            let idx = [base, base + 1, base + w, base + w + 1];
                            let m = idx.iter().map(|&i| xv[i]).fold(f64::NEG_INFINITY, f64::max);
                            let winners: Vec<usize> =
                                idx.iter().cloned().filter(|&i| xv[i] == m).collect();
                            if winners.len() == 1 {
                                d[winners[0]] += gv;
                            }
                        }
                    }
                });
            }
            Op::Upsample2(x) => {
                let (c, h, w) = self.nodes[*x].value.dims3().unwrap();
                let (oh, ow) = (h * 2, w * 2);
                acc!(*x, |d: &mut [f64]| for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            d[(ch * h + y / 2) * w + xx / 2] += g[(ch * oh + y) * ow + xx];
                        }
                    }
                });
            }
            Op::CyclicShift { x, dy, dx } => {
                let (c, h, w) = self.nodes[*x].value.dims3().unwrap();
                let (dy, dx) = (*dy, *dx);
                acc!(*x, |d: &mut [f64]| for ch in 0..c {
                    for y in 0..h {
                        let sy = tensor::wrap_index(y as isize - dy as isize, h);
                        for xx in 0..w {
                            let sx = tensor::wrap_index(xx as isize - dx as isize, w);
                            d[(ch * h + sy) * w + sx] += g[(ch * h + y) * w + xx];
                        }
                    }
                });
            }
            Op::ConcatC(parts) => {
                let mut offset = 0usize;
                for &p in parts {
                    let numel = self.nodes[p].value.numel();
                    acc!(p, |d: &mut [f64]| for i in 0..numel {
                        d[i] += g[offset + i];
                    });
                    offset += numel;
                }
            }
            Op::TokensFromMap(x) => {
                let (c, h, w) = self.nodes[*x].value.dims3().unwrap();
                let n = h * w;
                acc!(*x, |d: &mut [f64]| for ch in 0..c {
                    for p in 0..n {
                        d[ch * n + p] += g[p * c + ch];
                    }
                });
            }
            Op::MapFromTokens { x, h, w } => {
                let (n, c) = self.nodes[*x].value.dims2().unwrap();
                debug_assert_eq!(n, h * w);
                acc!(*x, |d: &mut [f64]| for ch in 0..c {
                    for p in 0..n {
                        d[p * c + ch] += g[ch * n + p];
                    }
                });
            }
            Op::Sum(x) => {
                acc!(*x, |d: &mut [f64]| for dv in d.iter_mut() { *dv += g[0] });
            }
            Op::Mean(x) => {
                let n = self.nodes[*x].value.numel() as f64;
                acc!(*x, |d: &mut [f64]| for dv in d.iter_mut() { *dv += g[0] / n });
            }
        }
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: ValueId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

/// Map from parameter names to the tape leaves holding their values.
pub struct ParamBinding {
    ids: BTreeMap<String, ValueId>,
}

impl ParamBinding {
    pub fn get(&self, name: &str) -> Result<ValueId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Internal(format!("unbound parameter `{name}`")))
    }

    pub fn ids(&self) -> &BTreeMap<String, ValueId> {
        &self.ids
    }
}

/// Record every parameter of `store` as a tape leaf (trainable entries
/// request gradients).
pub fn bind_params(tape: &mut Tape, store: &ParamStore) -> ParamBinding {
    let mut ids = BTreeMap::new();
    for (name, entry) in store.iter() {
        let id = tape.leaf(entry.value.clone(), entry.trainable);
        ids.insert(name.clone(), id);
    }
    ParamBinding { ids }
}

/// Run backward from `loss` and accumulate gradients into the store.
/// Trainable parameters not reached by the trace are left untouched
/// (their gradient stays whatever it was, zero after `zero_grads`).
pub fn backward_into(
    tape: &Tape,
    loss: ValueId,
    binding: &ParamBinding,
    store: &mut ParamStore,
) -> Result<()> {
    let grads = tape.backward(loss)?;
    for (name, &id) in binding.ids() {
        if let Some(g) = grads.get(id) {
            store.accumulate_grad(name, g)?;
        }
    }
    Ok(())
}

/// One parameter tensor's worst finite-difference discrepancy.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub samples: usize,
}

/// Outcome of [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Compare analytic gradients of `build`'s scalar loss against central
/// differences `(f(p+eps) - f(p-eps)) / (2 eps)`.
///
/// Every trainable tensor is probed at `min(numel, samples_per_tensor)`
/// coordinates (all coordinates when the tensor is small; otherwise a
/// seeded random sample). The store is restored to its original values.
pub fn grad_check<F>(
    store: &mut ParamStore,
    mut build: F,
    eps: f64,
    tol: f64,
    samples_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamBinding) -> Result<ValueId>,
{
    use rand::{Rng, SeedableRng};
    if eps <= 0.0 {
        return Err(Error::argument("grad_check eps must be positive"));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let binding = bind_params(&mut tape, store);
    let loss_id = build(&mut tape, &binding)?;
    let grads = tape.backward(loss_id)?;
    let mut analytic: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, &id) in binding.ids() {
        if store.entry(name).map(|e| e.trainable).unwrap_or(false) {
            let g = grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape()));
            analytic.insert(name.clone(), g);
        }
    }
    drop(tape);

    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let names: Vec<String> = analytic.keys().cloned().collect();
    let mut entries = Vec::with_capacity(names.len());
    let mut global_max: f64 = 0.0;

    for name in names {
        let numel = store.value(&name)?.numel();
        let coords: Vec<usize> = if numel <= samples_per_tensor {
            (0..numel).collect()
        } else {
            let mut seen = std::collections::BTreeSet::new();
            while seen.len() < samples_per_tensor {
                seen.insert(rng.random_range(0..numel));
            }
            seen.into_iter().collect()
        };
        let mut worst: f64 = 0.0;
        for &i in &coords {
            let original = store.value(&name)?.data()[i];

            store.value_mut(&name)?.data_mut()[i] = original + eps;
            let mut tp = Tape::new();
            let b = bind_params(&mut tp, store);
            let l = build(&mut tp, &b)?;
            let f_plus = tp.scalar_value(l)?;
            drop(tp);

            store.value_mut(&name)?.data_mut()[i] = original - eps;
            let mut tm = Tape::new();
            let b = bind_params(&mut tm, store);
            let l = build(&mut tm, &b)?;
            let f_minus = tm.scalar_value(l)?;
            drop(tm);

            store.value_mut(&name)?.data_mut()[i] = original;

            let fd = (f_plus - f_minus) / (2.0 * eps);
            let an = analytic[&name].data()[i];
            worst = worst.max(rel_err(fd, an));
        }
        global_max = global_max.max(worst);
        entries.push(GradCheckEntry {
            name,
            max_rel_err: worst,
            samples: coords.len(),
        });
    }

    Ok(GradCheckReport {
        entries,
        max_rel_err: global_max,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_tensor(rng: &mut ChaCha20Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64), true);
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_squared_norm_is_2x() {
        let mut tape = Tape::new();
        let t = Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let x = tape.leaf(t.clone(), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        let expect: Vec<f64> = t.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(grads.get(x).unwrap().data(), &expect[..]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Argument(_))));
    }

    #[test]
    fn backward_is_deterministic_bitwise() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let xt = rand_tensor(&mut rng, &[3, 3]);
        let run = |xt: &Tensor| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.leaf(xt.clone(), true);
            let s = tape.softmax_rows(x).unwrap();
            let m = tape.mul(s, x).unwrap();
            let loss = tape.sum(m);
            let grads = tape.backward(loss).unwrap();
            grads.get(x).unwrap().data().to_vec()
        };
        let a = run(&xt);
        let b = run(&xt);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn sum_rule_grad_of_f_plus_g() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let xt = rand_tensor(&mut rng, &[2, 4]);
        let grad_of = |combined: bool| -> (Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let x = tape.leaf(xt.clone(), true);
            let sq = tape.mul(x, x).unwrap();
            let f = tape.sum(sq);
            let sg = tape.sigmoid(x);
            let g = tape.sum(sg);
            if combined {
                let l = tape.add(f, g).unwrap();
                let gr = tape.backward(l).unwrap();
                (gr.get(x).unwrap().data().to_vec(), vec![])
            } else {
                let gf = tape.backward(f).unwrap().get(x).unwrap().data().to_vec();
                let gg = tape.backward(g).unwrap().get(x).unwrap().data().to_vec();
                (gf, gg)
            }
        };
        let (sum_grad, _) = grad_of(true);
        let (gf, gg) = grad_of(false);
        for i in 0..sum_grad.len() {
            assert!((sum_grad[i] - (gf[i] + gg[i])).abs() < 1e-12);
        }
    }

    /// Finite-difference sweep over every primitive at random small shapes.
    #[test]
    fn primitive_gradients_match_central_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        // Each case: (name, shapes of leaf tensors, graph builder).
        type Builder =
            Box<dyn Fn(&mut Tape, &ParamBinding) -> Result<ValueId>>;
        let proj = rand_tensor(&mut rng, &[3, 4, 4]); // shared projection for map outputs

        let cases: Vec<(&str, Vec<(&str, Vec<usize>)>, Builder)> = vec![
            (
                "add_mul_div",
                vec![("a", vec![2, 3]), ("b", vec![2, 3])],
                Box::new(|t, b| {
                    let a = b.get("a")?;
                    let bb = b.get("b")?;
                    let s = t.add(a, bb)?;
                    let m = t.mul(s, a)?;
                    let sh = t.add_scalar(bb, 3.0); // keep denominator away from 0
                    let d = t.div(m, sh)?;
                    Ok(t.sum(d))
                }),
            ),
            (
                "sub_scale_abs",
                vec![("a", vec![5]), ("b", vec![5])],
                Box::new(|t, b| {
                    let a = b.get("a")?;
                    let bb = b.get("b")?;
                    let d = t.sub(a, bb)?;
                    let s = t.scale(d, -1.7);
                    let ab = t.abs(s);
                    Ok(t.sum(ab))
                }),
            ),
            (
                "relu_sigmoid",
                vec![("a", vec![7])],
                Box::new(|t, b| {
                    let a = b.get("a")?;
                    let r = t.relu(a);
                    let s = t.sigmoid(r);
                    Ok(t.sum(s))
                }),
            ),
            (
                "matmul_transpose_softmax",
                vec![("a", vec![3, 4]), ("b", vec![3, 4])],
                Box::new(|t, b| {
                    let a = b.get("a")?;
                    let bb = b.get("b")?;
                    let bt = t.transpose(bb)?;
                    let p = t.matmul(a, bt)?;
                    let s = t.softmax_rows(p)?;
                    let w = t.mul(s, p)?;
                    Ok(t.sum(w))
                }),
            ),
            (
                "layer_norm",
                vec![("x", vec![3, 5]), ("g", vec![5]), ("be", vec![5])],
                Box::new(|t, b| {
                    let x = b.get("x")?;
                    let g = b.get("g")?;
                    let be = b.get("be")?;
                    let n = t.layer_norm(x, g, be)?;
                    let m = t.mul(n, n)?;
                    Ok(t.sum(m))
                }),
            ),
            (
                "add_row_slice_cols",
                vec![("x", vec![3, 6]), ("r", vec![6])],
                Box::new(|t, b| {
                    let x = b.get("x")?;
                    let r = b.get("r")?;
                    let a = t.add_row(x, r)?;
                    let s = t.slice_cols(a, 2, 3)?;
                    let m = t.mul(s, s)?;
                    Ok(t.sum(m))
                }),
            ),
            (
                "conv_same_stride1",
                vec![("x", vec![2, 4, 4]), ("w", vec![3, 2, 3, 3]), ("bi", vec![3])],
                Box::new(move |t, b| {
                    let x = b.get("x")?;
                    let w = b.get("w")?;
                    let bi = b.get("bi")?;
                    let c = t.conv2d(x, w, bi, 1, PaddingMode::Same)?;
                    let pr = t.constant(proj.clone());
                    let m = t.mul(c, pr)?;
                    Ok(t.sum(m))
                }),
            ),
            (
                "conv_valid_stride2",
                vec![("x", vec![1, 5, 5]), ("w", vec![2, 1, 3, 3]), ("bi", vec![2])],
                Box::new(|t, b| {
                    let x = b.get("x")?;
                    let w = b.get("w")?;
                    let bi = b.get("bi")?;
                    let c = t.conv2d(x, w, bi, 2, PaddingMode::Valid)?;
                    let m = t.mul(c, c)?;
                    Ok(t.sum(m))
                }),
            ),
            (
                "filter_fixed_maxpool_upsample",
                vec![("x", vec![2, 4, 4])],
                Box::new(|t, b| {
                    let x = b.get("x")?;
                    let f = t.filter_fixed(x, vec![1.0 / 9.0; 9], 3, BorderMode::Reflect)?;
                    let p = t.maxpool2(f)?;
                    let u = t.upsample2(p)?;
                    let m = t.mul(u, u)?;
                    Ok(t.mean(m))
                }),
            ),
            (
                "shift_tokens_roundtrip",
                vec![("x", vec![3, 2, 4])],
                Box::new(|t, b| {
                    let x = b.get("x")?;
                    let s = t.cyclic_shift(x, 1, 2)?;
                    let tok = t.tokens_from_map(s)?;
                    let sm = t.softmax_rows(tok)?;
                    let back = t.map_from_tokens(sm, 2, 4)?;
                    let m = t.mul(back, back)?;
                    Ok(t.sum(m))
                }),
            ),
            (
                "concat_channels",
                vec![("a", vec![1, 3, 3]), ("b", vec![2, 3, 3])],
                Box::new(|t, bi| {
                    let a = bi.get("a")?;
                    let b = bi.get("b")?;
                    let c = t.concat_channels(&[a, b])?;
                    let m = t.mul(c, c)?;
                    Ok(t.sum(m))
                }),
            ),
            (
                "safe_div",
                vec![("a", vec![6]), ("b", vec![6])],
                Box::new(|t, bi| {
                    let a = bi.get("a")?;
                    let b = bi.get("b")?;
                    // keep |denominator| >= 2 so the fallback branch stays off
                    let sh = t.add_scalar(b, 3.0);
                    let d = t.safe_div(a, sh)?;
                    Ok(t.sum(d))
                }),
            ),
        ];

        for (name, leaves, build) in cases {
            let mut store = ParamStore::new();
            for (lname, shape) in &leaves {
                // offset into (0.1, 1.1) keeps relu/abs/maxpool away from kinks
                let t = Tensor::from_fn(shape, |_| rng.random::<f64>() + 0.1);
                store.insert(lname.to_string(), t, true).unwrap();
            }
            let report = grad_check(&mut store, build, 1e-5, 1e-6, 64, 99).unwrap();
            assert!(
                report.passed(),
                "primitive case `{name}` failed: max rel err {}",
                report.max_rel_err
            );
        }
    }

    #[test]
    fn softmax_composite_matches_finite_differences() {
        let mut store = ParamStore::new();
        store
            .insert(
                "x".into(),
                Tensor::new(vec![2, 2], vec![0.3, -0.7, 1.2, 0.1]).unwrap(),
                true,
            )
            .unwrap();
        let weights = Tensor::new(vec![2, 2], vec![0.9, -0.4, 0.2, 1.5]).unwrap();
        let report = grad_check(
            &mut store,
            |t, b| {
                let x = b.get("x")?;
                let s = t.softmax_rows(x)?;
                let w = t.constant(weights.clone());
                let m = t.mul(s, w)?;
                Ok(t.sum(m))
            },
            1e-5,
            1e-6,
            64,
            3,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_check_linear_model_is_near_exact() {
        let mut store = ParamStore::new();
        store
            .insert("w".into(), Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.1]).unwrap(), true)
            .unwrap();
        let x = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let report = grad_check(
            &mut store,
            |t, b| {
                let w = b.get("w")?;
                let xv = t.constant(x.clone());
                let p = t.mul(w, xv)?;
                Ok(t.sum(p))
            },
            1e-5,
            1e-9,
            64,
            5,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn unreached_params_get_zero_grad() {
        let mut store = ParamStore::new();
        store.insert("used".into(), Tensor::filled(&[2], 1.0), true).unwrap();
        store.insert("unused".into(), Tensor::filled(&[2], 1.0), true).unwrap();
        let mut tape = Tape::new();
        let binding = bind_params(&mut tape, &store);
        let u = binding.get("used").unwrap();
        let sq = tape.mul(u, u).unwrap();
        let loss = tape.sum(sq);
        store.zero_grads();
        backward_into(&tape, loss, &binding, &mut store).unwrap();
        assert_eq!(store.entry("unused").unwrap().grad.data(), &[0.0, 0.0]);
        assert_eq!(store.entry("used").unwrap().grad.data(), &[2.0, 2.0]);
    }
}
