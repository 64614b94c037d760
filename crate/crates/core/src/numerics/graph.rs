//! Dynamically recorded computation graph with reverse-mode gradients.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` is a single reverse sweep.

use std::collections::HashMap;

use super::kernels::{col2im, gemm, im2col, ConvGeom};
use super::params::{Gradients, ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRowVec(Var, Var),
    MulRowVec(Var, Var),
    AddColVec(Var, Var),
    MulColVec(Var, Var),
    Silu(Var),
    Softplus(Var),
    Exp(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Option<Vec<f64>>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    TemporalStatsPool {
        x: Var,
        ranges: Vec<(usize, usize)>,
    },
}

struct Node {
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded recording of one forward evaluation.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    track_params: bool,
}

const LN_POOL_EPS: f64 = 1e-5;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Contiguous chunk boundaries for adaptive pooling of `len` items into `parts`.
pub fn adaptive_ranges(len: usize, parts: usize) -> Vec<(usize, usize)> {
    (0..parts)
        .map(|j| {
            let start = j * len / parts;
            let end = ((j + 1) * len).div_ceil(parts);
            (start, end.max(start + 1).min(len))
        })
        .collect()
}

impl<'s> Graph<'s> {
    /// A graph whose parameter leaves receive gradients.
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            track_params: true,
        }
    }

    /// A graph for frozen-weight evaluation: nothing requires gradients.
    pub fn inference(store: &'s ParamStore) -> Self {
        Self {
            track_params: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.debug_check_finite();
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: self.track_params,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::Contract(format!("{op} expects a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.rank2("transpose", a)?;
        let out = transpose_data(m, n, self.value(a).data());
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a), rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(a).zip(self.value(b), name, f)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    fn broadcast(&mut self, a: Var, v: Var, by_row: bool, mul: bool) -> Result<Var> {
        let at = self.value(a);
        let vt = self.value(v);
        let name = if by_row { "row broadcast" } else { "column broadcast" };
        let (outer, inner) = if by_row {
            (at.rows(), at.cols())
        } else {
            let lead = at.shape().first().copied().unwrap_or(0);
            (lead, at.len().checked_div(lead).unwrap_or(0))
        };
        let expect = if by_row { inner } else { outer };
        if vt.len() != expect || at.is_empty() {
            return Err(Error::dim(name, at.shape(), vt.shape()));
        }
        let vd = vt.data();
        let mut out = at.data().to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            for (j, x) in chunk.iter_mut().enumerate() {
                let s = if by_row { vd[j] } else { vd[i] };
                if mul {
                    *x *= s;
                } else {
                    *x += s;
                }
            }
        }
        let out = Tensor::from_parts(at.shape().to_vec(), out);
        let op = match (by_row, mul) {
            (true, false) => Op::AddRowVec(a, v),
            (true, true) => Op::MulRowVec(a, v),
            (false, false) => Op::AddColVec(a, v),
            (false, true) => Op::MulColVec(a, v),
        };
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(out, op, rg))
    }

    /// `a[.., j] + v[j]` over the last axis.
    pub fn add_row_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        self.broadcast(a, v, true, false)
    }

    /// `a[.., j] * v[j]` over the last axis.
    pub fn mul_row_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        self.broadcast(a, v, true, true)
    }

    /// `a[c, ..] + v[c]` over the first axis (per-channel bias).
    pub fn add_col_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        self.broadcast(a, v, false, false)
    }

    /// `a[c, ..] * v[c]` over the first axis (per-channel gate).
    pub fn mul_col_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        self.broadcast(a, v, false, true)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(out, Op::Silu(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        let rg = self.rg(a);
        self.push(out, Op::Softplus(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Normalize over the last axis, then apply the optional affine pair.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Result<Var> {
        let xt = self.value(x);
        let d = xt.cols();
        if d == 0 || eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm needs d >= 1 and eps > 0 (d={d}, eps={eps})")));
        }
        for p in [gamma, beta].into_iter().flatten() {
            if self.value(p).len() != d {
                return Err(Error::dim("layer_norm", xt.shape(), self.value(p).shape()));
            }
        }
        let rows = xt.rows();
        let mut xhat = vec![0.0; xt.len()];
        let mut inv_std = vec![0.0; rows];
        for (r, (src, dst)) in xt.data().chunks(d).zip(xhat.chunks_mut(d)).enumerate() {
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in dst.iter_mut().zip(src) {
                *o = (v - mean) * is;
            }
        }
        let mut out = xhat.clone();
        let gd = gamma.map(|g| self.value(g).data());
        let bd = beta.map(|b| self.value(b).data());
        for row in out.chunks_mut(d) {
            for (j, o) in row.iter_mut().enumerate() {
                if let Some(g) = gd {
                    *o *= g[j];
                }
                if let Some(b) = bd {
                    *o += b[j];
                }
            }
        }
        let out = Tensor::from_parts(xt.shape().to_vec(), out);
        let rg = self.rg(x) || gamma.is_some_and(|g| self.rg(g)) || beta.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    fn conv_shapes(&self, op: &'static str, x: Var, w: Var) -> Result<([usize; 3], [usize; 4])> {
        match (self.shape(x), self.shape(w)) {
            ([c, h, wd], [a, b, kh, kw]) => Ok(([*c, *h, *wd], [*a, *b, *kh, *kw])),
            (xs, ws) => Err(Error::dim(op, xs, ws)),
        }
    }

    /// Cross-correlation of `x: [c_in, h, w]` with `w: [c_out, c_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let ([c_in, h, wd], [c_out, wc_in, kh, kw]) = self.conv_shapes("conv2d", x, w)?;
        if c_in != wc_in {
            return Err(Error::dim("conv2d", self.shape(x), self.shape(w)));
        }
        let geom = ConvGeom::new(c_in, h, wd, kh, kw, stride, pad)
            .ok_or_else(|| Error::dim("conv2d", self.shape(x), self.shape(w)))?;
        let cols = im2col(self.value(x).data(), &geom);
        let (k, p) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![0.0; c_out * p];
        gemm(c_out, k, p, 1.0, self.value(w).data(), false, &cols, false, 0.0, &mut out);
        let out = Tensor::from_parts(vec![c_out, geom.out_h, geom.out_w], out);
        let rg = self.rg(x) || self.rg(w);
        let cols = self.rg(w).then_some(cols);
        Ok(self.push(out, Op::Conv2d { x, w, geom, cols }, rg))
    }

    /// Transposed convolution of `x: [c_in, h, w]` with `w: [c_in, c_out, kh, kw]`;
    /// output spatial size is `(h - 1)·stride - 2·pad + kh`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let ([c_in, h, wd], [wc_in, c_out, kh, kw]) = self.conv_shapes("conv_transpose2d", x, w)?;
        let bad = || Error::dim("conv_transpose2d", self.shape(x), self.shape(w));
        if c_in != wc_in || stride == 0 || h == 0 || wd == 0 {
            return Err(bad());
        }
        let oh = ((h - 1) * stride + kh).checked_sub(2 * pad).ok_or_else(bad)?;
        let ow = ((wd - 1) * stride + kw).checked_sub(2 * pad).ok_or_else(bad)?;
        let geom = ConvGeom::new(c_out, oh, ow, kh, kw, stride, pad).ok_or_else(bad)?;
        if geom.out_h != h || geom.out_w != wd {
            return Err(bad());
        }
        let (k, p) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; k * p];
        gemm(k, c_in, p, 1.0, self.value(w).data(), true, self.value(x).data(), false, 0.0, &mut cols);
        let out = Tensor::from_parts(vec![c_out, oh, ow], col2im(&cols, &geom));
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::ConvTranspose2d { x, w, geom }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::dim("mse", p.shape(), t.shape()));
        }
        let n = p.len() as f64;
        let v = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(v), Op::Mse(pred, target), rg))
    }

    /// Rows `ids` of a `[vocab, d]` table, as `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.rank2("gather_rows", table)?;
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Contract(format!("row {bad} out of range for table with {vocab} rows")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::GatherRows { table, ids: ids.to_vec() },
            rg,
        ))
    }

    /// Slice `[start, end)` along the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xt = self.value(x);
        let lead = xt.shape().first().copied().unwrap_or(0);
        if start >= end || end > lead {
            return Err(Error::Contract(format!("slice {start}..{end} out of range for shape {:?}", xt.shape())));
        }
        let inner = xt.len() / lead;
        let mut shape = xt.shape().to_vec();
        shape[0] = end - start;
        let out = Tensor::from_parts(shape, xt.data()[start * inner..end * inner].to_vec());
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    /// Slice columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.rank2("slice_cols", x)?;
        if start >= end || end > n {
            return Err(Error::Contract(format!("column slice {start}..{end} out of range for {n} columns")));
        }
        let src = self.value(x).data();
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![m, w], out), Op::SliceCols { x, start }, rg))
    }

    /// Concatenate along the first axis; trailing shapes must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::dim("concat_rows", self.shape(*first), s));
            }
            lead += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(shape, out), Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Concatenate matrices side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (m, _) = self.rank2("concat_cols", *first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.rank2("concat_cols", p)?;
            if pm != m {
                return Err(Error::dim("concat_cols", self.shape(*first), self.shape(p)));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Mean over rows: `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.rank2("mean_rows", x)?;
        if m == 0 {
            return Err(Error::Contract("mean over an empty sequence".into()));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; n];
        for row in src.chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![1, n], out), Op::MeanRows(x), rg))
    }

    /// Adaptive temporal statistics pooling of `x: [c, t, f]` into `parts`
    /// contiguous time chunks. Row `j` of the `[parts, 2·c·f]` output holds
    /// the per-(c, f) mean over chunk `j` followed by the standard deviation.
    pub fn temporal_stats_pool(&mut self, x: Var, parts: usize) -> Result<Var> {
        let [c, t, f] = match self.shape(x) {
            [c, t, f] => [*c, *t, *f],
            s => return Err(Error::Contract(format!("temporal_stats_pool expects [c, t, f], got {s:?}"))),
        };
        if t == 0 || parts == 0 {
            return Err(Error::Contract("temporal_stats_pool needs t >= 1 and parts >= 1".into()));
        }
        let ranges = adaptive_ranges(t, parts);
        let xd = self.value(x).data();
        let cf = c * f;
        let mut out = vec![0.0; parts * 2 * cf];
        for (j, &(s, e)) in ranges.iter().enumerate() {
            let n = (e - s) as f64;
            for ci in 0..c {
                for fi in 0..f {
                    let at = |ti: usize| xd[(ci * t + ti) * f + fi];
                    let mean = (s..e).map(at).sum::<f64>() / n;
                    let var = (s..e).map(|ti| (at(ti) - mean).powi(2)).sum::<f64>() / n;
                    out[j * 2 * cf + ci * f + fi] = mean;
                    out[j * 2 * cf + cf + ci * f + fi] = (var + LN_POOL_EPS).sqrt();
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![parts, 2 * cf], out),
            Op::TemporalStatsPool { x, ranges },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`, returning `∂loss/∂param` for every
    /// parameter leaf reached.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut out = Gradients::default();
        if !self.rg(loss) {
            return Ok(out);
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(&node.op, Var(i), g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, op: &Op, me: Var, g: Tensor, grads: &mut [Option<Tensor>], out: &mut Gradients) {
        let y = self.value(me);
        match op {
            Op::Constant => {}
            Op::Param(id) => out.add(*id, g),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g.data(), false, bv.data(), true, 0.0, &mut ga);
                    self.acc(grads, *a, Tensor::from_parts(vec![m, k], ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, av.data(), true, g.data(), false, 0.0, &mut gb);
                    self.acc(grads, *b, Tensor::from_parts(vec![k, n], gb));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (y.shape()[0], y.shape()[1]);
                let ga = transpose_data(m, n, g.data());
                self.acc(grads, *a, Tensor::from_parts(vec![n, m], ga));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *b, g.scale(-1.0));
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    self.acc(grads, *a, g.zip(bv, "mul", |x, y| x * y).expect("shape checked"));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g.zip(av, "mul", |x, y| x * y).expect("shape checked"));
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.scale(*c)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.acc(grads, *a, g.reshape(&shape).expect("same length"));
            }
            Op::AddRowVec(a, v) | Op::MulRowVec(a, v) | Op::AddColVec(a, v) | Op::MulColVec(a, v) => {
                let by_row = matches!(op, Op::AddRowVec(..) | Op::MulRowVec(..));
                let mul = matches!(op, Op::MulRowVec(..) | Op::MulColVec(..));
                self.backprop_broadcast(*a, *v, by_row, mul, g, grads);
            }
            Op::Silu(a) => {
                let ga = self.value(*a).zip(&g, "silu", |x, gy| {
                    let s = sigmoid(x);
                    gy * s * (1.0 + x * (1.0 - s))
                });
                self.acc(grads, *a, ga.expect("same shape"));
            }
            Op::Softplus(a) => {
                let ga = self.value(*a).zip(&g, "softplus", |x, gy| gy * sigmoid(x));
                self.acc(grads, *a, ga.expect("same shape"));
            }
            Op::Exp(a) => self.acc(grads, *a, y.zip(&g, "exp", |e, gy| e * gy).expect("same shape")),
            Op::SoftmaxRows(a) => {
                let n = y.cols();
                let mut ga = vec![0.0; y.len()];
                for ((yr, gr), dst) in y.data().chunks(n).zip(g.data().chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yv), gv) in dst.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                self.acc(grads, *a, Tensor::from_parts(y.shape().to_vec(), ga));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = y.cols();
                let gd = gamma.map(|gv| self.value(gv).data());
                if let Some(gv) = gamma.filter(|v| self.rg(*v)) {
                    let mut gg = vec![0.0; d];
                    for (gr, xr) in g.data().chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                    self.acc(grads, gv, Tensor::from_parts(vec![d], gg));
                }
                if let Some(bv) = beta.filter(|v| self.rg(*v)) {
                    let mut gb = vec![0.0; d];
                    for gr in g.data().chunks(d) {
                        for j in 0..d {
                            gb[j] += gr[j];
                        }
                    }
                    self.acc(grads, bv, Tensor::from_parts(vec![d], gb));
                }
                if self.rg(*x) {
                    let mut gx = vec![0.0; y.len()];
                    let mut gxh = vec![0.0; d];
                    for (r, ((gr, xr), dst)) in g.data().chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        for j in 0..d {
                            gxh[j] = gr[j] * gd.map_or(1.0, |gm| gm[j]);
                        }
                        let m1 = gxh.iter().sum::<f64>() / d as f64;
                        let m2 = gxh.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dst[j] = inv_std[r] * (gxh[j] - m1 - xr[j] * m2);
                        }
                    }
                    self.acc(grads, *x, Tensor::from_parts(y.shape().to_vec(), gx));
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let c_out = y.shape()[0];
                let (k, p) = (geom.col_rows(), geom.col_cols());
                if let Some(cols) = cols {
                    let mut gw = vec![0.0; c_out * k];
                    gemm(c_out, p, k, 1.0, g.data(), false, cols, true, 0.0, &mut gw);
                    self.acc(grads, *w, Tensor::from_parts(self.shape(*w).to_vec(), gw));
                }
                if self.rg(*x) {
                    let mut gcols = vec![0.0; k * p];
                    gemm(k, c_out, p, 1.0, self.value(*w).data(), true, g.data(), false, 0.0, &mut gcols);
                    let gx = col2im(&gcols, geom);
                    self.acc(grads, *x, Tensor::from_parts(self.shape(*x).to_vec(), gx));
                }
            }
            Op::ConvTranspose2d { x, w, geom } => {
                let c_in = self.shape(*x)[0];
                let (k, p) = (geom.col_rows(), geom.col_cols());
                let gcols = im2col(g.data(), geom);
                if self.rg(*x) {
                    let mut gx = vec![0.0; c_in * p];
                    gemm(c_in, k, p, 1.0, self.value(*w).data(), false, &gcols, false, 0.0, &mut gx);
                    self.acc(grads, *x, Tensor::from_parts(self.shape(*x).to_vec(), gx));
                }
                if self.rg(*w) {
                    let mut gw = vec![0.0; c_in * k];
                    gemm(c_in, p, k, 1.0, self.value(*x).data(), false, &gcols, true, 0.0, &mut gw);
                    self.acc(grads, *w, Tensor::from_parts(self.shape(*w).to_vec(), gw));
                }
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                self.acc(grads, *a, Tensor::full(self.shape(*a), s));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.acc(grads, *a, Tensor::full(self.shape(*a), g.data()[0] / n));
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (self.value(*p), self.value(*t));
                let c = 2.0 * g.data()[0] / pv.len() as f64;
                let gp = pv.zip(tv, "mse", |a, b| c * (a - b)).expect("shape checked");
                if self.rg(*t) {
                    self.acc(grads, *t, gp.scale(-1.0));
                }
                self.acc(grads, *p, gp);
            }
            Op::GatherRows { table, ids } => {
                let shape = self.shape(*table).to_vec();
                let d = shape[1];
                let mut gt = vec![0.0; shape[0] * d];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += g.data()[r * d + j];
                    }
                }
                self.acc(grads, *table, Tensor::from_parts(shape, gt));
            }
            Op::SliceRows { x, start } => {
                let shape = self.shape(*x).to_vec();
                let inner = y.len() / y.shape()[0];
                let mut gx = vec![0.0; shape.iter().product()];
                gx[start * inner..start * inner + y.len()].copy_from_slice(g.data());
                self.acc(grads, *x, Tensor::from_parts(shape, gx));
            }
            Op::SliceCols { x, start } => {
                let shape = self.shape(*x).to_vec();
                let (m, n) = (shape[0], shape[1]);
                let w = y.shape()[1];
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    gx[r * n + start..r * n + start + w].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                self.acc(grads, *x, Tensor::from_parts(shape, gx));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let gp = g.data()[offset..offset + len].to_vec();
                    offset += len;
                    self.acc(grads, p, Tensor::from_parts(self.shape(p).to_vec(), gp));
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = (y.shape()[0], y.shape()[1]);
                let mut col = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    let mut gp = Vec::with_capacity(m * w);
                    for r in 0..m {
                        gp.extend_from_slice(&g.data()[r * n + col..r * n + col + w]);
                    }
                    col += w;
                    self.acc(grads, p, Tensor::from_parts(vec![m, w], gp));
                }
            }
            Op::MeanRows(x) => {
                let shape = self.shape(*x).to_vec();
                let m = shape[0];
                let gx: Vec<f64> = (0..m).flat_map(|_| g.data().iter().map(move |v| v / m as f64)).collect();
                self.acc(grads, *x, Tensor::from_parts(shape, gx));
            }
            Op::TemporalStatsPool { x, ranges } => {
                let shape = self.shape(*x).to_vec();
                let (c, t, f) = (shape[0], shape[1], shape[2]);
                let cf = c * f;
                let xd = self.value(*x).data();
                let (yd, gd) = (y.data(), g.data());
                let mut gx = vec![0.0; xd.len()];
                for (j, &(s, e)) in ranges.iter().enumerate() {
                    let n = (e - s) as f64;
                    for idx in 0..cf {
                        let (ci, fi) = (idx / f, idx % f);
                        let mean = yd[j * 2 * cf + idx];
                        let std = yd[j * 2 * cf + cf + idx];
                        let g_mean = gd[j * 2 * cf + idx];
                        let g_std = gd[j * 2 * cf + cf + idx];
                        for ti in s..e {
                            let at = (ci * t + ti) * f + fi;
                            gx[at] += g_mean / n + g_std * (xd[at] - mean) / (n * std);
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_parts(shape, gx));
            }
        }
    }

    fn backprop_broadcast(&self, a: Var, v: Var, by_row: bool, mul: bool, g: Tensor, grads: &mut [Option<Tensor>]) {
        let (av, vv) = (self.value(a), self.value(v));
        let inner = if by_row { av.cols() } else { av.len() / av.shape()[0] };
        if self.rg(v) {
            let mut gv = vec![0.0; vv.len()];
            for (i, (gc, ac)) in g.data().chunks(inner).zip(av.data().chunks(inner)).enumerate() {
                for (j, (gx, ax)) in gc.iter().zip(ac).enumerate() {
                    let slot = if by_row { j } else { i };
                    gv[slot] += if mul { gx * ax } else { *gx };
                }
            }
            self.acc(grads, v, Tensor::from_parts(vv.shape().to_vec(), gv));
        }
        if self.rg(a) {
            if mul {
                let vd = vv.data();
                let mut ga = g.into_data();
                for (i, chunk) in ga.chunks_mut(inner).enumerate() {
                    for (j, x) in chunk.iter_mut().enumerate() {
                        *x *= if by_row { vd[j] } else { vd[i] };
                    }
                }
                self.acc(grads, a, Tensor::from_parts(av.shape().to_vec(), ga));
            } else {
                self.acc(grads, a, g);
            }
        }
    }
}

fn transpose_data(m: usize, n: usize, src: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let n = x.cols();
    let mut out = x.data().to_vec();
    if n > 0 {
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}
