use std::sync::Arc;

use rand::Rng;

use super::attention::{self, AttnDims, AttnGrads, AttnInputs, EdgeIndex};
use super::kernels::{self, ConvDims};
use super::{split_axis, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, Real),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    Softmax { x: Var, axis: usize },
    LogSumExp(Var),
    LayerNorm { x: Var, axis: usize, inv_std: Vec<Real> },
    Dropout { x: Var, mask: Vec<Real> },
    Conv2d { x: Var, w: Var, b: Option<Var>, dims: ConvDims },
    CircCorr(Var, Var),
    Reshape(Var),
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Gather { x: Var, idx: Vec<usize> },
    RelMatVec { w: Var, x: Var, idx: Vec<usize> },
    RelAttention(Box<AttnNode>),
    PairwiseDist { q: Var, t: Var, p: u8 },
}

struct AttnNode {
    inputs: [Var; 6],
    edges: Arc<EdgeIndex>,
    dims: AttnDims,
    alpha: Vec<Real>,
}

/// Append-only tape of tensor operations.
///
/// Nodes are stored in creation order, so every input precedes its consumer
/// and [`Graph::backward`] simply walks the tape in reverse. A graph supports
/// a single backward pass; build a fresh graph per step.
pub struct Graph {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<Real>>>,
    requires: Vec<bool>,
    ops: Vec<Op>,
    checked: bool,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
            ops: Vec::new(),
            checked: false,
            backward_done: false,
        }
    }

    /// Enables a NaN/Inf scan after every op.
    pub fn with_checked(mut self, checked: bool) -> Self {
        self.checked = checked;
        self
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.values.push(t);
        self.grads.push(None);
        self.requires.push(requires_grad);
        self.ops.push(Op::Leaf);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Gradient of a leaf after [`Graph::backward`]. Absent for constants
    /// and for leaves the loss does not depend on.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.values[v.0].shape().to_vec(), g.clone()))
    }

    /// Moves the gradient buffer out of the graph.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<Real>> {
        self.grads[v.0].take()
    }

    fn push(&mut self, name: &'static str, op: Op, value: Tensor, requires: bool) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite { op: name.to_string() });
        }
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        self.ops.push(op);
        Ok(Var(self.values.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(Real, Real) -> Real) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        let req = self.requires[a.0] || self.requires[b.0];
        self.push(name, op, value, req)
    }

    fn map(&mut self, name: &'static str, x: Var, op: Op, f: impl Fn(Real) -> Real) -> Result<Var> {
        let t = &self.values[x.0];
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect());
        let req = self.requires[x.0];
        self.push(name, op, value, req)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds `b[n]` to every length-`n` trailing slice of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&1);
        if self.values[b.0].numel() != n {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(b)));
        }
        let tx = &self.values[x.0];
        let tb = self.values[b.0].data();
        let data = tx
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(tb).map(|(v, b)| v + b))
            .collect();
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        let req = self.requires[x.0] || self.requires[b.0];
        self.push("add_bias", Op::AddBias(x, b), value, req)
    }

    pub fn scale(&mut self, x: Var, s: Real) -> Result<Var> {
        self.map("scale", x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: Real) -> Result<Var> {
        self.map("add_scalar", x, Op::AddScalar(x), |v| v + s)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map("exp", x, Op::Exp(x), Real::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map("log", x, Op::Log(x), Real::ln)
    }

    /// `ln(1 + eˣ)`, computed stably.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.map("softplus", x, Op::Softplus(x), kernels::softplus)
    }

    fn matmul_dims(&self, op: &'static str, a: Var, b: Var, transposed: bool) -> Result<(usize, usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape(op, sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if transposed { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok((m, k, n))
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = self.matmul_dims("matmul", a, b, false)?;
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.values[a.0].data(), self.values[b.0].data(), &mut out, m, k, n);
        let req = self.requires[a.0] || self.requires[b.0];
        self.push("matmul", Op::MatMul(a, b), Tensor::from_parts(vec![m, n], out), req)
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = self.matmul_dims("matmul_t", a, b, true)?;
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_acc(self.values[a.0].data(), self.values[b.0].data(), &mut out, m, k, n);
        let req = self.requires[a.0] || self.requires[b.0];
        self.push("matmul_t", Op::MatMulT(a, b), Tensor::from_parts(vec![m, n], out), req)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.values[x.0].data().iter().sum();
        let req = self.requires[x.0];
        self.push("sum", Op::Sum(x), Tensor::scalar(s), req)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = &self.values[x.0];
        let s = t.data().iter().sum::<Real>() / t.numel() as Real;
        let req = self.requires[x.0];
        self.push("mean", Op::Mean(x), Tensor::scalar(s), req)
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::invalid(op, format!("axis {axis} out of range for shape {shape:?}")));
        }
        Ok(split_axis(shape, axis))
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("softmax", x, axis)?;
        let src = self.values[x.0].data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(Real::NEG_INFINITY, Real::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        let req = self.requires[x.0];
        self.push("softmax", Op::Softmax { x, axis }, value, req)
    }

    /// `ln Σ exp` over the last axis; the axis is removed from the shape.
    pub fn log_sum_exp(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some((&len, rest)) = shape.split_last() else {
            return Err(Error::invalid("log_sum_exp", "scalar input"));
        };
        let out = self.values[x.0].data().chunks(len).map(kernels::log_sum_exp).collect();
        let req = self.requires[x.0];
        self.push("log_sum_exp", Op::LogSumExp(x), Tensor::from_parts(rest.to_vec(), out), req)
    }

    /// Normalises to zero mean and unit (population) variance along `axis`,
    /// with `eps` added to the variance under the square root.
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: Real) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("layer_norm", x, axis)?;
        if len < 2 {
            return Err(Error::invalid("layer_norm", format!("axis extent {len} < 2")));
        }
        let src = self.values[x.0].data();
        let mut out = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mean = (0..len).map(|j| src[at(j)]).sum::<Real>() / len as Real;
                let var = (0..len).map(|j| (src[at(j)] - mean).powi(2)).sum::<Real>() / len as Real;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i] = is;
                for j in 0..len {
                    out[at(j)] = (src[at(j)] - mean) * is;
                }
            }
        }
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        let req = self.requires[x.0];
        self.push("layer_norm", Op::LayerNorm { x, axis, inv_std }, value, req)
    }

    /// Inverted dropout. Identity when `training` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: Real, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.values[x.0].numel();
        let mask: Vec<Real> = (0..n)
            .map(|_| if rng.gen::<Real>() < p { 0.0 } else { keep })
            .collect();
        let t = &self.values[x.0];
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        let req = self.requires[x.0];
        self.push("dropout", Op::Dropout { x, mask }, value, req)
    }

    /// Stride-1 unpadded cross-correlation.
    ///
    /// `x` is `[c_in, h, w]` or `[batch, c_in, h, w]`; `w` is
    /// `[c_out, c_in, kh, kw]`; optional bias is `[c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (batch, xs) = match sx.len() {
            3 => (None, &sx[..]),
            4 => (Some(sx[0]), &sx[1..]),
            _ => return Err(Error::shape("conv2d", &sx, &sw)),
        };
        if sw.len() != 4 || sw[1] != xs[0] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if sw[2] > xs[1] || sw[3] > xs[2] {
            return Err(Error::invalid(
                "conv2d",
                format!("filter {}×{} larger than input {}×{}", sw[2], sw[3], xs[1], xs[2]),
            ));
        }
        if let Some(b) = bias {
            if self.values[b.0].numel() != sw[0] {
                return Err(Error::shape("conv2d", &sw, self.shape(b)));
            }
        }
        let dims = ConvDims {
            batch: batch.unwrap_or(1),
            c_in: xs[0],
            h: xs[1],
            w: xs[2],
            c_out: sw[0],
            kh: sw[2],
            kw: sw[3],
        };
        let mut out = vec![0.0; dims.batch * dims.c_out * dims.out_h() * dims.out_w()];
        kernels::conv2d(
            self.values[x.0].data(),
            self.values[w.0].data(),
            bias.map(|b| self.values[b.0].data()),
            dims,
            &mut out,
        );
        let mut shape = vec![dims.c_out, dims.out_h(), dims.out_w()];
        if let Some(b) = batch {
            shape.insert(0, b);
        }
        let req = self.requires[x.0] || self.requires[w.0] || bias.is_some_and(|b| self.requires[b.0]);
        self.push("conv2d", Op::Conv2d { x, w, b: bias, dims }, Tensor::from_parts(shape, out), req)
    }

    /// Circular correlation over the last axis; both inputs share a shape.
    pub fn circ_correlate(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("circ_correlate", a, b)?;
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| Error::invalid("circ_correlate", "scalar input"))?;
        let (ta, tb) = (self.values[a.0].data(), self.values[b.0].data());
        let mut out = vec![0.0; ta.len()];
        for ((oa, ob), o) in ta.chunks(d).zip(tb.chunks(d)).zip(out.chunks_mut(d)) {
            kernels::circ_correlate(oa, ob, o);
        }
        let req = self.requires[a.0] || self.requires[b.0];
        self.push("circ_correlate", Op::CircCorr(a, b), Tensor::from_parts(shape, out), req)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.values[x.0].clone().reshape(shape)?;
        let req = self.requires[x.0];
        self.push("reshape", Op::Reshape(x), value, req)
    }

    /// Concatenates along `axis`; other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                out.extend_from_slice(&self.values[x.0].data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let req = xs.iter().any(|x| self.requires[x.0]);
        self.push("concat", Op::Concat { xs: xs.to_vec(), axis }, Tensor::from_parts(shape, out), req)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (outer, ext, inner) = self.check_axis("narrow", x, axis)?;
        if len == 0 || start + len > ext {
            return Err(Error::invalid("narrow", format!("range {start}..{} outside extent {ext}", start + len)));
        }
        let src = self.values[x.0].data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * ext + start) * inner..(o * ext + start + len) * inner]);
        }
        let mut shape = self.shape(x).to_vec();
        shape[axis] = len;
        let req = self.requires[x.0];
        self.push("narrow", Op::Narrow { x, axis, start }, Tensor::from_parts(shape, out), req)
    }

    /// Selects entries of the first axis; indices may repeat.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = &self.values[x.0];
        let rows = *t
            .shape()
            .first()
            .ok_or_else(|| Error::invalid("gather", "scalar input"))?;
        if idx.is_empty() {
            return Err(Error::invalid("gather", "empty index"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid("gather", format!("index {bad} out of range for {rows} rows")));
        }
        let w = t.numel() / rows;
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            out.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        let req = self.requires[x.0];
        self.push(
            "gather",
            Op::Gather { x, idx: idx.to_vec() },
            Tensor::from_parts(shape, out),
            req,
        )
    }

    /// Per-row block matrix-vector product:
    /// `out[e, c] = w[idx[e], c] · x[e, c]` with `w: [R, C, m, n]`,
    /// `x: [E, C, n]`, giving `[E, C, m]`.
    pub fn rel_matvec(&mut self, w: Var, x: Var, idx: &[usize]) -> Result<Var> {
        let (sw, sx) = (self.shape(w).to_vec(), self.shape(x).to_vec());
        if sw.len() != 4 || sx.len() != 3 || sw[1] != sx[1] || sw[3] != sx[2] || idx.len() != sx[0] {
            return Err(Error::shape("rel_matvec", &sw, &sx));
        }
        if idx.iter().any(|&r| r >= sw[0]) {
            return Err(Error::invalid("rel_matvec", "relation index out of range"));
        }
        let (c, m, n) = (sw[1], sw[2], sw[3]);
        let (tw, tx) = (self.values[w.0].data(), self.values[x.0].data());
        let mut out = vec![0.0; idx.len() * c * m];
        for (e, &r) in idx.iter().enumerate() {
            for h in 0..c {
                let wb = &tw[(r * c + h) * m * n..][..m * n];
                let xb = &tx[(e * c + h) * n..][..n];
                for i in 0..m {
                    out[(e * c + h) * m + i] = kernels::dot(&wb[i * n..(i + 1) * n], xb);
                }
            }
        }
        let req = self.requires[w.0] || self.requires[x.0];
        self.push(
            "rel_matvec",
            Op::RelMatVec { w, x, idx: idx.to_vec() },
            Tensor::from_parts(vec![idx.len(), c, m], out),
            req,
        )
    }

    /// Relation-aware multi-head attention aggregation over `edges`.
    ///
    /// `q, k, v: [N, C, d]`, `x: [R, C, d]`, `w1, w2: [R, C, d, d]`.
    /// Returns `[N, C, d]`; nodes without incoming edges get zeros.
    #[allow(clippy::too_many_arguments)]
    pub fn rel_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        x: Var,
        w1: Var,
        w2: Var,
        edges: &Arc<EdgeIndex>,
    ) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        if sq.len() != 3 || sq[0] != edges.num_nodes() {
            return Err(Error::invalid(
                "rel_attention",
                format!("queries {sq:?} do not match {} nodes", edges.num_nodes()),
            ));
        }
        let (c, d) = (sq[1], sq[2]);
        self.same_shape("rel_attention", q, k)?;
        self.same_shape("rel_attention", q, v)?;
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || sx[1] != c || sx[2] != d {
            return Err(Error::shape("rel_attention", &sq, &sx));
        }
        for w in [w1, w2] {
            if self.shape(w) != [sx[0], c, d, d] {
                return Err(Error::shape("rel_attention", &sx, self.shape(w)));
            }
        }
        if edges.max_relation().is_some_and(|r| r >= sx[0]) {
            return Err(Error::invalid("rel_attention", "edge relation id out of range"));
        }
        let dims = AttnDims { heads: c, dim: d };
        let (out, alpha) = attention::forward(
            &AttnInputs {
                q: self.values[q.0].data(),
                k: self.values[k.0].data(),
                v: self.values[v.0].data(),
                x: self.values[x.0].data(),
                w1: self.values[w1.0].data(),
                w2: self.values[w2.0].data(),
            },
            edges,
            dims,
        );
        let inputs = [q, k, v, x, w1, w2];
        let req = inputs.iter().any(|i| self.requires[i.0]);
        let node = AttnNode {
            inputs,
            edges: Arc::clone(edges),
            dims,
            alpha,
        };
        self.push("rel_attention", Op::RelAttention(Box::new(node)), Tensor::from_parts(sq, out), req)
    }

    /// Attention weights `[E, C]` saved by a [`Graph::rel_attention`] node,
    /// in the edge order of its [`EdgeIndex`].
    pub fn attention_weights(&self, v: Var) -> Option<&[Real]> {
        match &self.ops[v.0] {
            Op::RelAttention(node) => Some(&node.alpha),
            _ => None,
        }
    }

    /// `out[b, n] = ‖q[b] − t[n]‖_p` for `p ∈ {1, 2}`.
    pub fn pairwise_distance(&mut self, q: Var, t: Var, p: u8) -> Result<Var> {
        if p != 1 && p != 2 {
            return Err(Error::invalid("pairwise_distance", format!("unsupported norm p={p}")));
        }
        let (sq, st) = (self.shape(q).to_vec(), self.shape(t).to_vec());
        if sq.len() != 2 || st.len() != 2 || sq[1] != st[1] {
            return Err(Error::shape("pairwise_distance", &sq, &st));
        }
        let (b, n, d) = (sq[0], st[0], sq[1]);
        let (tq, tt) = (self.values[q.0].data(), self.values[t.0].data());
        let mut out = vec![0.0; b * n];
        for i in 0..b {
            let qi = &tq[i * d..(i + 1) * d];
            for j in 0..n {
                let tj = &tt[j * d..(j + 1) * d];
                out[i * n + j] = if p == 1 {
                    qi.iter().zip(tj).map(|(a, c)| (a - c).abs()).sum()
                } else {
                    qi.iter().zip(tj).map(|(a, c)| (a - c) * (a - c)).sum::<Real>().sqrt()
                };
            }
        }
        let req = self.requires[q.0] || self.requires[t.0];
        self.push("pairwise_distance", Op::PairwiseDist { q, t, p }, Tensor::from_parts(vec![b, n], out), req)
    }

    /// Reverse pass from a one-element `loss`. Gradients accumulate into every
    /// leaf created with `requires_grad`. Running it twice is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.values[loss.0].numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        if !self.requires[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if matches!(self.ops[id], Op::Leaf) || !self.requires[id] {
                continue;
            }
            let Some(g) = self.grads[id].take() else { continue };
            let op = std::mem::replace(&mut self.ops[id], Op::Leaf);
            let mut ctx = Backprop {
                values: &self.values,
                grads: &mut self.grads,
                requires: &self.requires,
            };
            ctx.run(&op, id, &g);
            self.ops[id] = op;
        }
        Ok(())
    }
}

struct Backprop<'a> {
    values: &'a [Tensor],
    grads: &'a mut [Option<Vec<Real>>],
    requires: &'a [bool],
}

impl Backprop<'_> {
    fn buf(&mut self, v: Var) -> Option<&mut [Real]> {
        if !self.requires[v.0] {
            return None;
        }
        let n = self.values[v.0].numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    fn acc_map(&mut self, v: Var, g: &[Real], f: impl Fn(usize, Real) -> Real) {
        if let Some(buf) = self.buf(v) {
            for (i, (b, &gi)) in buf.iter_mut().zip(g).enumerate() {
                *b += f(i, gi);
            }
        }
    }

    fn run(&mut self, op: &Op, id: usize, g: &[Real]) {
        let values = self.values;
        let out = values[id].data();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_map(*a, g, |_, gi| gi);
                self.acc_map(*b, g, |_, gi| gi);
            }
            Op::Sub(a, b) => {
                self.acc_map(*a, g, |_, gi| gi);
                self.acc_map(*b, g, |_, gi| -gi);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (values[a.0].data(), values[b.0].data());
                self.acc_map(*a, g, |i, gi| gi * vb[i]);
                self.acc_map(*b, g, |i, gi| gi * va[i]);
            }
            Op::AddBias(x, b) => {
                self.acc_map(*x, g, |_, gi| gi);
                if let Some(gb) = self.buf(*b) {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        for (a, &r) in gb.iter_mut().zip(row) {
                            *a += r;
                        }
                    }
                }
            }
            Op::Scale(x, s) => self.acc_map(*x, g, |_, gi| gi * s),
            Op::AddScalar(x) => self.acc_map(*x, g, |_, gi| gi),
            Op::MatMul(a, b) => {
                let (sa, sb) = (values[a.0].shape(), values[b.0].shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (values[a.0].data(), values[b.0].data());
                if let Some(ga) = self.buf(*a) {
                    kernels::matmul_nt_acc(g, vb, ga, m, n, k);
                }
                if let Some(gb) = self.buf(*b) {
                    kernels::matmul_tn_acc(va, g, gb, m, k, n);
                }
            }
            Op::MatMulT(a, b) => {
                let (sa, sb) = (values[a.0].shape(), values[b.0].shape());
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                let (va, vb) = (values[a.0].data(), values[b.0].data());
                if let Some(ga) = self.buf(*a) {
                    kernels::matmul_acc(g, vb, ga, m, n, k);
                }
                if let Some(gb) = self.buf(*b) {
                    kernels::matmul_tn_acc(g, va, gb, m, n, k);
                }
            }
            Op::Relu(x) => {
                let vx = values[x.0].data();
                self.acc_map(*x, g, |i, gi| if vx[i] > 0.0 { gi } else { 0.0 });
            }
            Op::Exp(x) => self.acc_map(*x, g, |i, gi| gi * out[i]),
            Op::Log(x) => {
                let vx = values[x.0].data();
                self.acc_map(*x, g, |i, gi| gi / vx[i]);
            }
            Op::Softplus(x) => {
                let vx = values[x.0].data();
                self.acc_map(*x, g, |i, gi| gi * kernels::sigmoid(vx[i]));
            }
            Op::Sum(x) => self.acc_map(*x, &vec![g[0]; values[x.0].numel()], |_, gi| gi),
            Op::Mean(x) => {
                let n = values[x.0].numel();
                self.acc_map(*x, &vec![g[0] / n as Real; n], |_, gi| gi);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(values[x.0].shape(), *axis);
                if let Some(gx) = self.buf(*x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let s: Real = (0..len).map(|j| g[at(j)] * out[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += out[at(j)] * (g[at(j)] - s);
                            }
                        }
                    }
                }
            }
            Op::LogSumExp(x) => {
                let vx = values[x.0].data();
                let len = *values[x.0].shape().last().unwrap();
                self.acc_map(*x, &vec![0.0; vx.len()], |i, _| {
                    let r = i / len;
                    g[r] * (vx[i] - out[r]).exp()
                });
            }
            Op::LayerNorm { x, axis, inv_std } => {
                let (outer, len, inner) = split_axis(values[x.0].shape(), *axis);
                if let Some(gx) = self.buf(*x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let mg = (0..len).map(|j| g[at(j)]).sum::<Real>() / len as Real;
                            let mgy = (0..len).map(|j| g[at(j)] * out[at(j)]).sum::<Real>() / len as Real;
                            let is = inv_std[o * inner + i];
                            for j in 0..len {
                                gx[at(j)] += is * (g[at(j)] - mg - out[at(j)] * mgy);
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => self.acc_map(*x, g, |i, gi| gi * mask[i]),
            Op::Conv2d { x, w, b, dims } => {
                let (vx, vw) = (values[x.0].data(), values[w.0].data());
                let mut gx = self.requires[x.0].then(|| vec![0.0; vx.len()]);
                let mut gw = self.requires[w.0].then(|| vec![0.0; vw.len()]);
                let mut gb = b.filter(|b| self.requires[b.0]).map(|b| vec![0.0; values[b.0].numel()]);
                kernels::conv2d_backward(g, vx, vw, *dims, gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut());
                if let Some(gx) = gx {
                    self.acc_map(*x, &gx, |_, v| v);
                }
                if let Some(gw) = gw {
                    self.acc_map(*w, &gw, |_, v| v);
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    self.acc_map(*b, &gb, |_, v| v);
                }
            }
            Op::CircCorr(a, b) => {
                let (va, vb) = (values[a.0].data(), values[b.0].data());
                let d = *values[a.0].shape().last().unwrap();
                let mut ga = self.requires[a.0].then(|| vec![0.0; va.len()]);
                let mut gb = self.requires[b.0].then(|| vec![0.0; vb.len()]);
                for r in 0..va.len() / d {
                    let s = r * d..(r + 1) * d;
                    kernels::circ_correlate_backward(
                        &g[s.clone()],
                        &va[s.clone()],
                        &vb[s.clone()],
                        ga.as_deref_mut().map(|x| &mut x[s.clone()]),
                        gb.as_deref_mut().map(|x| &mut x[s.clone()]),
                    );
                }
                if let Some(ga) = ga {
                    self.acc_map(*a, &ga, |_, v| v);
                }
                if let Some(gb) = gb {
                    self.acc_map(*b, &gb, |_, v| v);
                }
            }
            Op::Reshape(x) => self.acc_map(*x, g, |_, gi| gi),
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(values[id].shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = values[x.0].shape()[*axis];
                    if let Some(gx) = self.buf(x) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            for (a, &s) in gx[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                *a += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, ext, inner) = split_axis(values[x.0].shape(), *axis);
                let len = values[id].shape()[*axis];
                if let Some(gx) = self.buf(*x) {
                    for o in 0..outer {
                        let dst = &mut gx[(o * ext + start) * inner..(o * ext + start + len) * inner];
                        for (a, &s) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                            *a += s;
                        }
                    }
                }
            }
            Op::Gather { x, idx } => {
                let w = values[id].numel() / idx.len();
                if let Some(gx) = self.buf(*x) {
                    for (r, &i) in idx.iter().enumerate() {
                        for (a, &s) in gx[i * w..(i + 1) * w].iter_mut().zip(&g[r * w..(r + 1) * w]) {
                            *a += s;
                        }
                    }
                }
            }
            Op::RelMatVec { w, x, idx } => {
                let sw = values[w.0].shape();
                let (c, m, n) = (sw[1], sw[2], sw[3]);
                let (vw, vx) = (values[w.0].data(), values[x.0].data());
                if let Some(gx) = self.buf(*x) {
                    for (e, &r) in idx.iter().enumerate() {
                        for h in 0..c {
                            let wb = &vw[(r * c + h) * m * n..][..m * n];
                            let gxb = &mut gx[(e * c + h) * n..][..n];
                            for i in 0..m {
                                let gi = g[(e * c + h) * m + i];
                                for (a, &wv) in gxb.iter_mut().zip(&wb[i * n..(i + 1) * n]) {
                                    *a += gi * wv;
                                }
                            }
                        }
                    }
                }
                if let Some(gw) = self.buf(*w) {
                    for (e, &r) in idx.iter().enumerate() {
                        for h in 0..c {
                            let xb = &vx[(e * c + h) * n..][..n];
                            let gwb = &mut gw[(r * c + h) * m * n..][..m * n];
                            for i in 0..m {
                                let gi = g[(e * c + h) * m + i];
                                for (a, &xv) in gwb[i * n..(i + 1) * n].iter_mut().zip(xb) {
                                    *a += gi * xv;
                                }
                            }
                        }
                    }
                }
            }
            Op::RelAttention(node) => {
                let [q, k, v, x, w1, w2] = node.inputs;
                let inp = AttnInputs {
                    q: values[q.0].data(),
                    k: values[k.0].data(),
                    v: values[v.0].data(),
                    x: values[x.0].data(),
                    w1: values[w1.0].data(),
                    w2: values[w2.0].data(),
                };
                let mut bufs: Vec<Option<Vec<Real>>> = node
                    .inputs
                    .iter()
                    .map(|i| self.requires[i.0].then(|| vec![0.0; values[i.0].numel()]))
                    .collect();
                {
                    let mut it = bufs.iter_mut();
                    let mut next = || it.next().unwrap().as_deref_mut();
                    let mut grads = AttnGrads {
                        q: next(),
                        k: next(),
                        v: next(),
                        x: next(),
                        w1: next(),
                        w2: next(),
                    };
                    attention::backward(&inp, &node.edges, node.dims, &node.alpha, g, &mut grads);
                }
                for (var, buf) in node.inputs.iter().zip(bufs) {
                    if let Some(b) = buf {
                        self.acc_map(*var, &b, |_, v| v);
                    }
                }
            }
            Op::PairwiseDist { q, t, p } => {
                let (sq, st) = (values[q.0].shape(), values[t.0].shape());
                let (b, n, d) = (sq[0], st[0], sq[1]);
                let (vq, vt) = (values[q.0].data(), values[t.0].data());
                let mut gq = self.requires[q.0].then(|| vec![0.0; vq.len()]);
                let mut gt = self.requires[t.0].then(|| vec![0.0; vt.len()]);
                for i in 0..b {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        let dist = out[i * n + j];
                        if gij == 0.0 || (*p == 2 && dist == 0.0) {
                            continue;
                        }
                        for k in 0..d {
                            let diff = vq[i * d + k] - vt[j * d + k];
                            let dd = if *p == 1 {
                                if diff > 0.0 {
                                    1.0
                                } else if diff < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            } else {
                                diff / dist
                            };
                            if let Some(gq) = gq.as_deref_mut() {
                                gq[i * d + k] += gij * dd;
                            }
                            if let Some(gt) = gt.as_deref_mut() {
                                gt[j * d + k] -= gij * dd;
                            }
                        }
                    }
                }
                if let Some(gq) = gq {
                    self.acc_map(*q, &gq, |_, v| v);
                }
                if let Some(gt) = gt {
                    self.acc_map(*t, &gt, |_, v| v);
                }
            }
        }
    }
}
