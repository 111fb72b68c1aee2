//! Fused relation-aware attention aggregation.
//!
//! For every edge `e = (u ← v, r)` and head `c`:
//!
//! ```text
//! logit[e,c] = q[u,c] · W1[r,c] (k[v,c] ⋆ x[r,c]) / √d
//! α[e,c]     = softmax of logit over the edges entering u
//! out[u,c]   = Σ_e α[e,c] · W2[r,c] (v[v,c] ⋆ x[r,c])
//! ```
//!
//! Per-edge intermediates are recomputed in the backward pass instead of
//! being stored, so memory stays at `O(|E|·C)` beyond the inputs.

use super::kernels::{circ_correlate, circ_correlate_backward, dot};
use super::Real;
use crate::error::{Error, Result};

/// Incoming edges grouped by destination node (CSR layout).
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeIndex {
    num_nodes: usize,
    offsets: Vec<usize>,
    src: Vec<usize>,
    rel: Vec<usize>,
}

impl EdgeIndex {
    /// Builds the index from `(dst, src, rel)` triples. Edges keep their
    /// relative order within each destination.
    pub fn new(num_nodes: usize, edges: &[(usize, usize, usize)]) -> Result<Self> {
        let mut counts = vec![0usize; num_nodes + 1];
        for &(dst, src, _) in edges {
            if dst >= num_nodes || src >= num_nodes {
                return Err(Error::invalid(
                    "edge_index",
                    format!("edge ({dst}, {src}) out of range for {num_nodes} nodes"),
                ));
            }
            counts[dst + 1] += 1;
        }
        for i in 0..num_nodes {
            counts[i + 1] += counts[i];
        }
        let offsets = counts.clone();
        let mut cursor = counts;
        let mut src = vec![0; edges.len()];
        let mut rel = vec![0; edges.len()];
        for &(dst, s, r) in edges {
            let slot = cursor[dst];
            cursor[dst] += 1;
            src[slot] = s;
            rel[slot] = r;
        }
        Ok(EdgeIndex {
            num_nodes,
            offsets,
            src,
            rel,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    /// Edge slots whose destination is `u`.
    pub fn incoming(&self, u: usize) -> std::ops::Range<usize> {
        self.offsets[u]..self.offsets[u + 1]
    }

    pub fn source(&self, e: usize) -> usize {
        self.src[e]
    }

    pub fn relation(&self, e: usize) -> usize {
        self.rel[e]
    }

    pub fn max_relation(&self) -> Option<usize> {
        self.rel.iter().copied().max()
    }
}

/// Sizes shared by all attention buffers.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnDims {
    pub heads: usize,
    pub dim: usize,
}

pub(crate) struct AttnInputs<'a> {
    pub q: &'a [Real],
    pub k: &'a [Real],
    pub v: &'a [Real],
    pub x: &'a [Real],
    pub w1: &'a [Real],
    pub w2: &'a [Real],
}

#[inline]
fn matvec(w: &[Real], x: &[Real], out: &mut [Real]) {
    let d = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(&w[i * d..(i + 1) * d], x);
    }
}

/// `gx += wᵀ g`, `gw += g ⊗ x`
#[inline]
fn matvec_backward(w: &[Real], x: &[Real], g: &[Real], gx: &mut [Real], gw: Option<&mut [Real]>) {
    let d = x.len();
    for (i, &gi) in g.iter().enumerate() {
        let row = &w[i * d..(i + 1) * d];
        for (gxj, &wij) in gx.iter_mut().zip(row) {
            *gxj += gi * wij;
        }
    }
    if let Some(gw) = gw {
        for (i, &gi) in g.iter().enumerate() {
            for (gwij, &xj) in gw[i * d..(i + 1) * d].iter_mut().zip(x) {
                *gwij += gi * xj;
            }
        }
    }
}

pub(crate) fn forward(inp: &AttnInputs, edges: &EdgeIndex, dims: AttnDims) -> (Vec<Real>, Vec<Real>) {
    let (c, d) = (dims.heads, dims.dim);
    let scale = 1.0 / (d as Real).sqrt();
    let n = edges.num_nodes;
    let mut out = vec![0.0; n * c * d];
    let mut alpha = vec![0.0; edges.num_edges() * c];
    let mut kx = vec![0.0; d];
    let mut a = vec![0.0; d];
    let mut vx = vec![0.0; d];
    let mut m = vec![0.0; d];
    for u in 0..n {
        let seg = edges.incoming(u);
        if seg.is_empty() {
            continue;
        }
        for h in 0..c {
            let qu = &inp.q[(u * c + h) * d..][..d];
            let mut max = Real::NEG_INFINITY;
            for e in seg.clone() {
                let (s, r) = (edges.src[e], edges.rel[e]);
                let xr = &inp.x[(r * c + h) * d..][..d];
                circ_correlate(&inp.k[(s * c + h) * d..][..d], xr, &mut kx);
                matvec(&inp.w1[(r * c + h) * d * d..][..d * d], &kx, &mut a);
                let logit = scale * dot(qu, &a);
                alpha[e * c + h] = logit;
                max = max.max(logit);
            }
            let mut z = 0.0;
            for e in seg.clone() {
                let p = (alpha[e * c + h] - max).exp();
                alpha[e * c + h] = p;
                z += p;
            }
            let ou = &mut out[(u * c + h) * d..][..d];
            for e in seg.clone() {
                let w = alpha[e * c + h] / z;
                alpha[e * c + h] = w;
                let (s, r) = (edges.src[e], edges.rel[e]);
                let xr = &inp.x[(r * c + h) * d..][..d];
                circ_correlate(&inp.v[(s * c + h) * d..][..d], xr, &mut vx);
                matvec(&inp.w2[(r * c + h) * d * d..][..d * d], &vx, &mut m);
                for (o, mi) in ou.iter_mut().zip(&m) {
                    *o += w * mi;
                }
            }
        }
    }
    (out, alpha)
}

/// Gradient buffers; `None` entries are skipped.
pub(crate) struct AttnGrads<'a> {
    pub q: Option<&'a mut [Real]>,
    pub k: Option<&'a mut [Real]>,
    pub v: Option<&'a mut [Real]>,
    pub x: Option<&'a mut [Real]>,
    pub w1: Option<&'a mut [Real]>,
    pub w2: Option<&'a mut [Real]>,
}

pub(crate) fn backward(
    inp: &AttnInputs,
    edges: &EdgeIndex,
    dims: AttnDims,
    alpha: &[Real],
    grad_out: &[Real],
    grads: &mut AttnGrads,
) {
    let (c, d) = (dims.heads, dims.dim);
    let scale = 1.0 / (d as Real).sqrt();
    let mut kx = vec![0.0; d];
    let mut a = vec![0.0; d];
    let mut dm = vec![0.0; d];
    let mut da = vec![0.0; d];
    let mut dvx = vec![0.0; d];
    let mut dkx = vec![0.0; d];
    let mut vx_seg: Vec<Real> = Vec::new();
    let mut dalpha: Vec<Real> = Vec::new();
    let mut m = vec![0.0; d];
    for u in 0..edges.num_nodes {
        let seg = edges.incoming(u);
        if seg.is_empty() {
            continue;
        }
        let len = seg.len();
        for h in 0..c {
            let gu = &grad_out[(u * c + h) * d..][..d];
            if gu.iter().all(|&g| g == 0.0) {
                continue;
            }
            let qu = &inp.q[(u * c + h) * d..][..d];
            vx_seg.clear();
            vx_seg.resize(len * d, 0.0);
            dalpha.clear();
            dalpha.resize(len, 0.0);
            let mut s_acc = 0.0;
            for (i, e) in seg.clone().enumerate() {
                let (s, r) = (edges.src[e], edges.rel[e]);
                let xr = &inp.x[(r * c + h) * d..][..d];
                let vx = &mut vx_seg[i * d..(i + 1) * d];
                circ_correlate(&inp.v[(s * c + h) * d..][..d], xr, vx);
                matvec(&inp.w2[(r * c + h) * d * d..][..d * d], vx, &mut m);
                dalpha[i] = dot(gu, &m);
                s_acc += alpha[e * c + h] * dalpha[i];
            }
            for (i, e) in seg.clone().enumerate() {
                let (s, r) = (edges.src[e], edges.rel[e]);
                let al = alpha[e * c + h];
                let xr = &inp.x[(r * c + h) * d..][..d];
                let woff = (r * c + h) * d * d;
                let noff = (s * c + h) * d;
                let roff = (r * c + h) * d;

                // message branch
                for (dmj, &gj) in dm.iter_mut().zip(gu) {
                    *dmj = al * gj;
                }
                let vx = &vx_seg[i * d..(i + 1) * d];
                dvx.iter_mut().for_each(|x| *x = 0.0);
                matvec_backward(
                    &inp.w2[woff..woff + d * d],
                    vx,
                    &dm,
                    &mut dvx,
                    grads.w2.as_deref_mut().map(|g| &mut g[woff..woff + d * d]),
                );
                circ_correlate_backward(
                    &dvx,
                    &inp.v[noff..noff + d],
                    xr,
                    grads.v.as_deref_mut().map(|g| &mut g[noff..noff + d]),
                    grads.x.as_deref_mut().map(|g| &mut g[roff..roff + d]),
                );

                // attention branch
                let dlogit = al * (dalpha[i] - s_acc) * scale;
                if dlogit == 0.0 {
                    continue;
                }
                circ_correlate(&inp.k[noff..noff + d], xr, &mut kx);
                matvec(&inp.w1[woff..woff + d * d], &kx, &mut a);
                if let Some(gq) = grads.q.as_deref_mut() {
                    for (g, &aj) in gq[(u * c + h) * d..][..d].iter_mut().zip(&a) {
                        *g += dlogit * aj;
                    }
                }
                for (daj, &qj) in da.iter_mut().zip(qu) {
                    *daj = dlogit * qj;
                }
                dkx.iter_mut().for_each(|x| *x = 0.0);
                matvec_backward(
                    &inp.w1[woff..woff + d * d],
                    &kx,
                    &da,
                    &mut dkx,
                    grads.w1.as_deref_mut().map(|g| &mut g[woff..woff + d * d]),
                );
                circ_correlate_backward(
                    &dkx,
                    &inp.k[noff..noff + d],
                    xr,
                    grads.k.as_deref_mut().map(|g| &mut g[noff..noff + d]),
                    grads.x.as_deref_mut().map(|g| &mut g[roff..roff + d]),
                );
            }
        }
    }
}
