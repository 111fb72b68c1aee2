//! Triple similarity functions.
//!
//! Each scorer has a plain single-triple form over slices and a graph form
//! that scores a batch of `(head, relation)` queries against every entity.
//! Higher scores mean more plausible triples.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{xavier_bound, ParamStore};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScorerKind {
    TransE,
    DistMult,
    ComplEx,
    SimplE,
    ConvE,
}

impl ScorerKind {
    pub fn name(self) -> &'static str {
        match self {
            ScorerKind::TransE => "transe",
            ScorerKind::DistMult => "distmult",
            ScorerKind::ComplEx => "complex",
            ScorerKind::SimplE => "simple",
            ScorerKind::ConvE => "conve",
        }
    }
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "transe" => ScorerKind::TransE,
            "distmult" => ScorerKind::DistMult,
            "complex" => ScorerKind::ComplEx,
            "simple" => ScorerKind::SimplE,
            "conve" => ScorerKind::ConvE,
            other => return Err(Error::Config(format!("unknown scorer `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScorerConfig {
    pub kind: ScorerKind,
    pub dim: usize,
    /// Norm order for TransE, 1 or 2.
    pub transe_norm: u8,
    pub reshape_rows: usize,
    pub reshape_cols: usize,
    pub n_filters: usize,
    pub filter_h: usize,
    pub filter_w: usize,
    pub hidden_dropout: Real,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            kind: ScorerKind::ConvE,
            dim: 200,
            transe_norm: 2,
            reshape_rows: 10,
            reshape_cols: 20,
            n_filters: 32,
            filter_h: 3,
            filter_w: 3,
            hidden_dropout: 0.2,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.dim == 0 {
            return bad("scorer dimension must be positive".into());
        }
        match self.kind {
            ScorerKind::TransE if self.transe_norm != 1 && self.transe_norm != 2 => {
                bad(format!("transe norm must be 1 or 2, got {}", self.transe_norm))
            }
            ScorerKind::ComplEx | ScorerKind::SimplE if self.dim % 2 != 0 => {
                bad(format!("{} needs an even dimension, got {}", self.kind, self.dim))
            }
            ScorerKind::ConvE => {
                if self.reshape_rows * self.reshape_cols != self.dim {
                    return bad(format!(
                        "conve reshape {}x{} does not cover dimension {}",
                        self.reshape_rows, self.reshape_cols, self.dim
                    ));
                }
                if self.n_filters == 0 || self.filter_h == 0 || self.filter_w == 0 {
                    return bad("conve filters must be non-empty".into());
                }
                if self.filter_h > 2 * self.reshape_rows || self.filter_w > self.reshape_cols {
                    return bad("conve filter larger than the stacked input".into());
                }
                if !(0.0..1.0).contains(&self.hidden_dropout) {
                    return bad(format!("hidden dropout {} outside [0, 1)", self.hidden_dropout));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Length of the flattened convolution output.
    pub fn conve_flat_dim(&self) -> usize {
        self.n_filters * (2 * self.reshape_rows - self.filter_h + 1) * (self.reshape_cols - self.filter_w + 1)
    }

    /// Registers learnable scorer weights; only ConvE has any.
    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        if self.kind != ScorerKind::ConvE {
            return Ok(());
        }
        let (f, fh, fw) = (self.n_filters, self.filter_h, self.filter_w);
        let fb = xavier_bound(fh * fw, f * fh * fw);
        store.insert("conve.filters", Tensor::uniform(vec![f, 1, fh, fw], fb, rng))?;
        store.insert("conve.filter_bias", Tensor::zeros(vec![f]))?;
        let flat = self.conve_flat_dim();
        store.insert(
            "conve.proj",
            Tensor::uniform(vec![flat, self.dim], xavier_bound(flat, self.dim), rng),
        )?;
        store.insert("conve.proj_bias", Tensor::zeros(vec![self.dim]))?;
        Ok(())
    }
}

/// Graph handles of the ConvE weights.
#[derive(Clone, Copy, Debug)]
pub struct ConvEVars {
    pub filters: Var,
    pub filter_bias: Var,
    pub proj: Var,
    pub proj_bias: Var,
}

impl ConvEVars {
    pub fn lookup(store: &ParamStore, vars: &[Var]) -> Result<Self> {
        let get = |name: &str| store.index_of(name).map(|i| vars[i]);
        Ok(ConvEVars {
            filters: get("conve.filters")?,
            filter_bias: get("conve.filter_bias")?,
            proj: get("conve.proj")?,
            proj_bias: get("conve.proj_bias")?,
        })
    }
}

fn check_dims(op: &'static str, h: &[Real], r: &[Real], t: &[Real]) -> Result<()> {
    if h.len() != r.len() || h.len() != t.len() {
        return Err(Error::shape(op, &[h.len(), r.len()], &[t.len()]));
    }
    Ok(())
}

fn check_even(op: &'static str, d: usize) -> Result<()> {
    if d % 2 != 0 || d == 0 {
        return Err(Error::invalid(op, format!("dimension {d} is not even")));
    }
    Ok(())
}

/// `−‖h + r − t‖_p`
pub fn score_transe(h: &[Real], r: &[Real], t: &[Real], p: u8) -> Result<Real> {
    check_dims("transe", h, r, t)?;
    let diffs = h.iter().zip(r).zip(t).map(|((a, b), c)| a + b - c);
    match p {
        1 => Ok(-diffs.map(Real::abs).sum::<Real>()),
        2 => Ok(-diffs.map(|x| x * x).sum::<Real>().sqrt()),
        _ => Err(Error::invalid("transe", format!("unsupported norm p={p}"))),
    }
}

/// Three-way dot product `Σ h·r·t`.
pub fn score_distmult(h: &[Real], r: &[Real], t: &[Real]) -> Result<Real> {
    check_dims("distmult", h, r, t)?;
    Ok(h.iter().zip(r).zip(t).map(|((a, b), c)| a * b * c).sum())
}

/// `Re⟨h, r, conj(t)⟩` with real parts in the first half of each vector.
pub fn score_complex(h: &[Real], r: &[Real], t: &[Real]) -> Result<Real> {
    check_dims("complex", h, r, t)?;
    check_even("complex", h.len())?;
    let n = h.len() / 2;
    let mut s = 0.0;
    for i in 0..n {
        let (hr, hi) = (h[i], h[n + i]);
        let (rr, ri) = (r[i], r[n + i]);
        let (tr, ti) = (t[i], t[n + i]);
        let (qr, qi) = (hr * rr - hi * ri, hr * ri + hi * rr);
        s += qr * tr + qi * ti;
    }
    Ok(s)
}

/// Mean of the three-way products over the two halves.
pub fn score_simple(h: &[Real], r: &[Real], t: &[Real]) -> Result<Real> {
    check_dims("simple", h, r, t)?;
    check_even("simple", h.len())?;
    let n = h.len() / 2;
    let first = score_distmult(&h[..n], &r[..n], &t[..n])?;
    let second = score_distmult(&h[n..], &r[n..], &t[n..])?;
    Ok(0.5 * (first + second))
}

/// Scores `B` queries against `N` candidate rows: `heads, rels: [B, d]`,
/// `tails: [N, d]`, result `[B, N]`.
#[allow(clippy::too_many_arguments)]
pub fn score_all<R: Rng + ?Sized>(
    g: &mut Graph,
    cfg: &ScorerConfig,
    conve: Option<&ConvEVars>,
    heads: Var,
    rels: Var,
    tails: Var,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let d = cfg.dim;
    if g.shape(heads) != g.shape(rels) || g.shape(heads).len() != 2 || g.shape(heads)[1] != d {
        return Err(Error::shape("score_all", g.shape(heads), g.shape(rels)));
    }
    if g.shape(tails).len() != 2 || g.shape(tails)[1] != d {
        return Err(Error::shape("score_all", g.shape(heads), g.shape(tails)));
    }
    match cfg.kind {
        ScorerKind::TransE => {
            let q = g.add(heads, rels)?;
            let dist = g.pairwise_distance(q, tails, cfg.transe_norm)?;
            g.neg(dist)
        }
        ScorerKind::DistMult => {
            let q = g.mul(heads, rels)?;
            g.matmul_t(q, tails)
        }
        ScorerKind::SimplE => {
            let q = g.mul(heads, rels)?;
            let s = g.matmul_t(q, tails)?;
            g.scale(s, 0.5)
        }
        ScorerKind::ComplEx => {
            let n = d / 2;
            let hr = g.narrow(heads, 1, 0, n)?;
            let hi = g.narrow(heads, 1, n, n)?;
            let rr = g.narrow(rels, 1, 0, n)?;
            let ri = g.narrow(rels, 1, n, n)?;
            let a = g.mul(hr, rr)?;
            let b = g.mul(hi, ri)?;
            let re = g.sub(a, b)?;
            let c = g.mul(hr, ri)?;
            let e = g.mul(hi, rr)?;
            let im = g.add(c, e)?;
            let q = g.concat(&[re, im], 1)?;
            g.matmul_t(q, tails)
        }
        ScorerKind::ConvE => {
            let p = conve.ok_or_else(|| Error::invalid("conve", "missing scorer parameters"))?;
            let b = g.shape(heads)[0];
            let (rows, cols) = (cfg.reshape_rows, cfg.reshape_cols);
            let hm = g.reshape(heads, vec![b, 1, rows, cols])?;
            let rm = g.reshape(rels, vec![b, 1, rows, cols])?;
            let stacked = g.concat(&[hm, rm], 2)?;
            let conv = g.conv2d(stacked, p.filters, Some(p.filter_bias))?;
            let act = g.relu(conv)?;
            let flat = g.reshape(act, vec![b, cfg.conve_flat_dim()])?;
            let proj = g.matmul(flat, p.proj)?;
            let proj = g.add_bias(proj, p.proj_bias)?;
            let proj = g.dropout(proj, cfg.hidden_dropout, training, rng)?;
            let hidden = g.relu(proj)?;
            g.matmul_t(hidden, tails)
        }
    }
}

/// ConvE scores of one `(h, r)` against every row of `tails`, eval mode.
pub fn score_conve(h: &[Real], r: &[Real], tails: &Tensor, cfg: &ScorerConfig, params: &ParamStore) -> Result<Vec<Real>> {
    if cfg.kind != ScorerKind::ConvE {
        return Err(Error::invalid("conve", "scorer config is not conve"));
    }
    let mut g = Graph::new();
    let vars = params.constants(&mut g);
    let p = ConvEVars::lookup(params, &vars)?;
    let hv = g.constant(Tensor::new(vec![1, h.len()], h.to_vec())?);
    let rv = g.constant(Tensor::new(vec![1, r.len()], r.to_vec())?);
    let tv = g.constant(tails.clone());
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let s = score_all(&mut g, cfg, Some(&p), hv, rv, tv, false, &mut rng)?;
    Ok(g.value(s).data().to_vec())
}
