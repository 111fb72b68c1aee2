//! Training objectives over candidate scores.
//!
//! All losses take a `[B, N]` score matrix on a [`Graph`] (one row per
//! anchor, one column per candidate entity) and return a scalar node.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, TripleId};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Epsilon of the score normalisation; small so that an affine change of
/// the raw scores leaves the normalised scores unchanged.
pub const SCORE_NORM_EPS: Real = 1e-9;

pub const TAU_MIN: Real = 0.1;
pub const TAU_MAX: Real = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Node-based contrastive loss.
    Nc,
    Bce,
    /// Softmax cross-entropy of the positive over all entities.
    Mp,
    /// Margin ranking.
    Mr,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Nc => "nc",
            LossKind::Bce => "bce",
            LossKind::Mp => "mp",
            LossKind::Mr => "mr",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nc" => Ok(LossKind::Nc),
            "bce" => Ok(LossKind::Bce),
            "mp" => Ok(LossKind::Mp),
            "mr" => Ok(LossKind::Mr),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegativeMode {
    All,
    Sampled(usize),
}

impl fmt::Display for NegativeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NegativeMode::All => f.write_str("all"),
            NegativeMode::Sampled(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for NegativeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(NegativeMode::All);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(NegativeMode::Sampled(n)),
            _ => Err(Error::Config(format!(
                "negatives must be `all` or a positive count, got `{s}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub k_plus: usize,
    pub negatives: NegativeMode,
    /// Weight on the negative sum.
    pub q: Real,
    pub tau: Real,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            k_plus: 1,
            negatives: NegativeMode::All,
            q: 1.0,
            tau: 1.0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_plus == 0 {
            return Err(Error::Config("k_plus must be at least 1".into()));
        }
        if !(self.q > 0.0) {
            return Err(Error::Config(format!("negative weight q must be positive, got {}", self.q)));
        }
        if !(TAU_MIN..=TAU_MAX).contains(&self.tau) {
            return Err(Error::Config(format!(
                "temperature {} outside [{TAU_MIN}, {TAU_MAX}]",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Candidate columns of one anchor row.
#[derive(Clone, Debug, PartialEq)]
pub struct Anchor {
    pub row: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl Anchor {
    fn check(&self, cols: usize) -> Result<()> {
        if self.positives.is_empty() {
            return Err(Error::invalid("loss", format!("anchor {} has no positive", self.row)));
        }
        if self.negatives.is_empty() {
            return Err(Error::invalid("loss", format!("anchor {} has no negative", self.row)));
        }
        if self.positives.iter().chain(&self.negatives).any(|&c| c >= cols) {
            return Err(Error::invalid("loss", format!("anchor {} candidate out of range", self.row)));
        }
        if self.positives.iter().any(|p| self.negatives.contains(p)) {
            return Err(Error::invalid(
                "loss",
                format!("anchor {} has overlapping positives and negatives", self.row),
            ));
        }
        Ok(())
    }
}

/// Draws positive and negative tails for a training anchor.
///
/// Positives are the gold tail plus, when `k_plus > 1`, distinct draws from
/// the other known training tails of `(h, r)`. Negatives come from the
/// entities that are not training tails of `(h, r)`, in ascending id order.
pub fn sample_pairs<R: Rng + ?Sized>(
    kg: &KnowledgeGraph,
    anchor: TripleId,
    cfg: &ContrastiveConfig,
    rng: &mut R,
) -> Result<(Vec<EntityId>, Vec<EntityId>)> {
    let known = kg.positives_of(anchor.head, anchor.relation);
    let mut positives = vec![anchor.tail];
    if cfg.k_plus > 1 {
        let others: Vec<EntityId> = known.iter().copied().filter(|&t| t != anchor.tail).collect();
        let take = (cfg.k_plus - 1).min(others.len());
        positives.extend(index::sample(rng, others.len(), take).into_iter().map(|i| others[i]));
    }
    let complement: Vec<EntityId> = (0..kg.num_entities() as u32)
        .map(EntityId)
        .filter(|e| *e != anchor.tail && known.binary_search(e).is_err())
        .collect();
    if complement.is_empty() {
        return Err(Error::invalid(
            "sample_pairs",
            format!("no negative candidates for anchor {anchor:?}"),
        ));
    }
    let negatives = match cfg.negatives {
        NegativeMode::Sampled(n) if n < complement.len() => {
            let mut picks = index::sample(rng, complement.len(), n).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|i| complement[i]).collect()
        }
        _ => complement,
    };
    Ok((positives, negatives))
}

fn stack_scalars(g: &mut Graph, xs: &[Var]) -> Result<Var> {
    let parts = xs
        .iter()
        .map(|&x| g.reshape(x, vec![1]))
        .collect::<Result<Vec<_>>>()?;
    g.concat(&parts, 0)
}

/// Contrastive loss averaged over anchors.
///
/// Per anchor the candidate scores (positives then negatives) are
/// optionally layer-normalised, divided by `tau`, and combined as
/// `−ln(Σ₊ e^{s/τ} / (Σ₊ e^{s/τ} + q·Σ₋ e^{s/τ}))`.
pub fn nc_loss(g: &mut Graph, scores: Var, anchors: &[Anchor], q: Real, tau: Real, normalize: bool) -> Result<Var> {
    if anchors.is_empty() {
        return Err(Error::invalid("nc_loss", "empty batch"));
    }
    if g.shape(scores).len() != 2 {
        return Err(Error::invalid("nc_loss", "scores must be [batch, candidates]"));
    }
    if !(q > 0.0) || !(tau > 0.0) {
        return Err(Error::invalid("nc_loss", format!("q={q} and tau={tau} must be positive")));
    }
    let (rows, cols) = (g.shape(scores)[0], g.shape(scores)[1]);
    let flat = g.reshape(scores, vec![rows * cols])?;
    let mut per_anchor = Vec::with_capacity(anchors.len());
    for a in anchors {
        a.check(cols)?;
        if a.row >= rows {
            return Err(Error::invalid("nc_loss", format!("anchor row {} out of range", a.row)));
        }
        let idx: Vec<usize> = a.positives.iter().chain(&a.negatives).map(|&c| a.row * cols + c).collect();
        let mut s = g.gather(flat, &idx)?;
        if normalize {
            s = g.layer_norm(s, 0, SCORE_NORM_EPS)?;
        }
        let s = g.scale(s, 1.0 / tau)?;
        let k = a.positives.len();
        let pos = g.narrow(s, 0, 0, k)?;
        let neg = g.narrow(s, 0, k, a.negatives.len())?;
        let lse_pos = g.log_sum_exp(pos)?;
        let lse_neg = g.log_sum_exp(neg)?;
        let lse_neg = g.add_scalar(lse_neg, q.ln())?;
        let both = stack_scalars(g, &[lse_pos, lse_neg])?;
        let total = g.log_sum_exp(both)?;
        per_anchor.push(g.sub(total, lse_pos)?);
    }
    let all = stack_scalars(g, &per_anchor)?;
    g.mean(all)
}

/// `−ln softmax(scores[row])[positive]`, averaged over rows.
pub fn mp_loss(g: &mut Graph, scores: Var, positives: &[usize]) -> Result<Var> {
    let shape = g.shape(scores).to_vec();
    if shape.len() != 2 || shape[0] != positives.len() {
        return Err(Error::invalid("mp_loss", "one positive per score row required"));
    }
    if shape[1] < 2 {
        return Err(Error::invalid("mp_loss", "at least two candidates required"));
    }
    if let Some(&p) = positives.iter().find(|&&p| p >= shape[1]) {
        return Err(Error::invalid("mp_loss", format!("positive index {p} out of range")));
    }
    let lse = g.log_sum_exp(scores)?;
    let flat = g.reshape(scores, vec![shape[0] * shape[1]])?;
    let idx: Vec<usize> = positives.iter().enumerate().map(|(b, &p)| b * shape[1] + p).collect();
    let pos = g.gather(flat, &idx)?;
    let diff = g.sub(lse, pos)?;
    g.mean(diff)
}

/// Mean over negatives of `max(0, γ − s⁺ + s⁻)`, averaged over anchors.
/// Each anchor must have exactly one positive.
pub fn mr_loss(g: &mut Graph, scores: Var, anchors: &[Anchor], margin: Real) -> Result<Var> {
    if anchors.is_empty() {
        return Err(Error::invalid("mr_loss", "empty batch"));
    }
    if !(margin > 0.0) {
        return Err(Error::invalid("mr_loss", format!("margin {margin} must be positive")));
    }
    let (rows, cols) = (g.shape(scores)[0], g.shape(scores)[1]);
    let flat = g.reshape(scores, vec![rows * cols])?;
    let mut pos_idx = Vec::new();
    let mut neg_idx = Vec::new();
    let mut weights = Vec::new();
    for a in anchors {
        a.check(cols)?;
        if a.positives.len() != 1 {
            return Err(Error::invalid("mr_loss", "exactly one positive per anchor"));
        }
        let w = 1.0 / (a.negatives.len() * anchors.len()) as Real;
        for &n in &a.negatives {
            pos_idx.push(a.row * cols + a.positives[0]);
            neg_idx.push(a.row * cols + n);
            weights.push(w);
        }
    }
    let pos = g.gather(flat, &pos_idx)?;
    let neg = g.gather(flat, &neg_idx)?;
    let diff = g.sub(neg, pos)?;
    let shifted = g.add_scalar(diff, margin)?;
    let hinge = g.relu(shifted)?;
    let w = g.constant(Tensor::vector(weights));
    let weighted = g.mul(hinge, w)?;
    g.sum(weighted)
}

/// Mean binary cross-entropy with logits; `labels` matches `logits` in shape.
pub fn bce_loss(g: &mut Graph, logits: Var, labels: &Tensor) -> Result<Var> {
    if g.shape(logits) != labels.shape() {
        return Err(Error::shape("bce_loss", g.shape(logits), labels.shape()));
    }
    let sp = g.softplus(logits)?;
    let y = g.constant(labels.clone());
    let yx = g.mul(y, logits)?;
    let l = g.sub(sp, yx)?;
    g.mean(l)
}

/// Plain-value contrastive loss for a single anchor with pre-computed
/// (already normalised) scores.
pub fn nc_loss_value(pos: &[Real], neg: &[Real], q: Real, tau: Real) -> Result<Real> {
    let mut g = Graph::new();
    let mut row = pos.to_vec();
    row.extend_from_slice(neg);
    let s = g.constant(Tensor::new(vec![1, row.len()], row)?);
    let anchor = Anchor {
        row: 0,
        positives: (0..pos.len()).collect(),
        negatives: (pos.len()..pos.len() + neg.len()).collect(),
    };
    let l = nc_loss(&mut g, s, &[anchor], q, tau, false)?;
    Ok(g.value(l).item())
}
