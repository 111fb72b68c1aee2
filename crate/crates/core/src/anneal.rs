//! Temperature control driven by validation MRR.
//!
//! While MRR keeps improving τ stays put. After `patience` evaluations
//! without a new best, a new τ is proposed around the current one. If the
//! previous proposal did not lead to a new best, the annealer may first
//! fall back to the τ it replaced, with a probability that grows with the
//! MRR lost since that proposal and shrinks as the annealing temperature
//! cools.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::losses::{TAU_MAX, TAU_MIN};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct AnnealConfig {
    pub patience: usize,
    pub initial_tau: Real,
    pub initial_temperature: Real,
    pub decay: Real,
    pub step: Real,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        AnnealConfig {
            patience: 50,
            initial_tau: 1.0,
            initial_temperature: 1.0,
            decay: 0.95,
            step: 0.15,
        }
    }
}

/// Record of the most recent proposal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    /// τ in effect before the proposal.
    pub previous_tau: Real,
    /// Best MRR when the proposal was adopted.
    pub best_at_adoption: Real,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Annealer {
    pub cfg: AnnealConfig,
    pub tau: Real,
    pub best_mrr: Option<Real>,
    pub since_improvement: usize,
    pub temperature: Real,
    pub last_proposal: Option<Proposal>,
    pub proposals: u64,
    pub rng: ChaCha8Rng,
}

impl Annealer {
    pub fn new(cfg: AnnealConfig, seed: u64) -> Self {
        Annealer {
            tau: cfg.initial_tau.clamp(TAU_MIN, TAU_MAX),
            temperature: cfg.initial_temperature,
            cfg,
            best_mrr: None,
            since_improvement: 0,
            last_proposal: None,
            proposals: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Feeds one validation MRR; returns `true` when τ changed.
    pub fn observe(&mut self, mrr: Real) -> bool {
        if self.best_mrr.map_or(true, |b| mrr > b) {
            self.best_mrr = Some(mrr);
            self.since_improvement = 0;
            return false;
        }
        self.since_improvement += 1;
        if self.since_improvement < self.cfg.patience {
            return false;
        }
        let best = self.best_mrr.unwrap_or(mrr);
        let mut base = self.tau;
        if let Some(p) = self.last_proposal {
            if best <= p.best_at_adoption {
                let delta = mrr - p.best_at_adoption;
                let revert = 1.0 - (delta.min(0.0) / self.temperature).exp();
                if self.rng.gen::<Real>() < revert {
                    base = p.previous_tau;
                }
            }
        }
        let step = self.cfg.step;
        let proposal = (base + self.rng.gen_range(-step..=step)).clamp(TAU_MIN, TAU_MAX);
        let old = self.tau;
        self.last_proposal = Some(Proposal {
            previous_tau: base,
            best_at_adoption: best,
        });
        self.tau = proposal;
        self.temperature *= self.cfg.decay;
        self.since_improvement = 0;
        self.proposals += 1;
        old != proposal
    }
}
