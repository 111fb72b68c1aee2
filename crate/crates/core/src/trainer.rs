//! Training loop.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::anneal::{AnnealConfig, Annealer, Proposal};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::{self, EvalOptions};
use crate::kg::{KnowledgeGraph, Split};
use crate::losses::{self, Anchor, ContrastiveConfig, LossKind};
use crate::model::Model;
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::tensor::{Graph, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TemperatureStrategy {
    Fixed,
    Dynamic,
}

impl fmt::Display for TemperatureStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemperatureStrategy::Fixed => "fixed",
            TemperatureStrategy::Dynamic => "dynamic",
        })
    }
}

impl FromStr for TemperatureStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(TemperatureStrategy::Fixed),
            "dynamic" => Ok(TemperatureStrategy::Dynamic),
            other => Err(Error::Config(format!("unknown temperature strategy `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: Real,
    /// `η_min = lr · lr_min_ratio` for the cosine schedule.
    pub lr_min_ratio: Real,
    pub adamw: AdamWConfig,
    pub eval_every: usize,
    pub patience: usize,
    /// Stop after `3 · patience` evaluations without a new best.
    pub early_stop: bool,
    pub seed: u64,
    pub loss: LossKind,
    pub contrastive: ContrastiveConfig,
    /// Layer-normalise candidate scores before the contrastive loss.
    pub normalize_scores: bool,
    pub margin: Real,
    pub temperature: TemperatureStrategy,
    pub eval: EvalOptions,
    pub checked: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 256,
            lr: 1e-3,
            lr_min_ratio: 0.01,
            adamw: AdamWConfig::default(),
            eval_every: 1,
            patience: 50,
            early_stop: true,
            seed: 0,
            loss: LossKind::Nc,
            contrastive: ContrastiveConfig::default(),
            normalize_scores: true,
            margin: 1.0,
            temperature: TemperatureStrategy::Dynamic,
            eval: EvalOptions::default(),
            checked: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.lr", self.lr),
            ("train.beta1", self.adamw.beta1),
            ("train.beta2", self.adamw.beta2),
            ("train.eps", self.adamw.eps),
            ("loss.margin", self.margin),
        ];
        for (k, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if self.adamw.beta1 >= 1.0 || self.adamw.beta2 >= 1.0 {
            return Err(Error::Config("adam betas must be below 1".into()));
        }
        if self.adamw.weight_decay < 0.0 || !(0.0..=1.0).contains(&self.lr_min_ratio) {
            return Err(Error::Config("weight decay and lr_min_ratio must be non-negative".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.patience == 0 {
            return Err(Error::Config("batch size, eval interval and patience must be positive".into()));
        }
        self.contrastive.validate()
    }
}

/// One line of the metric history.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub loss: Real,
    pub val_mrr: Option<f64>,
    pub tau: Real,
    pub lr: Real,
}

/// Writes the history CSV: a `# seed=` line, then
/// `epoch,loss,val_mrr,tau,lr` rows.
pub fn write_history<W: Write>(mut out: W, seed: u64, rows: &[HistoryRow]) -> Result<()> {
    writeln!(out, "# seed={seed}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "loss", "val_mrr", "tau", "lr"])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            format!("{:.9}", r.loss),
            r.val_mrr.map_or(String::new(), |m| format!("{m:.6}")),
            format!("{:.6}", r.tau),
            format!("{:.9e}", r.lr),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParamStore,
    pub optimizer: AdamW,
    pub annealer: Annealer,
    pub epoch: usize,
    pub best_mrr: Option<f64>,
}

impl TrainState {
    pub fn to_checkpoint(&self, fingerprint: u64) -> Checkpoint {
        let mut c = Checkpoint::new(fingerprint);
        for (name, t) in self.params.iter() {
            c.push_tensor(format!("param.{name}"), t);
        }
        for (i, (name, _)) in self.params.iter().enumerate() {
            c.push_reals(format!("adam.m.{name}"), &self.optimizer.m[i]);
            c.push_reals(format!("adam.v.{name}"), &self.optimizer.v[i]);
        }
        c.push_u64s("adam.step", &[self.optimizer.step]);
        c.push_u64s("state.epoch", &[self.epoch as u64]);
        c.push_reals("state.best_mrr", &[self.best_mrr.map_or(Real::NAN, |m| m as Real)]);
        let a = &self.annealer;
        c.push_reals("anneal.tau", &[a.tau]);
        c.push_reals("anneal.temperature", &[a.temperature]);
        c.push_reals("anneal.best_mrr", &[a.best_mrr.unwrap_or(Real::NAN)]);
        c.push_u64s("anneal.counters", &[a.since_improvement as u64, a.proposals]);
        if let Some(p) = a.last_proposal {
            c.push_reals("anneal.last_proposal", &[p.previous_tau, p.best_at_adoption]);
        }
        let seed = a.rng.get_seed();
        let seed_words: Vec<u64> = seed
            .chunks(8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        c.push_u64s("anneal.rng_seed", &seed_words);
        let pos = a.rng.get_word_pos();
        c.push_u64s("anneal.rng_pos", &[pos as u64, (pos >> 64) as u64, a.rng.get_stream()]);
        c
    }

    /// Restores a state; `params` must name every parameter in order.
    pub fn from_checkpoint(c: &Checkpoint, names: &[String], anneal: AnnealConfig, adamw: AdamWConfig) -> Result<Self> {
        let mut params = ParamStore::default();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for name in names {
            params.insert(name, c.tensor(&format!("param.{name}"))?)?;
            m.push(c.tensor(&format!("adam.m.{name}"))?.into_data());
            v.push(c.tensor(&format!("adam.v.{name}"))?.into_data());
        }
        let one = |name: &str| -> Result<Real> { Ok(c.tensor(name)?.data()[0]) };
        let opt_nan = |x: Real| if x.is_nan() { None } else { Some(x) };
        let counters = c.u64s("anneal.counters")?;
        let seed_words = c.u64s("anneal.rng_seed")?;
        let pos = c.u64s("anneal.rng_pos")?;
        if counters.len() != 2 || seed_words.len() != 4 || pos.len() != 3 {
            return Err(Error::Checkpoint("malformed annealer state".into()));
        }
        let mut seed = [0u8; 32];
        for (i, w) in seed_words.iter().enumerate() {
            seed[i * 8..(i + 1) * 8].copy_from_slice(&w.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(pos[2]);
        rng.set_word_pos(pos[0] as u128 | ((pos[1] as u128) << 64));
        let last_proposal = match c.tensor("anneal.last_proposal") {
            Ok(t) => Some(Proposal {
                previous_tau: t.data()[0],
                best_at_adoption: t.data()[1],
            }),
            Err(_) => None,
        };
        Ok(TrainState {
            params,
            optimizer: AdamW {
                cfg: adamw,
                step: c.u64s("adam.step")?.first().copied().unwrap_or(0),
                m,
                v,
            },
            annealer: Annealer {
                cfg: anneal,
                tau: one("anneal.tau")?,
                best_mrr: opt_nan(one("anneal.best_mrr")?),
                since_improvement: counters[0] as usize,
                temperature: one("anneal.temperature")?,
                last_proposal,
                proposals: counters[1],
                rng,
            },
            epoch: c.u64s("state.epoch")?.first().copied().unwrap_or(0) as usize,
            best_mrr: opt_nan(one("state.best_mrr")?).map(|x| x as f64),
        })
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutput {
    /// State at the best validation MRR (or the initial state if no
    /// evaluation ran).
    pub best: TrainState,
    /// State after the last completed epoch.
    pub last: TrainState,
    pub history: Vec<HistoryRow>,
    /// Epoch at which the loss became non-finite, if it did.
    pub diverged: Option<usize>,
}

/// Callbacks for streaming artefacts while training.
pub trait TrainObserver {
    fn on_epoch(&mut self, _row: &HistoryRow) -> Result<()> {
        Ok(())
    }

    fn on_best(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

fn batch_loss(
    g: &mut Graph,
    kg: &KnowledgeGraph,
    scores: crate::tensor::Var,
    batch: &[crate::kg::TripleId],
    cfg: &TrainConfig,
    tau: Real,
    rng: &mut ChaCha8Rng,
) -> Result<crate::tensor::Var> {
    match cfg.loss {
        LossKind::Nc | LossKind::Mr => {
            let mut anchors = Vec::with_capacity(batch.len());
            for (row, t) in batch.iter().enumerate() {
                let (p, n) = losses::sample_pairs(kg, *t, &cfg.contrastive, rng)?;
                anchors.push(Anchor {
                    row,
                    positives: p.iter().map(|e| e.index()).collect(),
                    negatives: n.iter().map(|e| e.index()).collect(),
                });
            }
            if cfg.loss == LossKind::Nc {
                losses::nc_loss(g, scores, &anchors, cfg.contrastive.q, tau, cfg.normalize_scores)
            } else {
                for a in &mut anchors {
                    a.positives.truncate(1);
                }
                losses::mr_loss(g, scores, &anchors, cfg.margin)
            }
        }
        LossKind::Mp => {
            let pos: Vec<usize> = batch.iter().map(|t| t.tail.index()).collect();
            losses::mp_loss(g, scores, &pos)
        }
        LossKind::Bce => {
            let n = kg.num_entities();
            let mut labels = Tensor::zeros(vec![batch.len(), n]);
            for (row, t) in batch.iter().enumerate() {
                for e in kg.positives_of(t.head, t.relation) {
                    labels.data_mut()[row * n + e.index()] = 1.0;
                }
            }
            losses::bce_loss(g, scores, &labels)
        }
    }
}

/// Trains `model` on the augmented training split of `kg`.
///
/// Per epoch: shuffle anchors, then for every batch encode the whole graph,
/// score the batch against all entities, apply the loss and one AdamW step.
/// Every `eval_every` epochs the filtered validation MRR drives the
/// temperature annealer and best-state tracking.
pub fn train(kg: &KnowledgeGraph, model: &mut Model, cfg: &TrainConfig, observer: &mut dyn TrainObserver) -> Result<TrainOutput> {
    cfg.validate()?;
    let anchors = kg.train_augmented();
    if cfg.epochs > 0 && cfg.batch_size > anchors.len() {
        return Err(Error::Config(format!(
            "batch size {} exceeds {} training anchors",
            cfg.batch_size,
            anchors.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let anneal_cfg = AnnealConfig {
        patience: cfg.patience,
        initial_tau: cfg.contrastive.tau,
        ..AnnealConfig::default()
    };
    let mut state = TrainState {
        params: model.params.clone(),
        optimizer: AdamW::new(cfg.adamw.clone(), &model.params),
        annealer: Annealer::new(anneal_cfg, cfg.seed ^ 0x5eed_a11e),
        epoch: 0,
        best_mrr: None,
    };
    let mut best = state.clone();
    observer.on_best(&best)?;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..anchors.len()).collect();
    let mut evals_since_best = 0usize;
    let eta_min = cfg.lr * cfg.lr_min_ratio;

    for epoch in 1..=cfg.epochs {
        let lr = cosine_lr(epoch - 1, cfg.epochs, cfg.lr, eta_min);
        let tau = match cfg.temperature {
            TemperatureStrategy::Dynamic => state.annealer.tau,
            TemperatureStrategy::Fixed => cfg.contrastive.tau,
        };
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| anchors[i]).collect();
            let mut g = Graph::new().with_checked(cfg.checked);
            let bound = model.bind(&mut g, true)?;
            let enc = model.encode(&mut g, &bound, true, &mut rng)?;
            let queries: Vec<_> = batch.iter().map(|t| (t.head, t.relation)).collect();
            let scores = model.score(&mut g, &bound, &enc, &queries, true, &mut rng)?;
            let loss = batch_loss(&mut g, kg, scores, &batch, cfg, tau, &mut rng)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                warn!("loss became non-finite at epoch {epoch}");
                return Ok(TrainOutput {
                    best,
                    last: state,
                    history,
                    diverged: Some(epoch),
                });
            }
            g.backward(loss)?;
            let grads: Vec<_> = bound.vars.iter().map(|&v| g.take_grad(v)).collect();
            if cfg.checked && grads.iter().flatten().any(|gr| gr.iter().any(|x| !x.is_finite())) {
                return Err(Error::NonFinite {
                    op: format!("gradient at epoch {epoch}"),
                });
            }
            state.optimizer.update(&mut model.params, &grads, lr)?;
            loss_sum += lv;
            batches += 1;
        }
        state.params = model.params.clone();
        state.epoch = epoch;
        let loss = loss_sum / batches.max(1) as Real;
        debug!("epoch {epoch}: loss {loss:.6}, lr {lr:.3e}, tau {tau:.3}");

        let mut val_mrr = None;
        if epoch % cfg.eval_every == 0 {
            let frozen = model.freeze()?;
            let report = eval::evaluate(kg, &frozen, Split::Valid, &cfg.eval)?;
            val_mrr = Some(report.mrr);
            if cfg.temperature == TemperatureStrategy::Dynamic {
                state.annealer.observe(report.mrr as Real);
            }
            if state.best_mrr.map_or(true, |b| report.mrr > b) {
                state.best_mrr = Some(report.mrr);
                best = state.clone();
                observer.on_best(&best)?;
                evals_since_best = 0;
            } else {
                evals_since_best += 1;
            }
            info!("epoch {epoch}: loss {loss:.6}, val mrr {:.4}", report.mrr);
        }
        let row = HistoryRow {
            epoch,
            loss,
            val_mrr,
            tau,
            lr,
        };
        observer.on_epoch(&row)?;
        history.push(row);
        if cfg.early_stop && evals_since_best >= 3 * cfg.patience {
            info!("early stop at epoch {epoch}");
            break;
        }
    }
    Ok(TrainOutput {
        best,
        last: state,
        history,
        diverged: None,
    })
}
