//! Central finite-difference gradient checks.

use std::sync::Arc;

use nckge::kg::{KnowledgeGraph, Triple};
use nckge::losses::{self, Anchor, ContrastiveConfig, NegativeMode};
use nckge::ramha::{self, EncoderVars, Normalization, RamhaConfig};
use nckge::scorers::{self, ConvEVars, ScorerConfig, ScorerKind};
use nckge::tensor::EdgeIndex;
use nckge::{Graph, Real, Result, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: Real = 1e-4;
pub const TOLERANCE: Real = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: Real = 1e-6;

pub type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct Case {
    pub inputs: Vec<Tensor>,
    pub build: Build,
    /// Piecewise-linear ops: coordinates whose one-sided differences
    /// disagree sit on a kink and are skipped.
    pub kinked: bool,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Outcome {
    pub max_rel: Real,
    pub checked: usize,
    pub skipped: usize,
}

impl Outcome {
    pub fn merge(&mut self, o: Outcome) {
        self.max_rel = self.max_rel.max(o.max_rel);
        self.checked += o.checked;
        self.skipped += o.skipped;
    }

    pub fn skip_fraction(&self) -> f64 {
        self.skipped as f64 / (self.checked + self.skipped).max(1) as f64
    }
}

fn rel_error(a: Real, n: Real) -> Real {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Weighted sum of the case output, so every output entry contributes a
/// distinct amount.
fn evaluate(case: &Case, inputs: &[Tensor], weights: &Tensor, grads: bool) -> Result<(Real, Vec<Option<Tensor>>)> {
    let mut g = Graph::new().with_checked(true);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), grads)).collect();
    let out = (case.build)(&mut g, &vars)?;
    let n = g.value(out).numel();
    let flat = g.reshape(out, vec![n])?;
    let w = g.constant(weights.clone());
    let prod = g.mul(flat, w)?;
    let loss = g.sum(prod)?;
    let value = g.value(loss).item();
    if !grads {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    Ok((value, vars.iter().map(|&v| g.grad(v)).collect()))
}

pub fn check(case: &Case, seed: u64) -> Result<Outcome> {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = (case.build)(&mut g, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let weights = Tensor::uniform(vec![g.value(out).numel()], 1.0, &mut rng);

    let (f0, analytic) = evaluate(case, &case.inputs, &weights, true)?;
    let mut outcome = Outcome::default();
    let mut inputs = case.inputs.clone();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + STEP;
            let fp = evaluate(case, &inputs, &weights, false)?.0;
            inputs[i].data_mut()[j] = orig - STEP;
            let fm = evaluate(case, &inputs, &weights, false)?.0;
            inputs[i].data_mut()[j] = orig;
            if case.kinked {
                let (fwd, bwd) = (fp - f0, f0 - fm);
                if (fwd - bwd).abs() > 1e-2 * (fwd.abs() + bwd.abs()) + 1e-12 {
                    outcome.skipped += 1;
                    continue;
                }
            }
            let numeric = (fp - fm) / (2.0 * STEP);
            let a = analytic[i].as_ref().map_or(0.0, |t| t.data()[j]);
            outcome.max_rel = outcome.max_rel.max(rel_error(a, numeric));
            outcome.checked += 1;
        }
    }
    Ok(outcome)
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape.to_vec(), 1.0, rng)
}

fn case(inputs: Vec<Tensor>, kinked: bool, build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        inputs,
        build: Box::new(build),
        kinked,
    }
}

/// Every differentiable op, keyed by name, instantiated for one seed.
pub fn op_cases(seed: u64) -> Vec<(&'static str, Case)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out: Vec<(&'static str, Case)> = Vec::new();
    out.push(("add", case(vec![rand_t(r, &[3, 4]), rand_t(r, &[3, 4])], false, |g, v| g.add(v[0], v[1]))));
    out.push(("sub", case(vec![rand_t(r, &[3, 4]), rand_t(r, &[3, 4])], false, |g, v| g.sub(v[0], v[1]))));
    out.push(("mul", case(vec![rand_t(r, &[3, 4]), rand_t(r, &[3, 4])], false, |g, v| g.mul(v[0], v[1]))));
    out.push(("add_bias", case(vec![rand_t(r, &[3, 4]), rand_t(r, &[4])], false, |g, v| g.add_bias(v[0], v[1]))));
    out.push(("scale", case(vec![rand_t(r, &[5])], false, |g, v| g.scale(v[0], -1.7))));
    out.push(("add_scalar", case(vec![rand_t(r, &[5])], false, |g, v| g.add_scalar(v[0], 0.3))));
    out.push(("neg", case(vec![rand_t(r, &[5])], false, |g, v| g.neg(v[0]))));
    out.push(("relu", case(vec![rand_t(r, &[4, 5])], true, |g, v| g.relu(v[0]))));
    out.push(("exp", case(vec![rand_t(r, &[4, 5])], false, |g, v| g.exp(v[0]))));
    let pos = Tensor::new(vec![4, 5], (0..20).map(|_| r.gen_range(0.5..2.0)).collect()).unwrap();
    out.push(("log", case(vec![pos], false, |g, v| g.log(v[0]))));
    let wide = Tensor::uniform(vec![4, 5], 6.0, r);
    out.push(("softplus", case(vec![wide], false, |g, v| g.softplus(v[0]))));
    out.push(("matmul", case(vec![rand_t(r, &[3, 4]), rand_t(r, &[4, 2])], false, |g, v| g.matmul(v[0], v[1]))));
    out.push(("matmul_t", case(vec![rand_t(r, &[3, 4]), rand_t(r, &[5, 4])], false, |g, v| g.matmul_t(v[0], v[1]))));
    out.push(("sum", case(vec![rand_t(r, &[3, 4])], false, |g, v| g.sum(v[0]))));
    out.push(("mean", case(vec![rand_t(r, &[3, 4])], false, |g, v| g.mean(v[0]))));
    out.push(("softmax_rows", case(vec![rand_t(r, &[3, 4])], false, |g, v| g.softmax(v[0], 1))));
    out.push(("softmax_cols", case(vec![rand_t(r, &[3, 4])], false, |g, v| g.softmax(v[0], 0))));
    out.push(("softmax_mid", case(vec![rand_t(r, &[2, 3, 4])], false, |g, v| g.softmax(v[0], 1))));
    out.push(("log_sum_exp", case(vec![rand_t(r, &[3, 4])], false, |g, v| g.log_sum_exp(v[0]))));
    out.push(("layer_norm_rows", case(vec![rand_t(r, &[3, 6])], false, |g, v| g.layer_norm(v[0], 1, 1e-5))));
    out.push(("layer_norm_cols", case(vec![rand_t(r, &[4, 3])], false, |g, v| g.layer_norm(v[0], 0, 1e-5))));
    out.push(("layer_norm_score_eps", case(vec![rand_t(r, &[7])], false, |g, v| g.layer_norm(v[0], 0, 1e-9))));
    let mask_seed = r.gen::<u64>();
    out.push((
        "dropout",
        case(vec![rand_t(r, &[4, 5])], false, move |g, v| {
            let mut m = ChaCha8Rng::seed_from_u64(mask_seed);
            g.dropout(v[0], 0.3, true, &mut m)
        }),
    ));
    out.push((
        "conv2d",
        case(
            vec![rand_t(r, &[2, 2, 4, 5]), rand_t(r, &[3, 2, 2, 3]), rand_t(r, &[3])],
            false,
            |g, v| g.conv2d(v[0], v[1], Some(v[2])),
        ),
    ));
    out.push((
        "conv2d_unbatched",
        case(vec![rand_t(r, &[1, 3, 3]), rand_t(r, &[2, 1, 2, 2])], false, |g, v| g.conv2d(v[0], v[1], None)),
    ));
    out.push((
        "circ_correlate",
        case(vec![rand_t(r, &[3, 5]), rand_t(r, &[3, 5])], false, |g, v| g.circ_correlate(v[0], v[1])),
    ));
    out.push((
        "reshape",
        case(vec![rand_t(r, &[3, 4])], false, |g, v| {
            let x = g.reshape(v[0], vec![2, 6])?;
            g.softmax(x, 1)
        }),
    ));
    out.push((
        "concat",
        case(vec![rand_t(r, &[2, 3]), rand_t(r, &[2, 2])], false, |g, v| g.concat(&[v[0], v[1], v[0]], 1)),
    ));
    out.push(("narrow", case(vec![rand_t(r, &[3, 5])], false, |g, v| g.narrow(v[0], 1, 1, 3))));
    out.push(("gather", case(vec![rand_t(r, &[4, 3])], false, |g, v| g.gather(v[0], &[1, 0, 1, 3]))));
    out.push((
        "rel_matvec",
        case(vec![rand_t(r, &[3, 2, 2, 3]), rand_t(r, &[4, 2, 3])], false, |g, v| {
            g.rel_matvec(v[0], v[1], &[0, 2, 2, 1])
        }),
    ));
    let edges = random_edges(r, 5, 3);
    out.push((
        "rel_attention",
        case(
            vec![
                rand_t(r, &[5, 2, 3]),
                rand_t(r, &[5, 2, 3]),
                rand_t(r, &[5, 2, 3]),
                rand_t(r, &[3, 2, 3]),
                rand_t(r, &[3, 2, 3, 3]),
                rand_t(r, &[3, 2, 3, 3]),
            ],
            false,
            move |g, v| g.rel_attention(v[0], v[1], v[2], v[3], v[4], v[5], &edges),
        ),
    ));
    out.push((
        "pairwise_l1",
        case(vec![rand_t(r, &[2, 4]), rand_t(r, &[3, 4])], true, |g, v| g.pairwise_distance(v[0], v[1], 1)),
    ));
    out.push((
        "pairwise_l2",
        case(vec![rand_t(r, &[2, 4]), rand_t(r, &[3, 4])], false, |g, v| g.pairwise_distance(v[0], v[1], 2)),
    ));
    let tau = r.gen_range(0.1..1.5);
    out.push((
        "nc_loss",
        case(vec![rand_t(r, &[2, 6])], false, move |g, v| {
            let anchors = vec![
                Anchor {
                    row: 0,
                    positives: vec![1, 4],
                    negatives: vec![0, 2, 3, 5],
                },
                Anchor {
                    row: 1,
                    positives: vec![0],
                    negatives: vec![2, 5],
                },
            ];
            losses::nc_loss(g, v[0], &anchors, 2.0, tau, true)
        }),
    ));
    out.push((
        "nc_loss_raw",
        case(vec![rand_t(r, &[1, 5])], false, move |g, v| {
            let a = Anchor {
                row: 0,
                positives: vec![2],
                negatives: vec![0, 1, 3, 4],
            };
            losses::nc_loss(g, v[0], &[a], 1.0, tau, false)
        }),
    ));
    out.push(("mp_loss", case(vec![rand_t(r, &[3, 5])], false, |g, v| losses::mp_loss(g, v[0], &[4, 0, 2]))));
    out.push((
        "mr_loss",
        case(vec![rand_t(r, &[2, 5])], true, |g, v| {
            let anchors = vec![
                Anchor {
                    row: 0,
                    positives: vec![1],
                    negatives: vec![0, 2, 3, 4],
                },
                Anchor {
                    row: 1,
                    positives: vec![3],
                    negatives: vec![0, 4],
                },
            ];
            losses::mr_loss(g, v[0], &anchors, 0.5)
        }),
    ));
    let labels = Tensor::new(vec![2, 3], (0..6).map(|_| if r.gen_bool(0.5) { 1.0 } else { 0.0 }).collect()).unwrap();
    out.push((
        "bce_loss",
        case(vec![rand_t(r, &[2, 3])], false, move |g, v| losses::bce_loss(g, v[0], &labels)),
    ));
    out
}

/// Random edge set over `n` nodes with a self loop on each node.
pub fn random_edges(rng: &mut ChaCha8Rng, n: usize, rels: usize) -> Arc<EdgeIndex> {
    let mut edges: Vec<(usize, usize, usize)> = (0..2 * n)
        .map(|_| (rng.gen_range(0..n), rng.gen_range(0..n), rng.gen_range(0..rels - 1)))
        .collect();
    edges.extend((0..n).map(|u| (u, u, rels - 1)));
    Arc::new(EdgeIndex::new(n, &edges).unwrap())
}

pub fn scorer_config(kind: ScorerKind) -> ScorerConfig {
    ScorerConfig {
        kind,
        dim: 4,
        reshape_rows: 2,
        reshape_cols: 2,
        n_filters: 2,
        filter_h: 2,
        filter_w: 2,
        hidden_dropout: 0.25,
        ..ScorerConfig::default()
    }
}

/// Scoring of random query rows against random entity rows.
pub fn scorer_case(kind: ScorerKind, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = scorer_config(kind);
    let mut store = nckge::params::ParamStore::default();
    cfg.init_params(&mut store, &mut rng).unwrap();
    let mut inputs = vec![rand_t(&mut rng, &[3, 4]), rand_t(&mut rng, &[3, 4]), rand_t(&mut rng, &[5, 4])];
    inputs.extend(store.iter().map(|(_, t)| Tensor::uniform(t.shape().to_vec(), 1.0, &mut rng)));
    let kinked = kind == ScorerKind::ConvE || (kind == ScorerKind::TransE && cfg.transe_norm == 1);
    let mask_seed = rng.gen::<u64>();
    case(inputs, kinked, move |g, v| {
        let conve = if kind == ScorerKind::ConvE {
            Some(ConvEVars::lookup(&store, &v[3..])?)
        } else {
            None
        };
        let mut m = ChaCha8Rng::seed_from_u64(mask_seed);
        scorers::score_all(g, &cfg, conve.as_ref(), v[0], v[1], v[2], true, &mut m)
    })
}

/// Six entities, two base relations plus inverses.
pub fn six_node_graph() -> KnowledgeGraph {
    let t = |h: &str, r: &str, x: &str| Triple::new(h, r, x).unwrap();
    let train = vec![
        t("a", "likes", "b"),
        t("a", "likes", "c"),
        t("b", "likes", "c"),
        t("c", "knows", "d"),
        t("d", "knows", "e"),
        t("e", "likes", "f"),
        t("f", "knows", "a"),
        t("b", "knows", "e"),
    ];
    KnowledgeGraph::build(&train, &[], &[], true).unwrap()
}

/// Full encode, score and contrastive loss on the six-node graph with every
/// parameter as an input.
pub fn pipeline_case(kg: &KnowledgeGraph, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let norm = [Normalization::Layer, Normalization::Batch, Normalization::None][seed as usize % 3];
    let enc = RamhaConfig {
        layers: 2,
        heads: 2,
        dim: 4,
        dropout: 0.2,
        norm,
        // exercise the basis decomposition on a third of the seeds
        basis_threshold: if seed % 3 == 1 { 2 } else { 512 },
        num_bases: 3,
    };
    let sc = scorer_config(ScorerKind::ConvE);
    let mut store = nckge::params::ParamStore::default();
    enc.init_params(&mut store, kg.num_entities(), ramha::self_relation(kg) + 1, &mut rng)
        .unwrap();
    sc.init_params(&mut store, &mut rng).unwrap();
    let inputs: Vec<Tensor> = store
        .iter()
        .map(|(_, t)| Tensor::uniform(t.shape().to_vec(), 0.8, &mut rng))
        .collect();
    let edges = ramha::build_edges(kg).unwrap();
    let mut anchors = kg.train_augmented().to_vec();
    anchors.shuffle(&mut rng);
    anchors.truncate(3);
    let contrastive = ContrastiveConfig {
        k_plus: 2,
        negatives: NegativeMode::All,
        ..ContrastiveConfig::default()
    };
    let rows: Vec<Anchor> = anchors
        .iter()
        .enumerate()
        .map(|(row, a)| {
            let (p, n) = losses::sample_pairs(kg, *a, &contrastive, &mut rng).unwrap();
            Anchor {
                row,
                positives: p.iter().map(|e| e.index()).collect(),
                negatives: n.iter().map(|e| e.index()).collect(),
            }
        })
        .collect();
    let tau = rng.gen_range(0.2..1.5);
    let mask_seed = rng.gen::<u64>();
    case(inputs, true, move |g, v| {
        let mut m = ChaCha8Rng::seed_from_u64(mask_seed);
        let ev = EncoderVars::lookup(&store, v, enc.layers)?;
        let out = ramha::encode(g, &enc, &ev, &edges, true, &mut m)?;
        let hs: Vec<usize> = anchors.iter().map(|a| a.head.index()).collect();
        let rs: Vec<usize> = anchors.iter().map(|a| a.relation.index()).collect();
        let h = g.gather(out.entities, &hs)?;
        let r = g.gather(out.relations, &rs)?;
        let conve = ConvEVars::lookup(&store, v)?;
        let s = scorers::score_all(g, &sc, Some(&conve), h, r, out.entities, true, &mut m)?;
        losses::nc_loss(g, s, &rows, 1.0, tau, true)
    })
}
