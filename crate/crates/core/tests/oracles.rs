//! Library results against direct, unoptimised reference computations.

mod common;

use std::collections::HashSet;

use common::oracle::{self, coarse_scores, direct_corr, random_kg, sorted_rank, TableScorer};
use nckge::eval::{self, EvalOptions, TiePolicy};
use nckge::kg::{KnowledgeGraph, Split, Triple};
use nckge::losses;
use nckge::params::ParamStore;
use nckge::ramha::{self, EncoderVars, Normalization, RamhaConfig};
use nckge::{Graph, Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn circular_correlation_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for d in 1..=64 {
        for _ in 0..5 {
            let a = Tensor::uniform(vec![2, d], 2.0, &mut rng);
            let b = Tensor::uniform(vec![2, d], 2.0, &mut rng);
            let mut g = Graph::new();
            let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
            let out = g.circ_correlate(va, vb).unwrap();
            for row in 0..2 {
                let want = direct_corr(a.row(row), b.row(row));
                for (x, y) in g.value(out).row(row).iter().zip(&want) {
                    assert!((x - y).abs() <= 1e-12, "d={d}: {x} vs {y}");
                }
            }
        }
    }
}

fn matvec(w: &[Real], x: &[Real]) -> Vec<Real> {
    let n = x.len();
    w.chunks(n).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

struct DenseLayer {
    d: usize,
    c: usize,
    dc: usize,
    p: ParamStore,
}

impl DenseLayer {
    fn t(&self, name: &str) -> &[Real] {
        self.p.get(name).unwrap().data()
    }

    /// Head `c` of the affine map `z·W + b` for one row.
    fn project(&self, w: &str, b: &str, z: &[Real], c: usize) -> Vec<Real> {
        let (wt, bt) = (self.t(w), self.t(b));
        (c * self.dc..(c + 1) * self.dc)
            .map(|j| bt[j] + (0..self.d).map(|i| z[i] * wt[i * self.d + j]).sum::<Real>())
            .collect()
    }

    fn block(&self, name: &str, r: usize, c: usize) -> &[Real] {
        let n = self.dc * self.dc;
        &self.t(name)[(r * self.c + c) * n..][..n]
    }
}

/// One attention layer evaluated edge by edge from the triple list.
fn brute_force_layer(kg: &KnowledgeGraph, train: &[Triple], layer: &DenseLayer) -> (Vec<Vec<Real>>, Vec<Vec<Real>>) {
    let (d, c, dc) = (layer.d, layer.c, layer.dc);
    let z = layer.t("entity");
    let x = layer.t("relation");
    let n_rel = kg.num_relations() + 1;
    let self_rel = kg.num_relations();
    // relation update per head
    let xr: Vec<Vec<Real>> = (0..n_rel)
        .map(|r| {
            let mut row = Vec::with_capacity(d);
            for h in 0..c {
                let y = matvec(layer.block("layer0.wr", r, h), &x[r * d + h * dc..][..dc]);
                let br = &layer.t("layer0.br")[(r * c + h) * dc..][..dc];
                row.extend(y.iter().zip(br).map(|(a, b)| a + b));
            }
            row
        })
        .collect();
    let mut out = vec![vec![0.0; d]; kg.num_entities()];
    for u in 0..kg.num_entities() {
        let name = kg.entities().name(u as u32);
        let mut nbrs: Vec<(usize, usize)> = Vec::new();
        for t in train {
            if t.head == name {
                nbrs.push((kg.entity_id(&t.tail).unwrap().index(), kg.relation_id(&t.relation).unwrap().index()));
            }
            if t.tail == name {
                let inv = kg.relation_id(&format!("{}^-1", t.relation)).unwrap().index();
                nbrs.push((kg.entity_id(&t.head).unwrap().index(), inv));
            }
        }
        nbrs.push((u, self_rel));
        let zu = &z[u * d..(u + 1) * d];
        for h in 0..c {
            let q = layer.project("layer0.wq", "layer0.bq", zu, h);
            let xh = |r: usize| &xr[r][h * dc..(h + 1) * dc];
            let logits: Vec<Real> = nbrs
                .iter()
                .map(|&(v, r)| {
                    let k = layer.project("layer0.wk", "layer0.bk", &z[v * d..(v + 1) * d], h);
                    let m = matvec(layer.block("layer0.w1", r, h), &direct_corr(&k, xh(r)));
                    q.iter().zip(&m).map(|(a, b)| a * b).sum::<Real>() / (dc as Real).sqrt()
                })
                .collect();
            let mx = logits.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let e: Vec<Real> = logits.iter().map(|l| (l - mx).exp()).collect();
            let s: Real = e.iter().sum();
            for (&(v, r), ei) in nbrs.iter().zip(&e) {
                let val = layer.project("layer0.wv", "layer0.bv", &z[v * d..(v + 1) * d], h);
                let msg = matvec(layer.block("layer0.w2", r, h), &direct_corr(&val, xh(r)));
                for (o, m) in out[u][h * dc..(h + 1) * dc].iter_mut().zip(&msg) {
                    *o += ei / s * m;
                }
            }
        }
    }
    (out, xr)
}

fn five_node_graph(rng: &mut ChaCha8Rng) -> (KnowledgeGraph, Vec<Triple>) {
    let names = ["n0", "n1", "n2", "n3", "n4"];
    let mut train = Vec::new();
    let mut seen = HashSet::new();
    while train.len() < 7 {
        let (h, t) = (rng.gen_range(0..5), rng.gen_range(0..5));
        let r = ["p", "q"][rng.gen_range(0..2)];
        if h != t && seen.insert((h, r, t)) {
            train.push(Triple::new(names[h], r, names[t]).unwrap());
        }
    }
    // keep every name in the vocabulary
    for (i, n) in names.iter().enumerate() {
        if !train.iter().any(|t| t.head == *n || t.tail == *n) {
            train.push(Triple::new(*n, "p", names[(i + 1) % 5]).unwrap());
        }
    }
    let kg = KnowledgeGraph::build(&train, &[], &[], true).unwrap();
    (kg, train)
}

#[test]
fn single_layer_encoder_matches_edge_by_edge_evaluation() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (kg, train) = five_node_graph(&mut rng);
        let cfg = RamhaConfig {
            layers: 1,
            heads: 2,
            dim: 6,
            dropout: 0.2,
            norm: Normalization::Layer,
            ..RamhaConfig::default()
        };
        let mut p = ParamStore::default();
        cfg.init_params(&mut p, kg.num_entities(), ramha::self_relation(&kg) + 1, &mut rng)
            .unwrap();
        for i in 0..p.len() {
            let shape = p.tensor(i).shape().to_vec();
            *p.tensor_mut(i) = Tensor::uniform(shape, 1.0, &mut rng);
        }
        let mut g = Graph::new();
        let vars = p.constants(&mut g);
        let ev = EncoderVars::lookup(&p, &vars, 1).unwrap();
        let edges = ramha::build_edges(&kg).unwrap();
        // eval mode: dropout is off
        let out = ramha::encode(&mut g, &cfg, &ev, &edges, false, &mut rng).unwrap();
        let layer = DenseLayer { d: 6, c: 2, dc: 3, p };
        let (want_z, want_x) = brute_force_layer(&kg, &train, &layer);
        for (u, row) in want_z.iter().enumerate() {
            for (a, b) in g.value(out.entities).row(u).iter().zip(row) {
                assert!((a - b).abs() < 1e-9, "seed {seed} node {u}: {a} vs {b}");
            }
        }
        for (r, row) in want_x.iter().enumerate() {
            for (a, b) in g.value(out.relations).row(r).iter().zip(row) {
                assert!((a - b).abs() < 1e-9, "seed {seed} relation {r}");
            }
        }
    }
}

#[test]
fn rank_triple_matches_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let n = rng.gen_range(1..=200);
        let scores = coarse_scores(&mut rng, n);
        let gold = rng.gen_range(0..n);
        let mut keep: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
        keep[gold] = true;
        let got = eval::rank_triple(&scores, gold, Some(&keep), TiePolicy::Mid).unwrap();
        assert_eq!(got, sorted_rank(&scores, gold, &keep));
    }
}

#[test]
fn evaluate_matches_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..1000 {
        let (kg, splits) = random_kg(&mut rng);
        let n = kg.num_entities();
        let relations = kg.num_relations();
        let scorer = TableScorer {
            n,
            relations,
            table: (0..n * relations).map(|_| coarse_scores(&mut rng, n)).collect(),
        };
        let ranks = oracle::brute_force_ranks(&kg, &splits, &scorer);
        let opts = EvalOptions {
            policy: TiePolicy::Mid,
            workers: rng.gen_range(1..=4),
            batch_size: rng.gen_range(1..=16),
        };
        let got = eval::evaluate(&kg, &scorer, Split::Test, &opts).unwrap();
        let m = ranks.len() as f64;
        let mrr = ranks.iter().map(|r| 1.0 / r).sum::<f64>() / m;
        let hits = |k: f64| ranks.iter().filter(|&&r| r <= k).count() as f64 / m;
        assert_eq!(got.count, ranks.len(), "trial {trial}");
        assert_eq!(got.mrr, mrr, "trial {trial}");
        assert_eq!((got.hits1, got.hits3, got.hits10), (hits(1.0), hits(3.0), hits(10.0)), "trial {trial}");
        assert!(got.is_consistent());
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn mid_rank_is_expected_rank_over_tie_orders() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..200 {
        let n = rng.gen_range(1..=7);
        let scores = coarse_scores(&mut rng, n);
        let gold = rng.gen_range(0..n);
        // every ordering of the candidates consistent with the scores,
        // weighted equally
        let (mut total, mut count) = (0.0, 0.0);
        for p in permutations(n) {
            let ordered = p.windows(2).all(|w| scores[w[0]] >= scores[w[1]]);
            if ordered {
                total += (p.iter().position(|&i| i == gold).unwrap() + 1) as f64;
                count += 1.0;
            }
        }
        let expected = total / count;
        let got = eval::rank_triple(&scores, gold, None, TiePolicy::Mid).unwrap();
        assert!((got - expected).abs() <= f64::EPSILON * expected, "{got} vs {expected}");
    }
}

#[test]
fn contrastive_loss_hand_values() {
    let ln2 = std::f64::consts::LN_2 as Real;
    let v = losses::nc_loss_value(&[0.4], &[0.4], 1.0, 1.0).unwrap();
    assert!((v - ln2).abs() < 1e-9);
    let v = losses::nc_loss_value(&[1.0], &[0.0], 1.0, 1.0).unwrap();
    let e = std::f64::consts::E as Real;
    assert!((v + (e / (e + 1.0)).ln()).abs() < 1e-9);
    assert!((v - 0.313262).abs() < 5e-7);
    let v = losses::nc_loss_value(&[0.0], &[0.0], 2.0, 1.0).unwrap();
    assert!((v - (3.0 as Real).ln()).abs() < 1e-9);
}

#[test]
fn two_ranks_average_to_three_eighths() {
    let r = eval::EvalReport::from_ranks(&[2.0, 4.0]).unwrap();
    assert_eq!(r.mrr, 0.375);
    assert_eq!((r.hits1, r.hits3, r.hits10), (0.0, 0.5, 1.0));
}
