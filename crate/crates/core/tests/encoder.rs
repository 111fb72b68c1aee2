//! Structural properties of the attention encoder.

use std::sync::Arc;

use nckge::kg::{KnowledgeGraph, Triple};
use nckge::params::ParamStore;
use nckge::ramha::{self, EncoderVars, Normalization, RamhaConfig};
use nckge::tensor::EdgeIndex;
use nckge::{Error, Graph, Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(layers: usize) -> RamhaConfig {
    RamhaConfig {
        layers,
        heads: 2,
        dim: 4,
        dropout: 0.0,
        norm: Normalization::Layer,
        ..RamhaConfig::default()
    }
}

fn random_params(cfg: &RamhaConfig, n: usize, rels: usize, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::default();
    cfg.init_params(&mut p, n, rels, &mut rng).unwrap();
    for i in 0..p.len() {
        let shape = p.tensor(i).shape().to_vec();
        *p.tensor_mut(i) = Tensor::uniform(shape, 1.0, &mut rng);
    }
    p
}

fn run(cfg: &RamhaConfig, p: &ParamStore, edges: &Arc<EdgeIndex>) -> (Graph, ramha::EncoderOutput) {
    let mut g = Graph::new();
    let vars = p.constants(&mut g);
    let ev = EncoderVars::lookup(p, &vars, cfg.layers).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = ramha::encode(&mut g, cfg, &ev, edges, false, &mut rng).unwrap();
    (g, out)
}

fn random_edges(rng: &mut ChaCha8Rng, n: usize, rels: usize, count: usize) -> Vec<(usize, usize, usize)> {
    let mut e: Vec<_> = (0..count)
        .map(|_| (rng.gen_range(0..n), rng.gen_range(0..n), rng.gen_range(0..rels - 1)))
        .collect();
    e.extend((0..n).map(|u| (u, u, rels - 1)));
    e
}

#[test]
fn attention_is_a_distribution_over_each_neighbourhood() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = config(2);
        let edges = Arc::new(EdgeIndex::new(8, &random_edges(&mut rng, 8, 4, 20)).unwrap());
        let p = random_params(&cfg, 8, 4, seed);
        let (g, out) = run(&cfg, &p, &edges);
        for &att in &out.attention {
            for u in 0..8 {
                for head in 0..cfg.heads {
                    let w = ramha::node_attention(&g, att, &edges, cfg.heads, u, head).unwrap();
                    let total: Real = w.iter().map(|x| x.2).sum();
                    assert!((total - 1.0).abs() < 1e-9);
                    assert!(w.iter().all(|x| (0.0..=1.0).contains(&x.2)));
                }
            }
        }
    }
}

#[test]
fn singleton_and_symmetric_neighbourhoods() {
    let cfg = config(1);
    // node 0 hears only itself; node 1 hears nodes 2 and 3 over one relation
    let edges = Arc::new(EdgeIndex::new(4, &[(0, 0, 1), (1, 2, 0), (1, 3, 0), (2, 2, 1), (3, 3, 1)]).unwrap());
    let mut p = random_params(&cfg, 4, 2, 3);
    let ent = p.get_mut("entity").unwrap();
    let row2 = ent.row(2).to_vec();
    ent.data_mut()[12..16].copy_from_slice(&row2);
    let (g, out) = run(&cfg, &p, &edges);
    let att = out.attention[0];
    for head in 0..2 {
        assert_eq!(ramha::node_attention(&g, att, &edges, 2, 0, head).unwrap()[0].2, 1.0);
        for (_, _, a) in ramha::node_attention(&g, att, &edges, 2, 1, head).unwrap() {
            assert!((a - 0.5).abs() < 1e-12);
        }
    }
    // the mean of two equal messages is the message a lone neighbour sends
    let lone = Arc::new(EdgeIndex::new(4, &[(0, 0, 1), (1, 2, 0), (2, 2, 1), (3, 3, 1)]).unwrap());
    let (g2, out2) = run(&cfg, &p, &lone);
    for (a, b) in g.value(out.entities).row(1).iter().zip(g2.value(out2.entities).row(1)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn relabelling_entities_permutes_rows() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 7;
        let cfg = config(2);
        let list = random_edges(&mut rng, n, 3, 15);
        let p = random_params(&cfg, n, 3, seed);
        let (g, out) = run(&cfg, &p, &Arc::new(EdgeIndex::new(n, &list).unwrap()));

        let mut perm: Vec<usize> = (0..n).collect();
        perm.reverse();
        perm.rotate_left(seed as usize % n);
        let moved: Vec<_> = list.iter().map(|&(u, v, r)| (perm[u], perm[v], r)).collect();
        let mut q = p.clone();
        let ent = p.get("entity").unwrap();
        let dst = q.get_mut("entity").unwrap();
        for u in 0..n {
            dst.data_mut()[perm[u] * 4..perm[u] * 4 + 4].copy_from_slice(ent.row(u));
        }
        let (g2, out2) = run(&cfg, &q, &Arc::new(EdgeIndex::new(n, &moved).unwrap()));
        for u in 0..n {
            for (a, b) in g.value(out.entities).row(u).iter().zip(g2.value(out2.entities).row(perm[u])) {
                assert!((a - b).abs() < 1e-9, "seed {seed} node {u}");
            }
        }
    }
}

#[test]
fn removing_an_edge_only_touches_its_receptive_field() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 9;
    let cfg = config(1);
    let list = random_edges(&mut rng, n, 3, 14);
    let p = random_params(&cfg, n, 3, 5);
    let (g, full) = run(&cfg, &p, &Arc::new(EdgeIndex::new(n, &list).unwrap()));
    let removed = list[0];
    let rest: Vec<_> = list[1..].to_vec();
    let (g2, cut) = run(&cfg, &p, &Arc::new(EdgeIndex::new(n, &rest).unwrap()));
    for u in 0..n {
        let same = g.value(full.entities).row(u) == g2.value(cut.entities).row(u);
        // one layer: only the receiving node sees the edge
        assert_eq!(same, u != removed.0, "node {u}");
    }
}

#[test]
fn eval_mode_is_bit_identical() {
    let cfg = RamhaConfig {
        dropout: 0.3,
        ..config(2)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let edges = Arc::new(EdgeIndex::new(6, &random_edges(&mut rng, 6, 3, 10)).unwrap());
    let p = random_params(&cfg, 6, 3, 2);
    let (g1, a) = run(&cfg, &p, &edges);
    let (g2, b) = run(&cfg, &p, &edges);
    assert_eq!(g1.value(a.entities).data(), g2.value(b.entities).data());
    assert_eq!(g1.value(a.relations).data(), g2.value(b.relations).data());
}

#[test]
fn checked_mode_names_the_layer() {
    let cfg = config(2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let edges = Arc::new(EdgeIndex::new(5, &random_edges(&mut rng, 5, 3, 8)).unwrap());
    let mut p = random_params(&cfg, 5, 3, 4);
    p.get_mut("layer1.wq").unwrap().data_mut()[0] = Real::INFINITY;
    let mut g = Graph::new().with_checked(true);
    let vars = p.constants(&mut g);
    let ev = EncoderVars::lookup(&p, &vars, 2).unwrap();
    match ramha::encode(&mut g, &cfg, &ev, &edges, false, &mut rng) {
        Err(Error::NonFinite { op }) => assert!(op.contains("layer 1"), "{op}"),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn isolated_entities_still_get_states() {
    let t = |h: &str, r: &str, x: &str| Triple::new(h, r, x).unwrap();
    // `c` only appears in the test split
    let kg = KnowledgeGraph::build(&[t("a", "r", "b")], &[], &[t("c", "r", "a")], true).unwrap();
    let cfg = config(1);
    let p = random_params(&cfg, kg.num_entities(), ramha::self_relation(&kg) + 1, 9);
    let edges = ramha::build_edges(&kg).unwrap();
    let (g, out) = run(&cfg, &p, &edges);
    let c = kg.entity_id("c").unwrap().index();
    assert_eq!(edges.incoming(c).len(), 1);
    assert!(g.value(out.entities).row(c).iter().any(|x| *x != 0.0));
}
