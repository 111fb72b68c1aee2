//! Direct reference computations the library is checked against.

use std::collections::HashSet;

use nckge::eval::TailScorer;
use nckge::kg::{EntityId, KnowledgeGraph, RelationId, Triple};
use nckge::{Real, Result, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn direct_corr(a: &[Real], b: &[Real]) -> Vec<Real> {
    let d = a.len();
    (0..d).map(|k| (0..d).map(|i| a[i] * b[(i + k) % d]).sum()).collect()
}

/// Rank by sorting every kept candidate, then averaging the 1-based
/// positions of the gold score's tie group.
pub fn sorted_rank(scores: &[Real], gold: usize, keep: &[bool]) -> f64 {
    let mut kept: Vec<Real> = (0..scores.len()).filter(|&i| keep[i]).map(|i| scores[i]).collect();
    kept.sort_by(|a, b| b.total_cmp(a));
    let positions: Vec<usize> = kept
        .iter()
        .enumerate()
        .filter(|(_, &s)| s == scores[gold])
        .map(|(i, _)| i + 1)
        .collect();
    positions.iter().sum::<usize>() as f64 / positions.len() as f64
}

pub fn coarse_scores(rng: &mut ChaCha8Rng, n: usize) -> Vec<Real> {
    // few distinct values so ties are common
    let levels = rng.gen_range(1..=8);
    (0..n).map(|_| rng.gen_range(0..levels) as Real * 0.25).collect()
}

/// Scores looked up from a random table.
pub struct TableScorer {
    pub n: usize,
    pub table: Vec<Vec<Real>>,
    pub relations: usize,
}

impl TailScorer for TableScorer {
    fn num_entities(&self) -> usize {
        self.n
    }

    fn score_tails(&self, queries: &[(EntityId, RelationId)]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(queries.len() * self.n);
        for (h, r) in queries {
            data.extend_from_slice(&self.table[h.index() * self.relations + r.index()]);
        }
        Tensor::new(vec![queries.len(), self.n], data)
    }
}

pub fn random_kg(rng: &mut ChaCha8Rng) -> (KnowledgeGraph, [Vec<Triple>; 3]) {
    let n = rng.gen_range(2..=200);
    let rels = rng.gen_range(1..=4);
    let mut seen = HashSet::new();
    let mut splits: [Vec<Triple>; 3] = Default::default();
    let total = rng.gen_range(3..=60);
    for i in 0..total {
        let (h, r, t) = (rng.gen_range(0..n), rng.gen_range(0..rels), rng.gen_range(0..n));
        if !seen.insert((h, r, t)) {
            continue;
        }
        let s = if i < 2 { i } else { rng.gen_range(0..3) };
        splits[s].push(Triple::new(format!("e{h}"), format!("r{r}"), format!("e{t}")).unwrap());
    }
    if splits[0].is_empty() || splits[2].is_empty() {
        return random_kg(rng);
    }
    let kg = KnowledgeGraph::build(&splits[0], &splits[1], &splits[2], true).unwrap();
    (kg, splits)
}


/// Filtered mid ranks of every test triple, head query first, found by
/// sorting the whole candidate list.
pub fn brute_force_ranks(kg: &KnowledgeGraph, splits: &[Vec<Triple>; 3], scorer: &TableScorer) -> Vec<f64> {
    let n = kg.num_entities();
    let relations = kg.num_relations();
    let known: HashSet<(&str, &str, &str)> = splits
        .iter()
        .flatten()
        .map(|t| (t.head.as_str(), t.relation.as_str(), t.tail.as_str()))
        .collect();
    let name = |e: usize| kg.entities().name(e as u32).to_string();
    let mut ranks = Vec::new();
    for t in &splits[2] {
        let (h, r, tl) = (
            kg.entity_id(&t.head).unwrap().index(),
            kg.relation_id(&t.relation).unwrap().index(),
            kg.entity_id(&t.tail).unwrap().index(),
        );
        let inv = kg.relation_id(&format!("{}^-1", t.relation)).unwrap().index();
        let keep_head: Vec<bool> = (0..n)
            .map(|e| e == h || !known.contains(&(name(e).as_str(), t.relation.as_str(), t.tail.as_str())))
            .collect();
        let keep_tail: Vec<bool> = (0..n)
            .map(|e| e == tl || !known.contains(&(t.head.as_str(), t.relation.as_str(), name(e).as_str())))
            .collect();
        ranks.push(sorted_rank(&scorer.table[tl * relations + inv], h, &keep_head));
        ranks.push(sorted_rank(&scorer.table[h * relations + r], tl, &keep_tail));
    }
    ranks
}
