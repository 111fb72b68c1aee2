//! Filtered link-prediction metrics.
//!
//! Every evaluated triple `(h, r, t)` yields two ranks: `t` among the
//! candidates for `(h, r, ?)` and `h` among the candidates for
//! `(t, r⁻¹, ?)`. Other known-true answers are removed before ranking.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, RelationId, Split, TripleId};
use crate::tensor::{Real, Tensor};

/// Anything that scores `(head, relation)` queries against all entities.
pub trait TailScorer: Sync {
    fn num_entities(&self) -> usize;

    /// `[queries, entities]` scores; higher is more plausible.
    fn score_tails(&self, queries: &[(EntityId, RelationId)]) -> Result<Tensor>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TiePolicy {
    /// Average position of the tie group.
    #[default]
    Mid,
    Optimistic,
    Pessimistic,
}

impl fmt::Display for TiePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TiePolicy::Mid => "mid",
            TiePolicy::Optimistic => "optimistic",
            TiePolicy::Pessimistic => "pessimistic",
        })
    }
}

impl FromStr for TiePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mid" => Ok(TiePolicy::Mid),
            "optimistic" => Ok(TiePolicy::Optimistic),
            "pessimistic" => Ok(TiePolicy::Pessimistic),
            other => Err(Error::Config(format!("unknown tie policy `{other}`"))),
        }
    }
}

/// Rank of `gold` among the candidates kept by `mask` (all when `None`).
///
/// With `g` strictly greater scores and `k` other candidates tied with the
/// gold score, the rank is `1 + g + k/2` under [`TiePolicy::Mid`], `1 + g`
/// when optimistic and `1 + g + k` when pessimistic.
pub fn rank_triple(scores: &[Real], gold: usize, mask: Option<&[bool]>, policy: TiePolicy) -> Result<f64> {
    if gold >= scores.len() {
        return Err(Error::invalid("rank", format!("gold {gold} out of range")));
    }
    if let Some(m) = mask {
        if m.len() != scores.len() {
            return Err(Error::shape("rank", &[scores.len()], &[m.len()]));
        }
        if !m[gold] {
            return Err(Error::invalid("rank", "gold candidate is masked out"));
        }
    }
    let s = scores[gold];
    if s.is_nan() {
        return Err(Error::NonFinite { op: "rank".into() });
    }
    let (mut greater, mut ties) = (0usize, 0usize);
    for (i, &x) in scores.iter().enumerate() {
        if i == gold || mask.is_some_and(|m| !m[i]) {
            continue;
        }
        if x > s {
            greater += 1;
        } else if x == s {
            ties += 1;
        }
    }
    Ok(1.0
        + greater as f64
        + match policy {
            TiePolicy::Mid => ties as f64 / 2.0,
            TiePolicy::Optimistic => 0.0,
            TiePolicy::Pessimistic => ties as f64,
        })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    /// Number of ranks aggregated.
    pub count: usize,
}

impl EvalReport {
    pub fn from_ranks(ranks: &[f64]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::invalid("evaluate", "no ranks"));
        }
        let n = ranks.len() as f64;
        let hits = |k: f64| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Ok(EvalReport {
            mrr: ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n,
            hits1: hits(1.0),
            hits3: hits(3.0),
            hits10: hits(10.0),
            count: ranks.len(),
        })
    }

    /// `hits1 ≤ hits3 ≤ hits10 ≤ 1`, `mrr ∈ (0, 1]` and `mrr ≥ hits1`.
    pub fn is_consistent(&self) -> bool {
        self.hits1 <= self.hits3
            && self.hits3 <= self.hits10
            && self.hits10 <= 1.0
            && self.mrr > 0.0
            && self.mrr <= 1.0
            && self.mrr >= self.hits1
    }
}

/// Tail and head rank of one triple.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripleRanks {
    pub triple: TripleId,
    pub tail: f64,
    pub head: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub policy: TiePolicy,
    pub workers: usize,
    /// Queries scored per call.
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            policy: TiePolicy::Mid,
            workers: 1,
            batch_size: 256,
        }
    }
}

fn rank_chunk(
    kg: &KnowledgeGraph,
    scorer: &dyn TailScorer,
    triples: &[TripleId],
    opts: &EvalOptions,
) -> Result<Vec<TripleRanks>> {
    let mut out = Vec::with_capacity(triples.len());
    for chunk in triples.chunks(opts.batch_size.max(1)) {
        let mut queries = Vec::with_capacity(2 * chunk.len());
        for t in chunk {
            let inv = kg
                .inverse_of(t.relation)
                .ok_or_else(|| Error::invalid("evaluate", "head prediction needs inverse relations"))?;
            queries.push((t.head, t.relation));
            queries.push((t.tail, inv));
        }
        let scores = scorer.score_tails(&queries)?;
        let n = scorer.num_entities();
        if scores.shape() != [queries.len(), n] {
            return Err(Error::shape("evaluate", scores.shape(), &[queries.len(), n]));
        }
        for (i, t) in chunk.iter().enumerate() {
            let (h, r) = queries[2 * i];
            let (tt, inv) = queries[2 * i + 1];
            let tail_mask = kg.filter_candidates(h, r, t.tail);
            let head_mask = kg.filter_candidates(tt, inv, t.head);
            out.push(TripleRanks {
                triple: *t,
                tail: rank_triple(scores.row(2 * i), t.tail.index(), Some(&tail_mask), opts.policy)?,
                head: rank_triple(scores.row(2 * i + 1), t.head.index(), Some(&head_mask), opts.policy)?,
            });
        }
    }
    Ok(out)
}

/// Filtered ranks for every triple, in input order.
pub fn rank_triples(
    kg: &KnowledgeGraph,
    scorer: &dyn TailScorer,
    triples: &[TripleId],
    opts: &EvalOptions,
) -> Result<Vec<TripleRanks>> {
    if triples.is_empty() {
        return Err(Error::invalid("evaluate", "empty split"));
    }
    let workers = opts.workers.max(1).min(triples.len());
    if workers == 1 {
        return rank_chunk(kg, scorer, triples, opts);
    }
    let per = triples.len().div_ceil(workers);
    let parts: Vec<Result<Vec<TripleRanks>>> = std::thread::scope(|s| {
        let handles: Vec<_> = triples
            .chunks(per)
            .map(|c| s.spawn(move || rank_chunk(kg, scorer, c, opts)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::invalid("evaluate", "worker panicked"))))
            .collect()
    });
    let mut out = Vec::with_capacity(triples.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn report(ranks: &[TripleRanks]) -> Result<EvalReport> {
    let flat: Vec<f64> = ranks.iter().flat_map(|r| [r.head, r.tail]).collect();
    EvalReport::from_ranks(&flat)
}

/// Filtered MRR and Hits@{1,3,10} over both directions of `split`.
pub fn evaluate(kg: &KnowledgeGraph, scorer: &dyn TailScorer, split: Split, opts: &EvalOptions) -> Result<EvalReport> {
    report(&rank_triples(kg, scorer, kg.split(split), opts)?)
}

pub const UNKNOWN_TYPE: &str = "UNKNOWN";
pub const ALL_BUCKET: &str = "ALL";

/// Unordered pair label such as `Chemical-Gene`.
pub fn type_pair(a: &str, b: &str) -> String {
    if a <= b {
        format!("{a}-{b}")
    } else {
        format!("{b}-{a}")
    }
}

/// Reports per unordered entity-type pair, sorted by label, followed by the
/// `ALL` row over the whole split.
pub fn evaluate_subdomains(
    kg: &KnowledgeGraph,
    scorer: &dyn TailScorer,
    split: Split,
    opts: &EvalOptions,
) -> Result<Vec<(String, EvalReport)>> {
    if !kg.has_entity_types() {
        return Err(Error::Config("entity types are not loaded".into()));
    }
    let ranks = rank_triples(kg, scorer, kg.split(split), opts)?;
    let mut buckets: BTreeMap<String, Vec<TripleRanks>> = BTreeMap::new();
    for r in &ranks {
        let ty = |e| kg.entity_type(e).unwrap_or(UNKNOWN_TYPE);
        buckets
            .entry(type_pair(ty(r.triple.head), ty(r.triple.tail)))
            .or_default()
            .push(*r);
    }
    let mut out = Vec::with_capacity(buckets.len() + 1);
    for (label, rs) in buckets {
        out.push((label, report(&rs)?));
    }
    out.push((ALL_BUCKET.to_string(), report(&ranks)?));
    Ok(out)
}

/// Top-`k` tails of `(head, relation)` by score, descending. With
/// `filtered`, known-true tails from every split are skipped. Ties keep
/// ascending entity order.
pub fn predict_topk(
    kg: &KnowledgeGraph,
    scorer: &dyn TailScorer,
    head: &str,
    relation: &str,
    k: usize,
    filtered: bool,
) -> Result<Vec<(String, Real)>> {
    if k == 0 {
        return Err(Error::invalid("predict", "k must be at least 1"));
    }
    let h = kg.entity_id(head)?;
    let r = kg.relation_id(relation)?;
    let scores = scorer.score_tails(&[(h, r)])?;
    let row = scores.row(0);
    let known = if filtered { kg.known_tails(h, r) } else { &[] };
    let mut order: Vec<usize> = (0..row.len())
        .filter(|&i| known.binary_search(&EntityId(i as u32)).is_err())
        .collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .take(k)
        .map(|i| (kg.entities().name(i as u32).to_string(), row[i]))
        .collect())
}

pub const REPORT_HEADER: [&str; 6] = ["bucket", "mrr", "h1", "h3", "h10", "n"];

/// Writes `bucket,mrr,h1,h3,h10,n` rows; `n` counts triples.
pub fn write_report_csv<W: Write>(out: W, rows: &[(String, EvalReport)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER)?;
    for (bucket, r) in rows {
        w.write_record([
            bucket.clone(),
            format!("{:.6}", r.mrr),
            format!("{:.6}", r.hits1),
            format!("{:.6}", r.hits3),
            format!("{:.6}", r.hits10),
            (r.count / 2).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
