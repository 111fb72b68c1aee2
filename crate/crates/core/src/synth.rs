//! Deterministic synthetic datasets.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kg::{dedup, Triple};

pub const TOY_ENTITIES: usize = 50;

/// Small graph with a composition pattern over 50 entities.
///
/// * `r0`: `i → i+1`, `i → i+2`
/// * `r1`: `i → i+5`, `i → i+10`
/// * `r2`: `i → i+6`, `i → i+12` (`r0` followed by `r1`, doubled)
/// * `r3`: `i → −i`, `i → 7i`
///
/// All arithmetic is modulo 50; repeated triples are dropped.
pub fn toy_triples() -> Vec<Triple> {
    let n = TOY_ENTITIES;
    let name = |i: usize| format!("e{:02}", i % n);
    let rules: [(&str, &dyn Fn(usize) -> [usize; 2]); 4] = [
        ("r0", &|i| [i + 1, i + 2]),
        ("r1", &|i| [i + 5, i + 10]),
        ("r2", &|i| [i + 6, i + 12]),
        ("r3", &|i| [n - i, 7 * i]),
    ];
    let mut out = Vec::new();
    for (rel, f) in rules {
        for i in 0..n {
            for t in f(i) {
                out.push(Triple {
                    head: name(i),
                    relation: rel.to_string(),
                    tail: name(t),
                });
            }
        }
    }
    dedup(out)
}

/// Toy splits: all triples for training, every fifth triple for validation
/// and test.
pub fn toy_splits() -> (Vec<Triple>, Vec<Triple>, Vec<Triple>) {
    let train = toy_triples();
    let held: Vec<Triple> = train.iter().step_by(5).cloned().collect();
    (train.clone(), held.clone(), held)
}

fn write_lines<'a>(path: &Path, lines: impl Iterator<Item = (&'a str, &'a str, &'a str)>) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for (a, b, c) in lines {
        writeln!(f, "{a}\t{b}\t{c}")?;
    }
    f.flush()?;
    Ok(())
}

fn write_split(path: &Path, triples: &[Triple]) -> Result<()> {
    write_lines(
        path,
        triples
            .iter()
            .map(|t| (t.head.as_str(), t.relation.as_str(), t.tail.as_str())),
    )
}

/// Writes `train.tsv`, `valid.tsv` and `test.tsv` of the toy graph.
pub fn write_toy_dataset(dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let (train, valid, test) = toy_splits();
    write_split(&dir.join("train.tsv"), &train)?;
    write_split(&dir.join("valid.tsv"), &valid)?;
    write_split(&dir.join("test.tsv"), &test)?;
    Ok(())
}

/// Shape of a typed random graph.
#[derive(Clone, Debug)]
pub struct TypedGraphSpec {
    pub entities_per_type: Vec<(String, usize)>,
    pub relations: usize,
    pub triples: usize,
    pub seed: u64,
}

impl TypedGraphSpec {
    /// Biomedical-style layout: genes, chemicals and diseases joined by 28
    /// relation types.
    pub fn biomedical(scale: usize, seed: u64) -> Self {
        TypedGraphSpec {
            entities_per_type: vec![
                ("Gene".to_string(), 4 * scale),
                ("Chemical".to_string(), 3 * scale),
                ("Disease".to_string(), 2 * scale),
            ],
            relations: 28,
            triples: 40 * scale,
            seed,
        }
    }
}

/// Writes a random typed graph with `entity_types.tsv`. Each relation links
/// a fixed pair of entity types; the triples are split 80/10/10 after
/// shuffling, and every relation appears in training.
pub fn write_typed_dataset(dir: impl AsRef<Path>, spec: &TypedGraphSpec) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut by_type: Vec<Vec<String>> = Vec::new();
    let mut types = Vec::new();
    for (ty, count) in &spec.entities_per_type {
        let names: Vec<String> = (0..*count).map(|i| format!("{}::{i}", ty.to_lowercase())).collect();
        for n in &names {
            types.push((n.clone(), ty.clone()));
        }
        by_type.push(names);
    }
    let k = by_type.len();
    let signature: Vec<(usize, usize)> = (0..spec.relations).map(|r| (r % k, (r / k) % k)).collect();
    let mut triples = Vec::with_capacity(spec.triples);
    for i in 0..spec.triples {
        let r = if i < spec.relations { i } else { rng.gen_range(0..spec.relations) };
        let (ht, tt) = signature[r];
        let h = by_type[ht].choose(&mut rng).expect("non-empty type").clone();
        let t = by_type[tt].choose(&mut rng).expect("non-empty type").clone();
        triples.push(Triple {
            head: h,
            relation: format!("rel_{r:02}"),
            tail: t,
        });
    }
    let mut triples = dedup(triples);
    let (first, rest) = triples.split_at_mut(spec.relations.min(spec.triples));
    rest.shuffle(&mut rng);
    let n_rest = rest.len();
    let n_held = n_rest / 10;
    let mut train = first.to_vec();
    train.extend_from_slice(&rest[..n_rest - 2 * n_held]);
    let valid = rest[n_rest - 2 * n_held..n_rest - n_held].to_vec();
    let test = rest[n_rest - n_held..].to_vec();
    write_split(&dir.join("train.tsv"), &train)?;
    write_split(&dir.join("valid.tsv"), &valid)?;
    write_split(&dir.join("test.tsv"), &test)?;
    let mut f = std::io::BufWriter::new(fs::File::create(dir.join("entity_types.tsv"))?);
    for (e, t) in &types {
        writeln!(f, "{e}\t{t}")?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_graph_size() {
        let t = toy_triples();
        // r3 collides with itself at i = 0 and i = 25
        assert_eq!(t.len(), 398);
        let rels: std::collections::BTreeSet<_> = t.iter().map(|x| x.relation.clone()).collect();
        assert_eq!(rels.len(), 4);
        let ents: std::collections::BTreeSet<_> = t.iter().flat_map(|x| [x.head.clone(), x.tail.clone()]).collect();
        assert_eq!(ents.len(), 50);
        let (_, valid, _) = toy_splits();
        assert_eq!(valid.len(), 80);
    }
}
