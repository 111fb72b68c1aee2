//! Triple ingestion, vocabularies, adjacency and the filtered-ranking index.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Suffix that names the inverse of a base relation.
pub const INVERSE_SUFFIX: &str = "^-1";

/// A fact `(head, relation, tail)` in string form.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triple {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>) -> Result<Self> {
        let t = Triple {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        };
        for field in [&t.head, &t.relation, &t.tail] {
            if field.is_empty() || field.contains('\t') {
                return Err(Error::invalid("triple", format!("invalid field {field:?}")));
            }
        }
        Ok(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// A fact in vocabulary-id form.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TripleId {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Bijective string ↔ id map in insertion order.
#[derive(Clone, Debug, Default)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Inserts `name` if absent and returns its id.
    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Entries sharing the longest common prefix with `query`, at most `limit`.
    pub fn suggestions(&self, query: &str, limit: usize) -> Vec<String> {
        let common = |s: &str| s.chars().zip(query.chars()).take_while(|(a, b)| a == b).count();
        let best = self.names.iter().map(|n| common(n)).max().unwrap_or(0);
        if best == 0 {
            return Vec::new();
        }
        self.names
            .iter()
            .filter(|n| common(n) == best)
            .take(limit)
            .cloned()
            .collect()
    }
}

/// Parses tab-separated triples. `origin` is used in error messages.
pub fn parse_tsv(text: &str, origin: &Path) -> Result<Vec<Triple>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: &str| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(&format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        if fields.iter().any(|f| f.is_empty()) {
            return Err(err("empty field"));
        }
        out.push(Triple {
            head: fields[0].to_string(),
            relation: fields[1].to_string(),
            tail: fields[2].to_string(),
        });
    }
    if out.is_empty() {
        return Err(Error::Parse {
            path: origin.to_path_buf(),
            line: 0,
            msg: "no triples".into(),
        });
    }
    Ok(out)
}

/// Reads a triple file, keeping order and duplicates.
pub fn load_tsv(path: impl AsRef<Path>) -> Result<Vec<Triple>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_tsv(&text, path)
}

/// Drops repeated triples, keeping the first occurrence.
pub fn dedup(triples: Vec<Triple>) -> Vec<Triple> {
    let mut seen = HashSet::new();
    triples.into_iter().filter(|t| seen.insert(t.clone())).collect()
}

/// Reads `entity<TAB>type` lines.
pub fn load_entity_types(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(e), Some(t), None) if !e.is_empty() && !t.is_empty() => {
                out.push((e.to_string(), t.trim_end().to_string()))
            }
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: "expected entity<TAB>type".into(),
                })
            }
        }
    }
    Ok(out)
}

/// Raw splits as read from a dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    pub entity_types: Option<Vec<(String, String)>>,
}

impl Dataset {
    /// Loads `train.tsv`, `valid.tsv`, `test.tsv` and the optional
    /// `entity_types.tsv` from `dir`.
    pub fn load(dir: impl AsRef<Path>, dedup_triples: bool) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| -> Result<Vec<Triple>> {
            let p = dir.join(name);
            if !p.is_file() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("missing {}", p.display()),
                )));
            }
            let t = load_tsv(&p)?;
            Ok(if dedup_triples { dedup(t) } else { t })
        };
        let types = dir.join("entity_types.tsv");
        Ok(Dataset {
            dir: dir.to_path_buf(),
            train: read("train.tsv")?,
            valid: read("valid.tsv")?,
            test: read("test.tsv")?,
            entity_types: if types.is_file() {
                Some(load_entity_types(&types)?)
            } else {
                None
            },
        })
    }

    pub fn build_graph(&self, add_inverses: bool) -> Result<KnowledgeGraph> {
        let mut kg = KnowledgeGraph::build(&self.train, &self.valid, &self.test, add_inverses)?;
        if let Some(types) = &self.entity_types {
            kg.set_entity_types(types);
        }
        Ok(kg)
    }
}

/// Immutable graph view with vocabularies, adjacency and filter index.
///
/// Relation ids: base relations first (by first appearance), then, when
/// inverses are enabled, the inverse of base relation `i` at `i + |base|`.
#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    entities: Vocab,
    relations: Vocab,
    num_base_relations: usize,
    has_inverses: bool,
    train: Vec<TripleId>,
    valid: Vec<TripleId>,
    test: Vec<TripleId>,
    train_augmented: Vec<TripleId>,
    adjacency: Vec<Vec<(EntityId, RelationId)>>,
    positives: HashMap<(EntityId, RelationId), Vec<EntityId>>,
    filter: HashMap<(EntityId, RelationId), Vec<EntityId>>,
    entity_types: Option<Vec<Option<String>>>,
}

impl KnowledgeGraph {
    pub fn build(train: &[Triple], valid: &[Triple], test: &[Triple], add_inverses: bool) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::invalid("build_graph", "training split is empty"));
        }
        let mut entities = Vocab::default();
        let mut relations = Vocab::default();
        for t in train.iter().chain(valid).chain(test) {
            entities.intern(&t.head);
            entities.intern(&t.tail);
            relations.intern(&t.relation);
        }
        let num_base = relations.len();
        if add_inverses {
            for i in 0..num_base {
                let inv = format!("{}{INVERSE_SUFFIX}", relations.name(i as u32));
                if relations.get(&inv).is_some() {
                    return Err(Error::invalid(
                        "build_graph",
                        format!("relation `{inv}` collides with a generated inverse name"),
                    ));
                }
                relations.intern(&inv);
            }
        }
        let to_id = |t: &Triple| TripleId {
            head: EntityId(entities.get(&t.head).unwrap()),
            relation: RelationId(relations.get(&t.relation).unwrap()),
            tail: EntityId(entities.get(&t.tail).unwrap()),
        };
        let train: Vec<TripleId> = train.iter().map(to_id).collect();
        let valid: Vec<TripleId> = valid.iter().map(to_id).collect();
        let test: Vec<TripleId> = test.iter().map(to_id).collect();

        let invert = |t: &TripleId| TripleId {
            head: t.tail,
            relation: RelationId(t.relation.0 + num_base as u32),
            tail: t.head,
        };
        let augment = |ts: &[TripleId]| -> Vec<TripleId> {
            let mut out = ts.to_vec();
            if add_inverses {
                out.extend(ts.iter().map(invert));
            }
            out
        };
        let train_augmented = augment(&train);

        let mut adjacency = vec![Vec::new(); entities.len()];
        let mut positives: HashMap<(EntityId, RelationId), Vec<EntityId>> = HashMap::new();
        for t in &train_augmented {
            adjacency[t.head.index()].push((t.tail, t.relation));
            positives.entry((t.head, t.relation)).or_default().push(t.tail);
        }
        let mut filter: HashMap<(EntityId, RelationId), Vec<EntityId>> = HashMap::new();
        for t in train_augmented.iter().chain(&augment(&valid)).chain(&augment(&test)) {
            filter.entry((t.head, t.relation)).or_default().push(t.tail);
        }
        for v in positives.values_mut().chain(filter.values_mut()) {
            v.sort_unstable();
            v.dedup();
        }
        Ok(KnowledgeGraph {
            entities,
            relations,
            num_base_relations: num_base,
            has_inverses: add_inverses,
            train,
            valid,
            test,
            train_augmented,
            adjacency,
            positives,
            filter,
            entity_types: None,
        })
    }

    /// Attaches entity type tags; entities without a tag stay untyped.
    pub fn set_entity_types(&mut self, types: &[(String, String)]) {
        let mut tags = vec![None; self.entities.len()];
        for (e, t) in types {
            if let Some(id) = self.entities.get(e) {
                tags[id as usize] = Some(t.clone());
            }
        }
        self.entity_types = Some(tags);
    }

    pub fn entities(&self) -> &Vocab {
        &self.entities
    }

    pub fn relations(&self) -> &Vocab {
        &self.relations
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    /// Relation vocabulary size, inverses included.
    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn num_base_relations(&self) -> usize {
        self.num_base_relations
    }

    pub fn has_inverses(&self) -> bool {
        self.has_inverses
    }

    /// Id of the inverse relation, if inverses are enabled.
    pub fn inverse_of(&self, r: RelationId) -> Option<RelationId> {
        if !self.has_inverses {
            return None;
        }
        let nb = self.num_base_relations as u32;
        Some(if r.0 < nb { RelationId(r.0 + nb) } else { RelationId(r.0 - nb) })
    }

    pub fn split(&self, split: Split) -> &[TripleId] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Training triples followed by their inverses.
    pub fn train_augmented(&self) -> &[TripleId] {
        &self.train_augmented
    }

    /// `(neighbour, relation)` pairs of the training edges leaving `u`.
    pub fn adjacency(&self, u: EntityId) -> &[(EntityId, RelationId)] {
        &self.adjacency[u.index()]
    }

    /// Sorted training tails `t` with `(h, r, t)` in the augmented train set.
    pub fn positives_of(&self, h: EntityId, r: RelationId) -> &[EntityId] {
        self.positives.get(&(h, r)).map_or(&[], Vec::as_slice)
    }

    /// Sorted tails known true for `(h, r)` in any split.
    pub fn known_tails(&self, h: EntityId, r: RelationId) -> &[EntityId] {
        self.filter.get(&(h, r)).map_or(&[], Vec::as_slice)
    }

    /// `true` for candidates that take part in filtered ranking of `gold`.
    pub fn filter_candidates(&self, h: EntityId, r: RelationId, gold: EntityId) -> Vec<bool> {
        let mut mask = vec![true; self.num_entities()];
        for &t in self.known_tails(h, r) {
            if t != gold {
                mask[t.index()] = false;
            }
        }
        mask
    }

    pub fn entity_type(&self, e: EntityId) -> Option<&str> {
        self.entity_types.as_ref()?.get(e.index())?.as_deref()
    }

    pub fn has_entity_types(&self) -> bool {
        self.entity_types.is_some()
    }

    pub fn entity_id(&self, name: &str) -> Result<EntityId> {
        self.entities.get(name).map(EntityId).ok_or_else(|| Error::UnknownName {
            kind: "entity",
            name: name.to_string(),
            suggestions: self.entities.suggestions(name, 5),
        })
    }

    pub fn relation_id(&self, name: &str) -> Result<RelationId> {
        self.relations.get(name).map(RelationId).ok_or_else(|| Error::UnknownName {
            kind: "relation",
            name: name.to_string(),
            suggestions: self.relations.suggestions(name, 5),
        })
    }

    pub fn to_strings(&self, t: TripleId) -> Triple {
        Triple {
            head: self.entities.name(t.head.0).to_string(),
            relation: self.relations.name(t.relation.0).to_string(),
            tail: self.entities.name(t.tail.0).to_string(),
        }
    }

    pub fn to_ids(&self, t: &Triple) -> Result<TripleId> {
        Ok(TripleId {
            head: self.entity_id(&t.head)?,
            relation: self.relation_id(&t.relation)?,
            tail: self.entity_id(&t.tail)?,
        })
    }
}
