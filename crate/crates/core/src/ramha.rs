//! Relation-aware multi-head attention encoder.
//!
//! One layer maps entity states `z: [N, d]` and relation states `x: [R, d]`
//! to new states. Relations are first passed through a per-relation,
//! per-head affine map. Every entity then attends over its typed
//! neighbourhood (plus a self loop) with keys and values composed with the
//! relation state by circular correlation, and the heads are concatenated.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph};
use crate::params::{xavier_bound, ParamStore};
use crate::tensor::{EdgeIndex, Graph, Real, Tensor, Var};

/// Normalisation applied between stacked layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    None,
    /// Per entity, over the feature axis.
    Layer,
    /// Per feature, over the entity axis.
    Batch,
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::None => "none",
            Normalization::Layer => "layer",
            Normalization::Batch => "batch",
        })
    }
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Normalization::None),
            "layer" => Ok(Normalization::Layer),
            "batch" => Ok(Normalization::Batch),
            other => Err(Error::Config(format!("unknown normalization `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RamhaConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub dropout: Real,
    pub norm: Normalization,
    /// Relation count above which per-relation matrices share a basis.
    pub basis_threshold: usize,
    pub num_bases: usize,
}

impl Default for RamhaConfig {
    fn default() -> Self {
        RamhaConfig {
            layers: 2,
            heads: 10,
            dim: 200,
            dropout: 0.2,
            norm: Normalization::Layer,
            basis_threshold: 512,
            num_bases: 32,
        }
    }
}

impl RamhaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide dimension {}",
                self.heads, self.dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.num_bases == 0 {
            return Err(Error::Config("basis count must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn uses_basis(&self, num_relations: usize) -> bool {
        num_relations > self.basis_threshold
    }

    /// Registers embedding tables and layer weights.
    ///
    /// `num_relations` counts every relation row the encoder sees, the self
    /// loop relation included.
    pub fn init_params<R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore,
        num_entities: usize,
        num_relations: usize,
        rng: &mut R,
    ) -> Result<()> {
        self.validate()?;
        let (d, c, dc) = (self.dim, self.heads, self.head_dim());
        store.insert("entity", Tensor::uniform(vec![num_entities, d], xavier_bound(num_entities, d), rng))?;
        store.insert("relation", Tensor::uniform(vec![num_relations, d], xavier_bound(num_relations, d), rng))?;
        let basis = self.uses_basis(num_relations);
        for l in 0..self.layers {
            for p in ["q", "k", "v"] {
                store.insert(&format!("layer{l}.w{p}"), Tensor::uniform(vec![d, d], xavier_bound(d, d), rng))?;
                store.insert(&format!("layer{l}.b{p}"), Tensor::zeros(vec![d]))?;
            }
            for m in ["wr", "w1", "w2"] {
                let name = format!("layer{l}.{m}");
                if basis {
                    let b = self.num_bases;
                    store.insert(
                        &format!("{name}.coef"),
                        Tensor::uniform(vec![num_relations, b], xavier_bound(num_relations, b), rng),
                    )?;
                    store.insert(
                        &format!("{name}.bases"),
                        Tensor::uniform(vec![b, c * dc * dc], xavier_bound(dc, dc), rng),
                    )?;
                } else {
                    store.insert(
                        &name,
                        Tensor::uniform(vec![num_relations, c, dc, dc], xavier_bound(dc, dc), rng),
                    )?;
                }
            }
            store.insert(&format!("layer{l}.br"), Tensor::zeros(vec![num_relations, c, dc]))?;
        }
        Ok(())
    }
}

/// Per-relation block matrices, stored densely or as a basis mixture.
#[derive(Clone, Copy, Debug)]
pub enum RelWeights {
    Full(Var),
    Basis { coef: Var, bases: Var },
}

impl RelWeights {
    fn lookup(store: &ParamStore, vars: &[Var], name: &str) -> Result<Self> {
        if let Ok(i) = store.index_of(name) {
            return Ok(RelWeights::Full(vars[i]));
        }
        Ok(RelWeights::Basis {
            coef: vars[store.index_of(&format!("{name}.coef"))?],
            bases: vars[store.index_of(&format!("{name}.bases"))?],
        })
    }

    /// Dense `[R, C, dc, dc]` view.
    pub fn materialize(self, g: &mut Graph, heads: usize, head_dim: usize) -> Result<Var> {
        match self {
            RelWeights::Full(w) => Ok(w),
            RelWeights::Basis { coef, bases } => {
                let r = g.shape(coef)[0];
                let w = g.matmul(coef, bases)?;
                g.reshape(w, vec![r, heads, head_dim, head_dim])
            }
        }
    }
}

/// Graph handles of one layer's weights.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wr: RelWeights,
    pub br: Var,
    pub w1: RelWeights,
    pub w2: RelWeights,
}

/// Graph handles of all encoder parameters.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub entity: Var,
    pub relation: Var,
    pub layers: Vec<LayerVars>,
}

impl EncoderVars {
    pub fn lookup(store: &ParamStore, vars: &[Var], layers: usize) -> Result<Self> {
        let get = |name: String| store.index_of(&name).map(|i| vars[i]);
        let mut out = Vec::with_capacity(layers);
        for l in 0..layers {
            out.push(LayerVars {
                wq: get(format!("layer{l}.wq"))?,
                bq: get(format!("layer{l}.bq"))?,
                wk: get(format!("layer{l}.wk"))?,
                bk: get(format!("layer{l}.bk"))?,
                wv: get(format!("layer{l}.wv"))?,
                bv: get(format!("layer{l}.bv"))?,
                wr: RelWeights::lookup(store, vars, &format!("layer{l}.wr"))?,
                br: get(format!("layer{l}.br"))?,
                w1: RelWeights::lookup(store, vars, &format!("layer{l}.w1"))?,
                w2: RelWeights::lookup(store, vars, &format!("layer{l}.w2"))?,
            });
        }
        Ok(EncoderVars {
            entity: get("entity".into())?,
            relation: get("relation".into())?,
            layers: out,
        })
    }
}

/// Id of the self-loop relation row, placed after every graph relation.
pub fn self_relation(kg: &KnowledgeGraph) -> usize {
    kg.num_relations()
}

/// Incoming-edge index over the augmented training graph.
///
/// Node `u` receives a message from every `(v, r)` in its adjacency and one
/// from itself through the self-loop relation.
pub fn build_edges(kg: &KnowledgeGraph) -> Result<Arc<EdgeIndex>> {
    let self_rel = self_relation(kg);
    let mut edges = Vec::with_capacity(kg.train_augmented().len() + kg.num_entities());
    for u in 0..kg.num_entities() {
        for &(v, r) in kg.adjacency(EntityId(u as u32)) {
            edges.push((u, v.index(), r.index()));
        }
        edges.push((u, u, self_rel));
    }
    Ok(Arc::new(EdgeIndex::new(kg.num_entities(), &edges)?))
}

/// Final states plus the attention nodes of every layer.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub entities: Var,
    pub relations: Var,
    pub attention: Vec<Var>,
}

fn tag_layer<T>(layer: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { op } => Error::NonFinite {
            op: format!("encoder layer {layer}: {op}"),
        },
        other => other,
    })
}

/// `x^{l+1}[r, c] = W_r[c] · x^l[r, c] + b_r[c]` for every relation row;
/// returns `[R, C, dc]`.
pub fn relation_update(g: &mut Graph, cfg: &RamhaConfig, layer: &LayerVars, x: Var) -> Result<Var> {
    let r = g.shape(x)[0];
    let (c, dc) = (cfg.heads, cfg.head_dim());
    let x3 = g.reshape(x, vec![r, c, dc])?;
    let wr = layer.wr.materialize(g, c, dc)?;
    let idx: Vec<usize> = (0..r).collect();
    let y = g.rel_matvec(wr, x3, &idx)?;
    g.add(y, layer.br)
}

fn project(g: &mut Graph, z: Var, w: Var, b: Var, heads: usize, head_dim: usize) -> Result<Var> {
    let n = g.shape(z)[0];
    let p = g.matmul(z, w)?;
    let p = g.add_bias(p, b)?;
    g.reshape(p, vec![n, heads, head_dim])
}

/// Runs every layer over the whole graph.
pub fn encode<R: Rng + ?Sized>(
    g: &mut Graph,
    cfg: &RamhaConfig,
    vars: &EncoderVars,
    edges: &Arc<EdgeIndex>,
    training: bool,
    rng: &mut R,
) -> Result<EncoderOutput> {
    cfg.validate()?;
    let (c, dc, d) = (cfg.heads, cfg.head_dim(), cfg.dim);
    let mut z = vars.entity;
    let mut x = vars.relation;
    let mut attention = Vec::with_capacity(cfg.layers);
    for (l, layer) in vars.layers.iter().enumerate() {
        let step = |g: &mut Graph, rng: &mut R| -> Result<(Var, Var, Var)> {
            let n = g.shape(z)[0];
            let r = g.shape(x)[0];
            let xr = relation_update(g, cfg, layer, x)?;
            let q = project(g, z, layer.wq, layer.bq, c, dc)?;
            let k = project(g, z, layer.wk, layer.bk, c, dc)?;
            let v = project(g, z, layer.wv, layer.bv, c, dc)?;
            let w1 = layer.w1.materialize(g, c, dc)?;
            let w2 = layer.w2.materialize(g, c, dc)?;
            let att = g.rel_attention(q, k, v, xr, w1, w2, edges)?;
            let mut out = g.reshape(att, vec![n, d])?;
            out = g.dropout(out, cfg.dropout, training, rng)?;
            if l + 1 < cfg.layers {
                out = match cfg.norm {
                    Normalization::None => out,
                    Normalization::Layer => g.layer_norm(out, 1, 1e-5)?,
                    Normalization::Batch => g.layer_norm(out, 0, 1e-5)?,
                };
            }
            let x_next = g.reshape(xr, vec![r, d])?;
            Ok((out, x_next, att))
        };
        let (zn, xn, att) = tag_layer(l, step(g, rng))?;
        z = zn;
        x = xn;
        attention.push(att);
    }
    Ok(EncoderOutput {
        entities: z,
        relations: x,
        attention,
    })
}

/// Attention weights of `head` over the incoming edges of node `u`, as
/// `(source, relation, weight)` in edge order.
pub fn node_attention(
    g: &Graph,
    attention: Var,
    edges: &EdgeIndex,
    heads: usize,
    u: usize,
    head: usize,
) -> Option<Vec<(usize, usize, Real)>> {
    let alpha = g.attention_weights(attention)?;
    Some(
        edges
            .incoming(u)
            .map(|e| (edges.source(e), edges.relation(e), alpha[e * heads + head]))
            .collect(),
    )
}
