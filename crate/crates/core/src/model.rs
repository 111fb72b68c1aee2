//! Encoder plus scorer over one knowledge graph.

use std::sync::Arc;

use rand::rngs::mock::StepRng;
use rand::Rng;

use crate::error::{Error, Result};
use crate::eval::TailScorer;
use crate::kg::{EntityId, KnowledgeGraph, RelationId};
use crate::params::ParamStore;
use crate::ramha::{self, EncoderOutput, EncoderVars, RamhaConfig};
use crate::scorers::{self, ConvEVars, ScorerConfig, ScorerKind};
use crate::tensor::{EdgeIndex, Graph, Tensor, Var};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelConfig {
    pub encoder: RamhaConfig,
    pub scorer: ScorerConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.scorer.validate()?;
        if self.scorer.dim != self.encoder.dim {
            return Err(Error::Config(format!(
                "scorer dimension {} differs from encoder dimension {}",
                self.scorer.dim, self.encoder.dim
            )));
        }
        Ok(())
    }
}

/// Parameters and graph structure needed to encode and score.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    edges: Arc<EdgeIndex>,
    num_entities: usize,
}

/// Graph handles produced by [`Model::bind`].
pub struct Bound {
    pub vars: Vec<Var>,
    pub encoder: EncoderVars,
    pub conve: Option<ConvEVars>,
}

impl Model {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, kg: &KnowledgeGraph, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        config
            .encoder
            .init_params(&mut params, kg.num_entities(), ramha::self_relation(kg) + 1, rng)?;
        config.scorer.init_params(&mut params, rng)?;
        Ok(Model {
            config,
            params,
            edges: ramha::build_edges(kg)?,
            num_entities: kg.num_entities(),
        })
    }

    /// Rebuilds a model around stored parameters, checking names and shapes
    /// against a fresh initialisation.
    pub fn from_params(config: ModelConfig, kg: &KnowledgeGraph, params: ParamStore) -> Result<Self> {
        let mut rng = StepRng::new(0, 0);
        let reference = Model::init(config, kg, &mut rng)?;
        if reference.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for ((name, want), (got_name, got)) in reference.params.iter().zip(params.iter()) {
            if name != got_name || want.shape() != got.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{got_name}` {:?} does not match `{name}` {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        Ok(Model { params, ..reference })
    }

    pub fn edges(&self) -> &Arc<EdgeIndex> {
        &self.edges
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    /// Places every parameter on `g`, trainable or not.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Bound> {
        let vars = if trainable {
            self.params.leaves(g)
        } else {
            self.params.constants(g)
        };
        let encoder = EncoderVars::lookup(&self.params, &vars, self.config.encoder.layers)?;
        let conve = match self.config.scorer.kind {
            ScorerKind::ConvE => Some(ConvEVars::lookup(&self.params, &vars)?),
            _ => None,
        };
        Ok(Bound { vars, encoder, conve })
    }

    pub fn encode<R: Rng + ?Sized>(&self, g: &mut Graph, b: &Bound, training: bool, rng: &mut R) -> Result<EncoderOutput> {
        ramha::encode(g, &self.config.encoder, &b.encoder, &self.edges, training, rng)
    }

    /// `[B, N]` scores of `(head, relation)` queries against every entity.
    pub fn score<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        b: &Bound,
        enc: &EncoderOutput,
        queries: &[(EntityId, RelationId)],
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let hs: Vec<usize> = queries.iter().map(|q| q.0.index()).collect();
        let rs: Vec<usize> = queries.iter().map(|q| q.1.index()).collect();
        let heads = g.gather(enc.entities, &hs)?;
        let rels = g.gather(enc.relations, &rs)?;
        scorers::score_all(
            g,
            &self.config.scorer,
            b.conve.as_ref(),
            heads,
            rels,
            enc.entities,
            training,
            rng,
        )
    }

    /// Encodes once in eval mode for repeated scoring.
    pub fn freeze(&self) -> Result<FrozenModel> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false)?;
        let mut rng = StepRng::new(0, 0);
        let enc = self.encode(&mut g, &b, false, &mut rng)?;
        let mut conve = ParamStore::default();
        if self.config.scorer.kind == ScorerKind::ConvE {
            for name in ["conve.filters", "conve.filter_bias", "conve.proj", "conve.proj_bias"] {
                conve.insert(name, self.params.get(name)?.clone())?;
            }
        }
        Ok(FrozenModel {
            entities: g.value(enc.entities).clone(),
            relations: g.value(enc.relations).clone(),
            scorer: self.config.scorer.clone(),
            conve,
        })
    }
}

/// Final entity and relation states with the scorer weights.
#[derive(Clone, Debug)]
pub struct FrozenModel {
    pub entities: Tensor,
    pub relations: Tensor,
    pub scorer: ScorerConfig,
    conve: ParamStore,
}

impl TailScorer for FrozenModel {
    fn num_entities(&self) -> usize {
        self.entities.shape()[0]
    }

    fn score_tails(&self, queries: &[(EntityId, RelationId)]) -> Result<Tensor> {
        if queries.is_empty() {
            return Err(Error::invalid("score_tails", "no queries"));
        }
        let d = self.entities.shape()[1];
        let mut g = Graph::new();
        let mut hs = Vec::with_capacity(queries.len() * d);
        let mut rs = Vec::with_capacity(queries.len() * d);
        for &(h, r) in queries {
            hs.extend_from_slice(self.entities.row(h.index()));
            rs.extend_from_slice(self.relations.row(r.index()));
        }
        let heads = g.constant(Tensor::new(vec![queries.len(), d], hs)?);
        let rels = g.constant(Tensor::new(vec![queries.len(), d], rs)?);
        let tails = g.constant(self.entities.clone());
        let conve = if self.scorer.kind == ScorerKind::ConvE {
            let vars = self.conve.constants(&mut g);
            Some(ConvEVars::lookup(&self.conve, &vars)?)
        } else {
            None
        };
        let mut rng = StepRng::new(0, 0);
        let s = scorers::score_all(&mut g, &self.scorer, conve.as_ref(), heads, rels, tails, false, &mut rng)?;
        Ok(g.value(s).clone())
    }
}
