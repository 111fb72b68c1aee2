//! Knowledge graph embedding with relation-aware multi-head attention and a
//! node-based contrastive objective.
pub mod anneal;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod kg;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod ramha;
pub mod scorers;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Graph, Real, Tensor, Var};
