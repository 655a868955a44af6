//! Transformer phenology regression with mid-feature rank-adversarial domain
//! adaptation.
//!
//! The crate bundles a small reverse-mode differentiation engine
//! ([`graph`]), the PhenoFormer-style backbone with hybrid layer
//! normalization ([`model`]), the training objectives ([`losses`]), a
//! synthetic climate/phenology generator with thermal-time labels
//! ([`synth`]), training orchestration for the adaptation method and its
//! baselines ([`train`]) and evaluation/reporting ([`eval`]).

pub mod error;
pub mod eval;
pub mod graph;
pub mod losses;
pub mod model;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, ParamId, ParamStore, Var};
pub use optim::AdamState;
pub use tensor::Tensor;
