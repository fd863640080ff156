//! Sentence-pair scoring with pre-computed candidate context embeddings and a
//! light-weight candidate-to-query interaction layer.
//!
//! The query is encoded once; each interaction layer lets every candidate's
//! cached context embeddings attend over the query's keys and values, and
//! keeps a per-candidate query state updated through a gate. Baselines
//! (dual-encoder, cross-encoder, poly-attention, MaxSim) share the same
//! transformer backbone.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below name the common instantiations.

pub mod bench;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod interaction;
pub mod model;
pub mod numcore;
pub mod precompute;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use numcore::{Graph, ParamStore, Rng, Tensor, Var};
pub use scalar::Scalar;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type CandidateCache32 = precompute::CandidateCache<f32>;
pub type CandidateCache64 = precompute::CandidateCache<f64>;
