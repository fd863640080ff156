//! Dense tensors, reverse-mode differentiation and the primitive layers the
//! models are assembled from.

pub mod flops;
mod graph;
pub mod nn;
mod params;
mod rng;
mod tensor;

pub use flops::{FlopCounter, Phase, Role};
pub use graph::{concat, Graph, Var};
pub use nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention, LAYER_NORM_EPS};
pub use params::{ParamId, ParamStore, Session, INIT_STD};
pub use rng::Rng;
pub use tensor::Tensor;
