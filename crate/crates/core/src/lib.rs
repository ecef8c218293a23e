//! Reverse-mode automatic differentiation with stochastic backpropagation.
//!
//! Stochastic backpropagation runs every forward path of a network but keeps
//! backward paths only for a sampled subset of nodes (frames, chunks or
//! tokens) in the lower layers, so only the sampled activations are cached.
//!
//! * [`tensor`]: dense tensors and kernels.
//! * [`autograd`]: the tape, cache accounting, checkpointing and the gradient
//!   oracles.
//! * [`sbp`]: node samplers and the stochastic-backprop wrapper.
//! * [`models`]: a spatial-then-temporal tree model and a small video
//!   transformer.
//! * [`analysis`]: space/time cost predictors and representation similarity.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the aliases at the
//! crate root fix the element type to `f64`, which the gradient oracles
//! assume.

pub mod analysis;
pub mod autograd;
pub mod error;
pub mod mask;
pub mod models;
pub mod rng;
pub mod sbp;
pub mod scalar;
pub mod stats;
pub mod tensor;

pub use autograd::{CachePolicy, Gradients, Op, OpKind, Region, RowSelect, Var};
pub use error::{Error, Result};
pub use mask::{keep_count, MaskAxis, SampleMask};
pub use rng::Rng;
pub use scalar::Scalar;
pub use stats::{LayerTag, MemoryStats, OpCounter};

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape64 = autograd::Tape<f64>;
pub type Tape32 = autograd::Tape<f32>;
pub type Gradients64 = autograd::Gradients<f64>;


pub type MiniVideoTransformer64 = models::MiniVideoTransformer<f64>;
pub type SttModel64 = models::SttModel<f64>;
pub type TransformerBlock64 = models::TransformerBlock<f64>;
