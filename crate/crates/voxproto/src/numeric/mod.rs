//! Numeric core: tensors, reverse-mode autodiff, MLPs, gradient checking,
//! and deterministic named RNG streams.
//!
//! Design in one paragraph: values are dense row-major f64 [`Tensor`]s;
//! differentiable computation happens on a [`Tape`] that records one node per
//! whole-tensor operation, each node carrying a closure that maps the output
//! gradient to parent-gradient contributions. [`Var`] is a copyable handle
//! into the tape. A fresh tape is built per training step and dropped after
//! [`Var::backward`], so the graph never outlives the step.

pub mod gradcheck;
pub mod mlp;
pub mod ops;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_multi, GradCheckReport};
pub use mlp::{Activation, BoundMlp, LayerSpec, MlpParams};
pub use ops::{cosine_similarity, softmax_with_temperature};
pub use rng::StreamRng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
