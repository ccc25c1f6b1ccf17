//! Tensor-level reverse-mode automatic differentiation.
//!
//! Operations are methods on [`Var`]; each one computes its value eagerly and,
//! when the owning [`Tape`] is recording and some input is tracked, appends a
//! node holding the values the backward sweep needs. [`Var::backward`] walks
//! the tape in reverse and returns gradients for every differentiable leaf.

mod activation;
mod conv;
mod ops;
mod tape;

pub use activation::{sigmoid, softplus, ActivationKind};
pub use ops::{apply_activation, gaussian_nll_point, log_sum_exp, softmax_rows};
pub use tape::{Gradients, NodeId, Tape, Var};
