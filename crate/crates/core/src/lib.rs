//! Stochastic-differential-equation Bayesian neural networks with
//! Nesterov-accelerated activation dynamics.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom of this file fix the element type for callers that
//! do not care.

pub mod autodiff;
pub mod brownian;
pub mod checkpoint;
pub mod dynamics;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod scalar;
pub mod solver;
pub mod state;
pub mod train;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use state::JointState;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
