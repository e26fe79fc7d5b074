//! Deep equilibrium classifiers with explicit regulation of their neural
//! dynamics.
//!
//! The forward pass of a [`DeqModel`] is an explicit fixed-point iteration
//! whose intermediate states are all recorded in a [`DynamicsTrace`]. On top
//! of that the crate provides intermediate-state attacks, adversarial
//! training with losses drawn from random intermediate states, test-time
//! entropy reduction along the dynamics, and the diagnostics comparing clean
//! and perturbed dynamics.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! `*64` aliases below are the configuration used throughout the harness.

pub mod attacks;
pub mod autodiff;
pub mod defense;
pub mod deq;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod scalar;
pub mod training;

pub use autodiff::{ExprGraph, GradResult, NodeId, Tensor};
pub use deq::{DeqModel, DynamicsTrace, Nonlinearity, SolverConfig, SolverMethod};
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type DeqModel64 = DeqModel<f64>;
pub type DeqModel32 = DeqModel<f32>;
pub type DynamicsTrace64 = DynamicsTrace<f64>;
pub type Batch64 = attacks::Batch<f64>;
