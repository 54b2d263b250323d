//! Neural energy disaggregation toolkit.
//!
//! The pipeline: extract appliance activations from sub-metered power
//! ([`timeseries`]), build standardised training windows from real and
//! synthetic aggregates ([`datagen`]), train one of three network
//! architectures per appliance ([`nn`], [`architectures`]), slide the trained
//! network over long aggregate recordings ([`disaggregate`]), and score the
//! estimates against two classical baselines ([`baselines`], [`metrics`]).
//!
//! The trainable stack is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod architectures;
pub mod baselines;
pub mod datagen;
pub mod disaggregate;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod scalar;
pub mod timeseries;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type Network32 = nn::Network<f32>;
pub type Network64 = nn::Network<f64>;
