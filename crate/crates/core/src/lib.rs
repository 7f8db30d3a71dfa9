//! Multi-discriminator adversarial domain adaptation for fitness regression
//! from wearable time series.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for callers that do not care.

pub mod baselines;
pub mod bench;
pub mod error;
pub mod features;
pub mod kv;
pub mod linalg;
pub mod netgraph;
pub mod objectives;
pub mod scalar;
pub mod seeds;
pub mod synthcohort;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision model parameters.
pub type Model = netgraph::ModelParams<f64>;
/// Single-precision model parameters, used for long training runs.
pub type ModelF32 = netgraph::ModelParams<f32>;
/// Double-precision sample set.
pub type Samples = synthcohort::SampleSet<f64>;
/// Single-precision sample set.
pub type SamplesF32 = synthcohort::SampleSet<f32>;
