//! Analytic laboratory for diffusion-based inverse-problem solvers.
//!
//! Gaussian-mixture priors give closed-form scores, posterior means, and true
//! posteriors, so guided samplers can be checked against exact references.

// `!(x > 0)` style guards also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod gmm;
pub mod guidance;
pub mod linalg;
pub mod operators;
pub mod samplers;
pub mod scalar;
pub mod schedule;

pub use error::{Error, Result};
pub use gmm::{DiffusionScaling, GaussianMixture, Likelihood, MeasurementModel};
pub use guidance::{GuidanceConfig, GuidedSampler, Method};
pub use operators::{LinearOp, Operator};
pub use samplers::{ScoreSource, Solver};
pub use scalar::Real;
pub use schedule::{KarrasSchedule, Schedule, VpSchedule};

/// Double-precision aliases. The lab runs in `f64` throughout.
pub type Gmm = GaussianMixture<f64>;
pub type Measurement = MeasurementModel<f64>;
pub type Config = GuidanceConfig<f64>;
pub type Sampler = GuidedSampler<f64>;
pub type NoiseSchedule = Schedule<f64>;

/// Single-precision aliases.
pub type GmmF32 = GaussianMixture<f32>;
pub type MeasurementF32 = MeasurementModel<f32>;
pub type ConfigF32 = GuidanceConfig<f32>;
pub type SamplerF32 = GuidedSampler<f32>;
pub type NoiseScheduleF32 = Schedule<f32>;
