//! Closed-form probability engine over Gaussian mixtures.

mod denoise;
mod json;
mod measurement;
mod mixture;
mod oracle;

pub use denoise::{
    condition_on_measurement, conditional_score_reference, likelihood_given_state, posterior_mean,
    posterior_mean_jacobian, Denoiser, LocalPosterior, StateLikelihood,
};
pub use measurement::{Likelihood, MeasurementModel};
pub use mixture::{
    Component, Covariance, DiffusionScaling, GaussianMixture, RESPONSIBILITY_CUTOFF,
};
pub use oracle::{
    gauss_hermite, grid_posterior_masses, posterior_oracle, GridMasses, GridSpec,
    QuadratureConditional, WeightedSamples, MIN_EFFECTIVE_SAMPLE_SIZE,
};
