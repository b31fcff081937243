//! Measurement-guided reverse samplers.

mod config;
mod gradient;
mod sampler;
mod steps;

pub use config::{GuidanceConfig, Method, Zeta};
pub use gradient::{
    gluing_gradient_with, gradient_with, measurement_gradient, psld_gluing_gradient,
    MeasurementGradient, RESIDUAL_FLOOR,
};
pub use sampler::{
    run_guided, DmapHooks, GuidedRun, GuidedSampler, GuidedStep, SharedScore, StepTelemetry,
};
pub use steps::{
    dsg_update, least_squares_descent, resample_update, shell_radius, spherical_project,
    CENTER_FLOOR,
};
