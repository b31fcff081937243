//! A validated inverse problem plus the exact quantities derived from it.

use std::sync::Arc;

use mapguide_core::gmm::{condition_on_measurement, posterior_oracle, QuadratureConditional};
use mapguide_core::guidance::SharedScore;
use mapguide_core::samplers::{chain_rng, DiffusedFamily};
use mapguide_core::{Config, Gmm, Measurement, NoiseSchedule, Sampler, Solver};
use nalgebra::DVector;

use crate::error::{LabError, Result};

/// Importance samples behind the non-conjugate oracle.
pub const ORACLE_DRAWS: usize = 1_000_000;
/// Gauss-Hermite order of the quadrature conditional score.
pub const QUADRATURE_ORDER: usize = 24;

#[derive(Debug, Clone)]
pub struct Problem {
    pub prior: Arc<Gmm>,
    pub schedule: Arc<NoiseSchedule>,
    pub solver: Solver,
    pub meas: Measurement,
    pub guidance: Config,
    pub n_chains: usize,
    pub seed: u64,
}

impl Problem {
    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    pub fn sampler(&self, config: Config) -> mapguide_core::Result<Sampler> {
        Sampler::new(
            self.prior.clone(),
            self.schedule.clone(),
            self.solver,
            self.meas.clone(),
            config,
        )
    }

    /// Gaussian noise through a linear operator: the posterior is a mixture.
    pub fn is_conjugate(&self) -> bool {
        self.meas.is_gaussian() && self.meas.operator().as_linear().is_some()
    }

    /// Closed-form `p(X0 | y)`.
    pub fn exact_posterior(&self) -> Result<Gmm> {
        if !self.is_conjugate() {
            return Err(LabError::Argument(
                "closed-form posterior needs a linear-Gaussian measurement".into(),
            ));
        }
        Ok(condition_on_measurement(&self.prior, &self.meas)?)
    }

    /// Modes used for occupancy: the conditioned components when available,
    /// otherwise the prior components, near which the posterior modes sit.
    pub fn modes(&self) -> Result<Gmm> {
        if self.is_conjugate() {
            self.exact_posterior()
        } else {
            Ok((*self.prior).clone())
        }
    }

    /// Posterior mass of each mode under the mode-assignment metric.
    pub fn oracle_occupancy(&self, seed: u64) -> Result<Vec<f64>> {
        if self.is_conjugate() {
            return Ok(self.exact_posterior()?.weights());
        }
        let modes = self.modes()?;
        let ws = posterior_oracle(
            &self.prior,
            &self.meas,
            ORACLE_DRAWS,
            &mut chain_rng(seed, 0),
        )?;
        Ok(ws.masses_by(modes.len(), |x| modes.nearest_component(x)))
    }

    /// Independent posterior draws: exact for conjugate problems, otherwise
    /// resampled from the importance oracle.
    pub fn oracle_samples(&self, n: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
        let mut rng = chain_rng(seed, 1);
        if self.is_conjugate() {
            return Ok(self.exact_posterior()?.sample(n, &mut rng));
        }
        let ws = posterior_oracle(&self.prior, &self.meas, ORACLE_DRAWS, &mut rng)?;
        Ok(ws.resample(n, &mut rng))
    }

    /// `log p(x) + log p(y | x)`, up to a constant.
    pub fn log_posterior(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.prior.log_density(x)? + self.meas.log_likelihood(x)?)
    }

    /// `||f(x) - y||`.
    pub fn residual(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.meas.residual(x)?.norm())
    }

    /// `grad log p(x_t | y)`: the diffused closed-form posterior, or
    /// Gauss-Hermite quadrature for a non-conjugate problem in `d <= 3`.
    pub fn reference_score(&self) -> Result<SharedScore<f64>> {
        if self.is_conjugate() {
            let cond = Arc::new(self.exact_posterior()?);
            return Ok(Arc::new(DiffusedFamily::new(cond, self.schedule.clone())));
        }
        let quad =
            QuadratureConditional::new(self.prior.clone(), self.meas.clone(), QUADRATURE_ORDER)?;
        let schedule = self.schedule.clone();
        Ok(Arc::new(move |x: &DVector<f64>, t: usize| {
            quad.score(schedule.scaling_at(t)?, x)
        }))
    }
}
