use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;

use super::config::{GuidanceConfig, Method};
use super::gradient::{gluing_gradient_with, gradient_with, MeasurementGradient};
use super::steps::{
    dsg_update, least_squares_descent, resample_update, shell_radius, spherical_project,
};
use crate::error::{check_dim, Error, Result};
use crate::gmm::{condition_on_measurement, GaussianMixture, MeasurementModel};
use crate::linalg::standard_normal;
use crate::samplers::{
    chain_rng, ddim_update, initial_state, DiffusedFamily, ScoreSource, Solver, StepOutput,
};
use crate::scalar::Real;
use crate::schedule::Schedule;

/// Shared score source usable across threads.
pub type SharedScore<T> = Arc<dyn ScoreSource<T> + Send + Sync>;

/// Switches for isolating parts of the DMAP update in tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DmapHooks {
    /// Project onto the transition shell after each inner step.
    pub project: bool,
    /// Evaluate every inner gradient at `x_t` instead of the current iterate.
    pub grad_at_xt: bool,
}

impl Default for DmapHooks {
    fn default() -> Self {
        Self {
            project: true,
            grad_at_xt: false,
        }
    }
}

/// What one guided transition did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTelemetry<T: Real> {
    pub t: usize,
    /// `||f(E[X0|x_t]) - y||`.
    pub residual: T,
    pub grad_norm: T,
    /// `| ||x_{t-1} - mu|| / (sqrt(d) sigma) - 1 |`, zero when `sigma = 0`.
    pub shell_deviation: T,
    /// `||s_eff - s_ref||` for score-form methods when a reference exists.
    pub score_error: Option<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidedStep<T: Real> {
    pub next: DVector<T>,
    /// Pre-guidance transition mean.
    pub mean: DVector<T>,
    pub sigma: T,
    pub noise: DVector<T>,
    pub telemetry: StepTelemetry<T>,
}

/// Terminal state, kept trajectory, and per-step telemetry of one chain.
pub type ChainOutput<T> = (DVector<T>, Vec<DVector<T>>, Vec<StepTelemetry<T>>);

#[derive(Debug, Clone, PartialEq)]
pub struct GuidedRun<T: Real> {
    pub samples: Vec<DVector<T>>,
    pub trajectories: Option<Vec<Vec<DVector<T>>>>,
    /// Per chain, one record per step from `t = T` down to `t = 1`.
    pub telemetry: Vec<Vec<StepTelemetry<T>>>,
}

/// A guided reverse sampler: prior, schedule, solver, measurement, and method.
pub struct GuidedSampler<T: Real> {
    config: GuidanceConfig<T>,
    schedule: Arc<Schedule<T>>,
    solver: Solver,
    meas: MeasurementModel<T>,
    family: DiffusedFamily<T>,
    reference: Option<SharedScore<T>>,
    hooks: DmapHooks,
}

impl<T: Real> std::fmt::Debug for GuidedSampler<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GuidedSampler")
            .field("config", &self.config)
            .field("solver", &self.solver)
            .field("has_reference", &self.reference.is_some())
            .finish()
    }
}

impl<T: Real> GuidedSampler<T> {
    /// Validates the combination. For a linear-Gaussian measurement the exact
    /// conditional score is attached as reference.
    pub fn new(
        prior: Arc<GaussianMixture<T>>,
        schedule: Arc<Schedule<T>>,
        solver: Solver,
        meas: MeasurementModel<T>,
        config: GuidanceConfig<T>,
    ) -> Result<Self> {
        config.validate(schedule.steps())?;
        solver.check_schedule(&schedule)?;
        check_dim(prior.dim(), meas.operator().input_dim())?;
        let method = config.method;
        if method == Method::Psld && meas.operator().as_linear().is_none() {
            return Err(Error::Argument(
                "psld is only applicable to linear operators".into(),
            ));
        }
        if solver == Solver::Ddim
            && (method.projects() || method == Method::Resample || method == Method::Freedom)
        {
            return Err(Error::Argument(format!(
                "method {} needs ancestral noise; ddim is deterministic",
                method.name()
            )));
        }
        let reference = if meas.is_gaussian() && meas.operator().as_linear().is_some() {
            let cond = condition_on_measurement(&prior, &meas)?;
            Some(Arc::new(DiffusedFamily::new(Arc::new(cond), schedule.clone())) as SharedScore<T>)
        } else {
            None
        };
        if method.uses_cse() && reference.is_none() {
            return Err(Error::Argument(format!(
                "method {} needs a closed-form conditional score (Gaussian noise, linear operator)",
                method.name()
            )));
        }
        Ok(Self {
            config,
            family: DiffusedFamily::new(prior, schedule.clone()),
            schedule,
            solver,
            meas,
            reference,
            hooks: DmapHooks::default(),
        })
    }

    /// Replaces the conditional reference, e.g. with a quadrature score for a
    /// non-conjugate likelihood. Enables the CSE methods for that case.
    pub fn with_reference(mut self, reference: SharedScore<T>) -> Self {
        self.reference = Some(reference);
        self
    }

    pub fn with_dmap_hooks(mut self, hooks: DmapHooks) -> Self {
        self.hooks = hooks;
        self
    }

    pub fn config(&self) -> &GuidanceConfig<T> {
        &self.config
    }

    pub fn schedule(&self) -> &Arc<Schedule<T>> {
        &self.schedule
    }

    pub fn solver(&self) -> Solver {
        self.solver
    }

    pub fn measurement(&self) -> &MeasurementModel<T> {
        &self.meas
    }

    pub fn family(&self) -> &DiffusedFamily<T> {
        &self.family
    }

    pub fn reference(&self) -> Option<&SharedScore<T>> {
        self.reference.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.family.prior().dim()
    }

    /// `grad_{x_t} ||f(E[X0|x_t]) - y||`.
    pub fn measurement_gradient(&self, x: &DVector<T>, t: usize) -> Result<MeasurementGradient<T>> {
        gradient_with(self.family.at(t)?, &self.meas, x)
    }

    fn step_size(&self, t: usize, residual: T) -> T {
        let z = self.config.zeta_at(t);
        if self.config.normalize_step && residual > T::zero() {
            z / residual
        } else {
            z
        }
    }

    /// Score driving the base transition: unconditional, or the CSE blend
    /// `(1 - lambda) s_ref + lambda s_uncond`.
    pub fn base_score(&self, x: &DVector<T>, t: usize) -> Result<DVector<T>> {
        let s = self.family.score(x, t)?;
        if !self.config.method.uses_cse() {
            return Ok(s);
        }
        let reference = self.reference.as_ref().expect("validated at construction");
        let r = reference.score(x, t)?;
        let lambda = self.config.cse_lambda;
        Ok(r * (T::one() - lambda) + s * lambda)
    }

    /// `s_uncond(x_t) - (sqrt(alpha_t) / beta_t) zeta_t grad`: the score that
    /// makes a DDPM step reproduce the DPS update. VP schedules only.
    pub fn dps_effective_score(&self, x: &DVector<T>, t: usize) -> Result<DVector<T>> {
        if !self.schedule.is_vp() {
            return Err(Error::Argument(
                "the DPS effective score is defined for VP schedules only".into(),
            ));
        }
        let tr = self.schedule.transition(t)?;
        let s = self.family.score(x, t)?;
        let g = self.measurement_gradient(x, t)?;
        Ok(s - g.grad * (self.step_size(t, g.residual) / tr.score_coeff))
    }

    /// `dps_effective_score` as a [`ScoreSource`].
    pub fn effective_score(&self) -> impl ScoreSource<T> + '_ {
        move |x: &DVector<T>, t: usize| self.dps_effective_score(x, t)
    }

    fn base_transition(
        &self,
        t: usize,
        x: &DVector<T>,
        s: &DVector<T>,
        noise: DVector<T>,
    ) -> Result<StepOutput<T>> {
        match self.solver {
            Solver::Ddim => {
                let next = ddim_update(&self.schedule, t, x, s)?;
                Ok(StepOutput {
                    mean: next.clone(),
                    next,
                    sigma: T::zero(),
                    noise: DVector::zeros(x.len()),
                })
            }
            Solver::Ddpm | Solver::EulerAncestral => {
                let tr = self.schedule.transition(t)?;
                let mean = x * tr.x_coeff + s * tr.score_coeff;
                let next = &mean + &noise * tr.sigma;
                Ok(StepOutput {
                    next,
                    mean,
                    sigma: tr.sigma,
                    noise,
                })
            }
        }
    }

    /// One guided transition `x_t -> x_{t-1}`.
    pub fn step<R: Rng + ?Sized>(
        &self,
        t: usize,
        x: &DVector<T>,
        rng: &mut R,
    ) -> Result<GuidedStep<T>> {
        let noise = if self.solver.is_stochastic() {
            standard_normal(x.len(), rng)
        } else {
            DVector::zeros(x.len())
        };
        self.step_with_noise(t, x, noise, rng)
    }

    /// As [`step`](Self::step) with the base transition noise supplied.
    /// `rng` still feeds projections and resampling.
    pub fn step_with_noise<R: Rng + ?Sized>(
        &self,
        t: usize,
        x: &DVector<T>,
        noise: DVector<T>,
        rng: &mut R,
    ) -> Result<GuidedStep<T>> {
        if t == 0 || t > self.schedule.steps() {
            return Err(Error::Argument(format!(
                "step index {t} outside 1..={}",
                self.schedule.steps()
            )));
        }
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), noise.len())?;
        let method = self.config.method;
        let s_base = self.base_score(x, t)?;
        let base = self.base_transition(t, x, &s_base, noise)?;
        let g = self.measurement_gradient(x, t)?;
        let zeta = self.step_size(t, g.residual);
        let radius = shell_radius(x.len(), base.sigma);

        let next = match method {
            Method::Unconditional => base.next.clone(),
            Method::Dps | Method::Freedom | Method::CseDps => &base.next - &g.grad * zeta,
            Method::Psld => {
                let (glue, _) = gluing_gradient_with(self.family.at(t)?, &self.meas, x)?;
                &base.next - &g.grad * zeta - glue * self.config.gamma
            }
            Method::Dsg => {
                let eps = &base.noise * base.sigma;
                dsg_update(
                    &base.mean,
                    base.sigma,
                    &eps,
                    &g.grad,
                    self.config.dsg_mix,
                    rng,
                )
            }
            Method::Dmap | Method::CseDmap => {
                let prev = self.family.at(t - 1)?;
                let mut cur = base.next.clone();
                for _ in 0..self.config.k {
                    let inner = if self.hooks.grad_at_xt {
                        g.clone()
                    } else {
                        gradient_with(prev, &self.meas, &cur)?
                    };
                    cur -= &inner.grad * self.step_size(t, inner.residual);
                    if self.hooks.project {
                        cur = spherical_project(&cur, &base.mean, radius, rng);
                    }
                }
                cur
            }
            Method::Resample => {
                let dps = &base.next - &g.grad * zeta;
                if t.is_multiple_of(self.config.resample_every) {
                    let x_star = least_squares_descent(
                        &self.meas,
                        &g.x0_hat,
                        self.config.zeta_at(t),
                        self.config.resample_inner,
                    )?;
                    let hi = self.schedule.scaling_at(t)?;
                    let lo = self.schedule.scaling_at(t - 1)?;
                    resample_update(
                        &g.x0_hat,
                        &x_star,
                        lo.scale,
                        hi.noise * hi.noise,
                        self.config.eta,
                        rng,
                    )
                } else {
                    dps
                }
            }
        };

        let shell_deviation = if radius > T::zero() {
            ((&next - &base.mean).norm() / radius - T::one()).abs()
        } else {
            T::zero()
        };
        let score_error = match (&self.reference, method) {
            (
                Some(reference),
                Method::Unconditional | Method::Dps | Method::Freedom | Method::CseDps,
            ) if self.solver != Solver::Ddim => {
                let tr = self.schedule.transition(t)?;
                let implied = if tr.score_coeff > T::zero() && method != Method::Unconditional {
                    &s_base - &g.grad * (zeta / tr.score_coeff)
                } else {
                    s_base.clone()
                };
                Some((implied - reference.score(x, t)?).norm())
            }
            _ => None,
        };
        Ok(GuidedStep {
            next,
            mean: base.mean,
            sigma: base.sigma,
            noise: base.noise,
            telemetry: StepTelemetry {
                t,
                residual: g.residual,
                grad_norm: g.grad.norm(),
                shell_deviation,
                score_error,
            },
        })
    }

    /// One full chain from `x_T`, with FreeDOM time travel inside the window.
    pub fn run_chain<R: Rng + ?Sized>(
        &self,
        x_init: DVector<T>,
        rng: &mut R,
        keep_trajectory: bool,
    ) -> Result<ChainOutput<T>> {
        let steps = self.schedule.steps();
        let mut x = x_init;
        let mut traj = Vec::new();
        if keep_trajectory {
            traj.reserve(steps + 1);
            traj.push(x.clone());
        }
        let mut telemetry = Vec::with_capacity(steps);
        let [c1, c2] = self.config.travel_window;
        for t in (1..=steps).rev() {
            let reps = if self.config.method == Method::Freedom && (c1..=c2).contains(&t) {
                self.config.travel_reps
            } else {
                1
            };
            let mut xt = x.clone();
            let mut out = self.step(t, &xt, rng)?;
            for _ in 1..reps {
                let (scale, std) = self.schedule.forward_kernel(t)?;
                let z: DVector<T> = standard_normal(xt.len(), rng);
                xt = &out.next * scale + z * std;
                out = self.step(t, &xt, rng)?;
            }
            x = out.next;
            telemetry.push(out.telemetry);
            if keep_trajectory {
                traj.push(x.clone());
            }
        }
        Ok((x, traj, telemetry))
    }

    /// `n` chains; chain `i` uses [`chain_rng`]`(seed, i)` and is independent
    /// of thread count.
    pub fn run(&self, n: usize, seed: u64, keep_trajectories: bool) -> Result<GuidedRun<T>> {
        let chains = (0..n)
            .into_par_iter()
            .map(|chain| {
                let mut rng = chain_rng(seed, chain as u64);
                let x = initial_state(&self.schedule, self.dim(), &mut rng);
                self.run_chain(x, &mut rng, keep_trajectories)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut samples = Vec::with_capacity(n);
        let mut trajs = Vec::with_capacity(if keep_trajectories { n } else { 0 });
        let mut telemetry = Vec::with_capacity(n);
        for (x, tr, tel) in chains {
            samples.push(x);
            if keep_trajectories {
                trajs.push(tr);
            }
            telemetry.push(tel);
        }
        Ok(GuidedRun {
            samples,
            trajectories: keep_trajectories.then_some(trajs),
            telemetry,
        })
    }
}

/// Convenience wrapper around [`GuidedSampler::run`].
pub fn run_guided<T: Real>(
    config: GuidanceConfig<T>,
    prior: Arc<GaussianMixture<T>>,
    schedule: Arc<Schedule<T>>,
    solver: Solver,
    meas: MeasurementModel<T>,
    n: usize,
    seed: u64,
) -> Result<GuidedRun<T>> {
    GuidedSampler::new(prior, schedule, solver, meas, config)?.run(n, seed, false)
}
