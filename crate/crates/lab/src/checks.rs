//! Randomized property batteries: identities that must hold to rounding or
//! finite-difference accuracy on every probe.

use std::f64::consts::PI;
use std::sync::Arc;

use mapguide_core::gmm::{
    condition_on_measurement, conditional_score_reference, likelihood_given_state, posterior_mean,
    posterior_mean_jacobian, Covariance, Denoiser, DiffusionScaling, StateLikelihood,
};
use mapguide_core::guidance::{measurement_gradient, psld_gluing_gradient, shell_radius};
use mapguide_core::linalg::{central_difference, central_difference_jacobian, relative_error};
use mapguide_core::operators::QuadraticMap;
use mapguide_core::samplers::{ancestral_step_with_noise, chain_rng};
use mapguide_core::schedule::default_vp;
use mapguide_core::{
    Config, Gmm, Likelihood, LinearOp, Measurement, MeasurementModel, Method, NoiseSchedule,
    Operator, Sampler, Schedule, Solver,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::problem::Problem;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Norm below which relative errors are taken against 1e-3 instead.
const REL_FLOOR: f64 = 1e-3;

/// Largest error seen over a batch of probes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Worst {
    pub name: String,
    pub probes: usize,
    pub max_error: f64,
}

impl Worst {
    fn of(name: &str, errors: Vec<f64>) -> Self {
        let max_error = errors.iter().copied().fold(0.0, f64::max);
        let max_error = if errors.iter().any(|e| e.is_nan()) {
            f64::NAN
        } else {
            max_error
        };
        Self {
            name: name.into(),
            probes: errors.len(),
            max_error,
        }
    }

    pub fn below(&self, tol: f64) -> bool {
        self.max_error < tol
    }
}

fn normal(d: usize, scale: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(d, |_, _| {
        scale * {
            let z: f64 = StandardNormal.sample(rng);
            z
        }
    })
}

/// A mixture with isotropic and dense components.
pub fn random_mixture(d: usize, k: usize, rng: &mut ChaCha8Rng) -> Gmm {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let parts = raw
        .iter()
        .map(|w| {
            let mean = normal(d, 1.5, rng);
            let cov = if rng.random_bool(0.5) {
                Covariance::Iso(rng.random_range(0.2..1.5))
            } else {
                let l = DMatrix::from_fn(d, d, |_, _| {
                    0.5 * {
                        let z: f64 = StandardNormal.sample(rng);
                        z
                    }
                });
                Covariance::Dense(&l * l.transpose() + DMatrix::identity(d, d) * 0.3)
            };
            (w / total, mean, cov)
        })
        .collect();
    Gmm::new(parts).expect("positive weights and covariances")
}

fn random_scaling(rng: &mut ChaCha8Rng) -> DiffusionScaling<f64> {
    DiffusionScaling::new(rng.random_range(0.2..1.0), rng.random_range(0.1..1.5))
        .expect("positive scale")
}

fn random_state(prior: &Gmm, s: DiffusionScaling<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
    prior.sample_one(rng) * s.scale + normal(prior.dim(), s.noise, rng)
}

/// Dense Gaussian measurement of a prior draw.
fn random_gaussian_measurement(prior: &Gmm, rng: &mut ChaCha8Rng) -> Measurement {
    let d = prior.dim();
    let m = rng.random_range(1..=d);
    let a = DMatrix::from_fn(m, d, |_, _| StandardNormal.sample(rng));
    let sigma_y = rng.random_range(0.05..0.5);
    let y = &a * prior.sample_one(rng) + normal(m, sigma_y, rng);
    MeasurementModel::new(LinearOp::Dense(a), Likelihood::Gaussian { sigma_y }, y)
        .expect("consistent shapes")
}

fn random_quadratic_measurement(prior: &Gmm, rng: &mut ChaCha8Rng) -> Measurement {
    let d = prior.dim();
    let op = Operator::nonlinear(QuadraticMap::random(d, d, 0.3, rng));
    let y = op.apply(&prior.sample_one(rng)).expect("consistent shapes") + normal(d, 0.05, rng);
    MeasurementModel::new(op, Likelihood::Gaussian { sigma_y: 0.05 }, y).expect("consistent shapes")
}

/// Probe `i` gets its own stream so results do not depend on thread count.
fn probe_errors<F>(n: usize, seed: u64, f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut ChaCha8Rng) -> Result<f64> + Sync,
{
    (0..n)
        .into_par_iter()
        .map(|i| f(&mut chain_rng(seed, i as u64)))
        .collect()
}

/// A DDPM step driven by the DPS effective score against the guided DPS
/// step, same state and noise. Problems on non-VP schedules are moved to the
/// default VP schedule. Returns the largest absolute coordinate difference.
pub fn dps_ddpm_identity(problems: &[Problem], triples: usize, seed: u64) -> Result<Worst> {
    let vp: Arc<NoiseSchedule> = Arc::new(Schedule::Vp(default_vp()));
    let samplers = problems
        .iter()
        .map(|p| {
            let schedule = if p.schedule.is_vp() {
                p.schedule.clone()
            } else {
                vp.clone()
            };
            Sampler::new(
                p.prior.clone(),
                schedule,
                Solver::Ddpm,
                p.meas.clone(),
                Config::new(Method::Dps, 1.0),
            )
        })
        .collect::<mapguide_core::Result<Vec<_>>>()?;
    let errors = probe_errors(triples, seed, |rng| {
        let base = &samplers[rng.random_range(0..samplers.len())];
        let zeta = rng.random_range(0.01..2.0);
        let s = Sampler::new(
            base.family().prior().clone(),
            base.schedule().clone(),
            Solver::Ddpm,
            base.measurement().clone(),
            Config::new(Method::Dps, zeta),
        )?;
        let schedule = s.schedule().clone();
        let t = rng.random_range(1..=schedule.steps());
        let x = random_state(s.family().prior(), schedule.scaling_at(t)?, rng);
        let noise = normal(s.dim(), 1.0, rng);
        let via_score =
            ancestral_step_with_noise(&s.effective_score(), &schedule, t, &x, noise.clone())?;
        let guided = s.step_with_noise(t, &x, noise, rng)?;
        Ok((via_score.next - guided.next).amax())
    })?;
    Ok(Worst::of("dps effective score ddpm identity", errors))
}

fn fd_error_vec(
    analytic: &DVector<f64>,
    f: impl Fn(&DVector<f64>) -> f64,
    x: &DVector<f64>,
) -> f64 {
    relative_error(analytic, &central_difference(f, x, FD_STEP), REL_FLOOR)
}

/// Every analytic gradient against central differences: measurement
/// gradient (linear and quadratic operators), posterior-mean Jacobian, PSLD
/// gluing gradient, unconditional, exact conditional, CSE blend, DPS
/// effective score, and `grad log p(y | x_t)`.
pub fn gradient_oracles(probes: usize, seed: u64) -> Result<Vec<Worst>> {
    let setup = |rng: &mut ChaCha8Rng| {
        let d = rng.random_range(2..=4);
        let k = rng.random_range(1..=3);
        let prior = random_mixture(d, k, rng);
        let s = random_scaling(rng);
        let x = random_state(&prior, s, rng);
        (prior, s, x)
    };
    let mut out = Vec::new();

    out.push(Worst::of(
        "measurement_gradient",
        probe_errors(probes, seed, |rng| {
            let (prior, s, x) = setup(rng);
            let meas = if rng.random_bool(0.5) {
                random_gaussian_measurement(&prior, rng)
            } else {
                random_quadratic_measurement(&prior, rng)
            };
            let g = measurement_gradient(&prior, s, &meas, &x)?.grad;
            Ok(fd_error_vec(
                &g,
                |z| measurement_gradient(&prior, s, &meas, z).unwrap().residual,
                &x,
            ))
        })?,
    ));

    out.push(Worst::of(
        "posterior_mean_jacobian",
        probe_errors(probes, seed + 1, |rng| {
            let (prior, s, x) = setup(rng);
            let j = posterior_mean_jacobian(&prior, s, &x)?;
            let fd =
                central_difference_jacobian(|z| posterior_mean(&prior, s, z).unwrap(), &x, FD_STEP);
            Ok((&j - fd).norm() / j.norm().max(REL_FLOOR))
        })?,
    ));

    out.push(Worst::of(
        "psld_gluing_gradient",
        probe_errors(probes, seed + 2, |rng| {
            let (prior, s, x) = setup(rng);
            let meas = random_gaussian_measurement(&prior, rng);
            let (g, _) = psld_gluing_gradient(&prior, s, &meas, &x)?;
            Ok(fd_error_vec(
                &g,
                |z| psld_gluing_gradient(&prior, s, &meas, z).unwrap().1,
                &x,
            ))
        })?,
    ));

    out.push(Worst::of(
        "unconditional_score",
        probe_errors(probes, seed + 3, |rng| {
            let (prior, s, x) = setup(rng);
            let diffused = prior.diffuse(s);
            Ok(fd_error_vec(
                &diffused.score(&x)?,
                |z| diffused.log_density(z).unwrap(),
                &x,
            ))
        })?,
    ));

    out.push(Worst::of(
        "conditional_score_reference",
        probe_errors(probes, seed + 4, |rng| {
            let (prior, s, x) = setup(rng);
            let meas = random_gaussian_measurement(&prior, rng);
            let cond = condition_on_measurement(&prior, &meas)?.diffuse(s);
            let g = conditional_score_reference(&prior, &meas, s, &x)?;
            Ok(fd_error_vec(&g, |z| cond.log_density(z).unwrap(), &x))
        })?,
    ));

    out.push(Worst::of(
        "cse_blend_score",
        probe_errors(probes, seed + 5, |rng| {
            let (prior, s, x) = setup(rng);
            let meas = random_gaussian_measurement(&prior, rng);
            let lambda = rng.random_range(0.0..1.0);
            let cond = condition_on_measurement(&prior, &meas)?.diffuse(s);
            let uncond = prior.diffuse(s);
            let g = cond.score(&x)? * (1.0 - lambda) + uncond.score(&x)? * lambda;
            let f = |z: &DVector<f64>| {
                (1.0 - lambda) * cond.log_density(z).unwrap()
                    + lambda * uncond.log_density(z).unwrap()
            };
            Ok(fd_error_vec(&g, f, &x))
        })?,
    ));

    let vp: Arc<NoiseSchedule> = Arc::new(Schedule::Vp(default_vp()));
    out.push(Worst::of(
        "dps_effective_score",
        probe_errors(probes, seed + 6, |rng| {
            let d = rng.random_range(2..=4);
            let prior = Arc::new(random_mixture(d, rng.random_range(1..=3), rng));
            let meas = random_gaussian_measurement(&prior, rng);
            let zeta = rng.random_range(0.01..1.0);
            let s = Sampler::new(
                prior.clone(),
                vp.clone(),
                Solver::Ddpm,
                meas,
                Config::new(Method::Dps, zeta),
            )?;
            let t = rng.random_range(1..=vp.steps());
            let x = random_state(&prior, vp.scaling_at(t)?, rng);
            let coeff = zeta / vp.transition(t)?.score_coeff;
            let den = s.family().at(t)?;
            let f = |z: &DVector<f64>| {
                den.diffused().log_density(z).unwrap()
                    - coeff * s.measurement_gradient(z, t).unwrap().residual
            };
            Ok(fd_error_vec(&s.dps_effective_score(&x, t)?, f, &x))
        })?,
    ));

    out.push(Worst::of(
        "likelihood_given_state",
        probe_errors(probes, seed + 7, |rng| {
            let (prior, s, x) = setup(rng);
            let meas = random_gaussian_measurement(&prior, rng);
            let den = Denoiser::new(Arc::new(prior), s)?;
            let (_, g) = likelihood_given_state(&den, &meas, &x)?;
            Ok(fd_error_vec(
                &g,
                |z| likelihood_given_state(&den, &meas, z).unwrap().0,
                &x,
            ))
        })?,
    ));
    Ok(out)
}

/// Responsibility-form against score-form posterior means.
pub fn tweedie_consistency(triples: usize, seed: u64) -> Result<Worst> {
    let errors = probe_errors(triples, seed, |rng| {
        let d = rng.random_range(1..=6);
        let prior = random_mixture(d, rng.random_range(1..=4), rng);
        let s = random_scaling(rng);
        let x = random_state(&prior, s, rng);
        let den = Denoiser::new(Arc::new(prior), s)?;
        Ok(relative_error(
            &den.posterior_mean(&x)?,
            &den.tweedie_mean(&x)?,
            REL_FLOOR,
        ))
    })?;
    Ok(Worst::of("tweedie consistency", errors))
}

/// Exact conditional score against unconditional score plus
/// `grad log p(y | x_t)`, all in closed form.
pub fn score_decomposition(probes: usize, seed: u64) -> Result<Worst> {
    let errors = probe_errors(probes, seed, |rng| {
        let d = rng.random_range(1..=5);
        let prior = random_mixture(d, rng.random_range(1..=3), rng);
        let meas = random_gaussian_measurement(&prior, rng);
        let s = random_scaling(rng);
        let x = random_state(&prior, s, rng);
        let reference = conditional_score_reference(&prior, &meas, s, &x)?;
        let den = Denoiser::new(Arc::new(prior), s)?;
        let (_, grad) = likelihood_given_state(&den, &meas, &x)?;
        Ok(relative_error(
            &reference,
            &(den.score(&x)? + grad),
            REL_FLOOR,
        ))
    })?;
    Ok(Worst::of("conditional score decomposition", errors))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DsgArgmax {
    pub trials: usize,
    pub hits: usize,
    /// Largest angular miss over all trials, radians.
    pub worst_miss: f64,
    /// Draws discarded because `log p(y | x_{t-1})` had more than one local
    /// maximum on the circle, i.e. was not locally linear there.
    pub rejected: usize,
}

/// Attempts per trial before giving up on finding a locally linear draw.
const DSG_MAX_ATTEMPTS: usize = 1000;

fn local_maxima(v: &[f64]) -> usize {
    let n = v.len();
    (0..n)
        .filter(|&i| v[i] > v[(i + n - 1) % n] && v[i] >= v[(i + 1) % n])
        .count()
}

/// Full-strength DSG on the 2-d toy prior against a brute-force search of
/// `log p(y | x_{t-1})` over `grid` points of the transition circle. Each
/// trial draws a random 1x2 operator, `y`, small `t`, and state, redrawing
/// while the likelihood on the circle has several local maxima (the
/// measurement line cuts the circle, so it is not locally linear).
pub fn dsg_argmax(trials: usize, grid: usize, tol: f64, seed: u64) -> Result<DsgArgmax> {
    let prior = Arc::new(crate::tasks::toy().prior);
    let schedule: Arc<NoiseSchedule> = Arc::new(Schedule::Vp(default_vp()));
    let outcomes: Vec<(f64, usize)> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let rng = &mut chain_rng(seed, i as u64);
            for rejected in 0..DSG_MAX_ATTEMPTS {
                let row = DMatrix::from_fn(1, 2, |_, _| rng.random_range(-1.0..1.0));
                let y = DVector::from_element(1, rng.random_range(-1.5..1.5));
                let meas = MeasurementModel::new(
                    LinearOp::Dense(row),
                    Likelihood::Gaussian { sigma_y: 0.1 },
                    y,
                )?;
                let config = Config {
                    dsg_mix: 1.0,
                    ..Config::new(Method::Dsg, 0.1)
                };
                let s = Sampler::new(
                    prior.clone(),
                    schedule.clone(),
                    Solver::Ddpm,
                    meas.clone(),
                    config,
                )?;
                let t = rng.random_range(2..=20);
                let x = random_state(&prior, schedule.scaling_at(t)?, rng);
                let out = s.step(t, &x, rng)?;
                let radius = shell_radius(2, out.sigma);
                let lik = StateLikelihood::new(s.family().at(t - 1)?, &meas)?;
                let values = (0..grid)
                    .map(|k| {
                        let th = 2.0 * PI * k as f64 / grid as f64;
                        Ok(lik
                            .eval(
                                &(&out.mean + DVector::from_vec(vec![th.cos(), th.sin()]) * radius),
                            )?
                            .0)
                    })
                    .collect::<Result<Vec<f64>>>()?;
                if local_maxima(&values) != 1 {
                    continue;
                }
                let best = (0..grid)
                    .max_by(|&a, &b| values[a].total_cmp(&values[b]))
                    .expect("grid is nonempty");
                let best = 2.0 * PI * best as f64 / grid as f64;
                let dv = &out.next - &out.mean;
                let diff = (dv[1].atan2(dv[0]) - best).rem_euclid(2.0 * PI);
                return Ok((diff.min(2.0 * PI - diff), rejected));
            }
            Err(
                mapguide_core::Error::Precondition("no locally linear DSG trial found".into())
                    .into(),
            )
        })
        .collect::<Result<_>>()?;
    Ok(DsgArgmax {
        trials,
        hits: outcomes.iter().filter(|(m, _)| *m < tol).count(),
        worst_miss: outcomes.iter().map(|o| o.0).fold(0.0, f64::max),
        rejected: outcomes.iter().map(|o| o.1).sum(),
    })
}
