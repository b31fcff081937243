//! Unconditional reverse-process steppers driven by any score source.

use std::sync::{Arc, OnceLock};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gmm::{Denoiser, GaussianMixture};
use crate::linalg::standard_normal;
use crate::scalar::Real;
use crate::schedule::Schedule;

/// `(x_t, t) -> score`. Closures work directly.
pub trait ScoreSource<T: Real>: Sync {
    fn score(&self, x: &DVector<T>, t: usize) -> Result<DVector<T>>;
}

impl<T: Real, F> ScoreSource<T> for F
where
    F: Fn(&DVector<T>, usize) -> Result<DVector<T>> + Sync,
{
    fn score(&self, x: &DVector<T>, t: usize) -> Result<DVector<T>> {
        self(x, t)
    }
}

/// A mixture pushed through every marginal of a schedule, built lazily and
/// cached per time index. Serves exact scores and posterior means.
#[derive(Debug)]
pub struct DiffusedFamily<T: Real> {
    prior: Arc<GaussianMixture<T>>,
    schedule: Arc<Schedule<T>>,
    cache: Vec<OnceLock<Denoiser<T>>>,
}

impl<T: Real> DiffusedFamily<T> {
    pub fn new(prior: Arc<GaussianMixture<T>>, schedule: Arc<Schedule<T>>) -> Self {
        let cache = (0..=schedule.steps()).map(|_| OnceLock::new()).collect();
        Self {
            prior,
            schedule,
            cache,
        }
    }

    pub fn prior(&self) -> &Arc<GaussianMixture<T>> {
        &self.prior
    }

    pub fn schedule(&self) -> &Arc<Schedule<T>> {
        &self.schedule
    }

    /// Denoiser at time `t`.
    pub fn at(&self, t: usize) -> Result<&Denoiser<T>> {
        let slot = self.cache.get(t).ok_or_else(|| {
            Error::Argument(format!(
                "time index {t} out of range 0..={}",
                self.schedule.steps()
            ))
        })?;
        if let Some(d) = slot.get() {
            return Ok(d);
        }
        let d = Denoiser::new(self.prior.clone(), self.schedule.scaling_at(t)?)?;
        Ok(slot.get_or_init(|| d))
    }
}

impl<T: Real> ScoreSource<T> for DiffusedFamily<T> {
    fn score(&self, x: &DVector<T>, t: usize) -> Result<DVector<T>> {
        self.at(t)?.score(x)
    }
}

/// One reverse step: `next = mean + sigma * noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<T: Real> {
    pub next: DVector<T>,
    pub mean: DVector<T>,
    pub sigma: T,
    /// The standard-normal draw actually used.
    pub noise: DVector<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Ddpm,
    Ddim,
    EulerAncestral,
}

impl Solver {
    pub fn name(self) -> &'static str {
        match self {
            Solver::Ddpm => "ddpm",
            Solver::Ddim => "ddim",
            Solver::EulerAncestral => "euler_ancestral",
        }
    }

    pub fn is_stochastic(self) -> bool {
        !matches!(self, Solver::Ddim)
    }

    /// Rejects solver/schedule pairs that do not fit together.
    pub fn check_schedule<T: Real>(self, schedule: &Schedule<T>) -> Result<()> {
        match (self, schedule) {
            (Solver::Ddpm | Solver::Ddim, Schedule::Vp(_))
            | (Solver::EulerAncestral, Schedule::Karras(_)) => Ok(()),
            (Solver::Ddpm | Solver::Ddim, Schedule::Karras(_)) => Err(Error::Argument(format!(
                "solver {} needs a VP schedule",
                self.name()
            ))),
            (Solver::EulerAncestral, Schedule::Vp(_)) => Err(Error::Argument(
                "solver euler_ancestral needs a Karras schedule".into(),
            )),
        }
    }

    pub fn step<T: Real, S: ScoreSource<T> + ?Sized, R: Rng + ?Sized>(
        self,
        src: &S,
        schedule: &Schedule<T>,
        t: usize,
        x: &DVector<T>,
        rng: &mut R,
    ) -> Result<StepOutput<T>> {
        self.check_schedule(schedule)?;
        match self {
            Solver::Ddpm | Solver::EulerAncestral => ancestral_step(src, schedule, t, x, rng),
            Solver::Ddim => {
                let next = ddim_step(src, schedule, t, x)?;
                Ok(StepOutput {
                    mean: next.clone(),
                    next,
                    sigma: T::zero(),
                    noise: DVector::zeros(x.len()),
                })
            }
        }
    }
}

/// Ancestral step `mean = c_x x + c_s score`, `next = mean + sigma z`, with the
/// noise supplied by the caller.
pub fn ancestral_step_with_noise<T: Real, S: ScoreSource<T> + ?Sized>(
    src: &S,
    schedule: &Schedule<T>,
    t: usize,
    x: &DVector<T>,
    noise: DVector<T>,
) -> Result<StepOutput<T>> {
    check_dim(x.len(), noise.len())?;
    let tr = schedule.transition(t)?;
    let s = src.score(x, t)?;
    check_dim(x.len(), s.len())?;
    let mean = x * tr.x_coeff + s * tr.score_coeff;
    let next = &mean + &noise * tr.sigma;
    Ok(StepOutput {
        next,
        mean,
        sigma: tr.sigma,
        noise,
    })
}

pub fn ancestral_step<T: Real, S: ScoreSource<T> + ?Sized, R: Rng + ?Sized>(
    src: &S,
    schedule: &Schedule<T>,
    t: usize,
    x: &DVector<T>,
    rng: &mut R,
) -> Result<StepOutput<T>> {
    let tr = schedule.transition(t)?;
    let s = src.score(x, t)?;
    check_dim(x.len(), s.len())?;
    let mean = x * tr.x_coeff + s * tr.score_coeff;
    let noise = standard_normal(x.len(), rng);
    let next = &mean + &noise * tr.sigma;
    Ok(StepOutput {
        next,
        mean,
        sigma: tr.sigma,
        noise,
    })
}

/// DDPM ancestral step: `mean = (x + beta_t s) / sqrt(alpha_t)`.
pub fn ddpm_step<T: Real, S: ScoreSource<T> + ?Sized, R: Rng + ?Sized>(
    src: &S,
    schedule: &Schedule<T>,
    t: usize,
    x: &DVector<T>,
    rng: &mut R,
) -> Result<StepOutput<T>> {
    Solver::Ddpm.check_schedule(schedule)?;
    ancestral_step(src, schedule, t, x, rng)
}

/// Euler-ancestral step on a Karras schedule.
pub fn euler_ancestral_step<T: Real, S: ScoreSource<T> + ?Sized, R: Rng + ?Sized>(
    src: &S,
    schedule: &Schedule<T>,
    t: usize,
    x: &DVector<T>,
    rng: &mut R,
) -> Result<StepOutput<T>> {
    Solver::EulerAncestral.check_schedule(schedule)?;
    ancestral_step(src, schedule, t, x, rng)
}

/// Deterministic DDIM (eta = 0) step.
pub fn ddim_step<T: Real, S: ScoreSource<T> + ?Sized>(
    src: &S,
    schedule: &Schedule<T>,
    t: usize,
    x: &DVector<T>,
) -> Result<DVector<T>> {
    Solver::Ddim.check_schedule(schedule)?;
    if t == 0 {
        return Err(Error::Argument("no reverse transition out of t = 0".into()));
    }
    let s = src.score(x, t)?;
    check_dim(x.len(), s.len())?;
    ddim_update(schedule, t, x, &s)
}

/// DDIM map from `x_t` to `x_{t-1}` given the score at `x_t`.
pub fn ddim_update<T: Real>(
    schedule: &Schedule<T>,
    t: usize,
    x: &DVector<T>,
    s: &DVector<T>,
) -> Result<DVector<T>> {
    let hi = schedule.scaling_at(t)?;
    let lo = schedule.scaling_at(t - 1)?;
    let x0 = (x + s * (hi.noise * hi.noise)) / hi.scale;
    let eps = s * (-hi.noise);
    Ok(x0 * lo.scale + eps * lo.noise)
}

/// Per-chain generator: seeded by `seed`, stream `chain`.
pub fn chain_rng(seed: u64, chain: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain);
    rng
}

/// Draws `x_T`.
pub fn initial_state<T: Real, R: Rng + ?Sized>(
    schedule: &Schedule<T>,
    dim: usize,
    rng: &mut R,
) -> DVector<T> {
    standard_normal(dim, rng) * schedule.initial_std()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRun<T: Real> {
    /// Terminal `x_0` per chain.
    pub samples: Vec<DVector<T>>,
    /// `x_T, ..., x_0` per chain when requested.
    pub trajectories: Option<Vec<Vec<DVector<T>>>>,
}

/// `n` independent reverse chains. Chain `i` depends only on `(seed, i)`.
pub fn run_unconditional<T: Real, S: ScoreSource<T> + ?Sized>(
    src: &S,
    schedule: &Schedule<T>,
    solver: Solver,
    dim: usize,
    n: usize,
    seed: u64,
    keep_trajectories: bool,
) -> Result<SampleRun<T>> {
    solver.check_schedule(schedule)?;
    let chains: Vec<(DVector<T>, Vec<DVector<T>>)> = (0..n)
        .into_par_iter()
        .map(|chain| {
            let mut rng = chain_rng(seed, chain as u64);
            let mut x = initial_state(schedule, dim, &mut rng);
            let mut traj = Vec::new();
            if keep_trajectories {
                traj.reserve(schedule.steps() + 1);
                traj.push(x.clone());
            }
            for t in (1..=schedule.steps()).rev() {
                x = solver.step(src, schedule, t, &x, &mut rng)?.next;
                if keep_trajectories {
                    traj.push(x.clone());
                }
            }
            Ok((x, traj))
        })
        .collect::<Result<_>>()?;
    let (samples, trajs): (Vec<_>, Vec<_>) = chains.into_iter().unzip();
    Ok(SampleRun {
        samples,
        trajectories: keep_trajectories.then_some(trajs),
    })
}
