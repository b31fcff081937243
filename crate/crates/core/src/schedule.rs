//! Noise schedules on a common time index `t = 0..=T`, `t = T` noisiest.

use crate::error::{Error, Result};
use crate::gmm::DiffusionScaling;
use crate::scalar::Real;

/// Linear-beta variance-preserving (DDPM) schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct VpSchedule<T: Real> {
    /// `betas[t - 1] = beta_t` for `t = 1..=T`.
    betas: Vec<T>,
    /// `alpha_bars[t]` for `t = 0..=T`, with `alpha_bars[0] = 1`.
    alpha_bars: Vec<T>,
}

/// Karras sigma grid. `sigmas[0] = sigma_max`, `sigmas[N - 1] = sigma_min`.
#[derive(Debug, Clone, PartialEq)]
pub struct KarrasSchedule<T: Real> {
    sigmas: Vec<T>,
    rho: T,
}

/// Reverse-step parameters: `mean = x_coeff * x + score_coeff * score`,
/// `x_{t-1} = mean + sigma * z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition<T: Real> {
    pub x_coeff: T,
    pub score_coeff: T,
    /// Std of the ancestral noise actually injected.
    pub sigma: T,
    /// Ancestral split; only meaningful for Karras schedules.
    pub sigma_up: T,
    pub sigma_down: T,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Schedule<T: Real> {
    Vp(VpSchedule<T>),
    Karras(KarrasSchedule<T>),
}

impl<T: Real> VpSchedule<T> {
    /// `steps` linearly spaced betas from `beta_start` to `beta_end`.
    pub fn linear(steps: usize, beta_start: T, beta_end: T) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Argument(
                "VP schedule needs at least one step".into(),
            ));
        }
        if !(beta_start > T::zero() && beta_start <= beta_end && beta_end < T::one()) {
            return Err(Error::Argument(format!(
                "betas must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * T::lit(i as f64 / (steps - 1) as f64)
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<T>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > T::zero() && b < T::one())) {
            return Err(Error::Argument(
                "betas must be nonempty and lie in (0, 1)".into(),
            ));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(T::one());
        let mut acc = T::one();
        for &b in &betas {
            acc *= T::one() - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> T {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> T {
        T::one() - self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> T {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bars
    }

    /// Posterior variance `(1 - abar_{t-1}) / (1 - abar_t) * beta_t`.
    pub fn posterior_variance(&self, t: usize) -> T {
        (T::one() - self.alpha_bars[t - 1]) / (T::one() - self.alpha_bars[t]) * self.betas[t - 1]
    }
}

impl<T: Real> KarrasSchedule<T> {
    pub fn new(steps: usize, sigma_min: T, sigma_max: T, rho: T) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Argument(format!(
                "Karras schedule needs N >= 2, got {steps}"
            )));
        }
        if !(sigma_min > T::zero() && sigma_min < sigma_max && sigma_max.is_finite()) {
            return Err(Error::Argument(format!(
                "need 0 < sigma_min < sigma_max, got ({sigma_min}, {sigma_max})"
            )));
        }
        if !(rho > T::zero() && rho.is_finite()) {
            return Err(Error::Argument(format!("rho must be positive, got {rho}")));
        }
        let inv = T::one() / rho;
        let (hi, lo) = (sigma_max.powf(inv), sigma_min.powf(inv));
        let mut sigmas: Vec<T> = (0..steps)
            .map(|i| {
                let f = T::lit(i as f64 / (steps - 1) as f64);
                (hi + f * (lo - hi)).powf(rho)
            })
            .collect();
        sigmas[0] = sigma_max;
        sigmas[steps - 1] = sigma_min;
        Ok(Self { sigmas, rho })
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    pub fn rho(&self) -> T {
        self.rho
    }

    /// Grid value `sigma_i`, `i = 0` being `sigma_max`.
    pub fn sigma(&self, i: usize) -> T {
        self.sigmas[i]
    }

    pub fn sigmas(&self) -> &[T] {
        &self.sigmas
    }

    pub fn sigma_max(&self) -> T {
        self.sigmas[0]
    }

    /// `(1, sigma_i)` on the grid index.
    pub fn scaling_at_level(&self, i: usize) -> Result<DiffusionScaling<T>> {
        self.sigmas
            .get(i)
            .map(|&s| DiffusionScaling::variance_exploding(s))
            .ok_or_else(|| {
                Error::Argument(format!(
                    "grid index {i} out of range 0..{}",
                    self.sigmas.len()
                ))
            })
    }

    /// Noise level at time `t`: `sigma_{N - t}` for `t >= 1`, zero at `t = 0`.
    pub fn sigma_at_time(&self, t: usize) -> T {
        if t == 0 {
            T::zero()
        } else {
            self.sigmas[self.sigmas.len() - t]
        }
    }
}

/// Euler-ancestral split of a step from `sigma_from` down to `sigma_to`:
/// `(sigma_up, sigma_down)` with `sigma_up^2 + sigma_down^2 = sigma_to^2`.
pub fn ancestral_split<T: Real>(sigma_from: T, sigma_to: T) -> (T, T) {
    if sigma_from == T::zero() {
        return (T::zero(), T::zero());
    }
    let up2 = sigma_to * sigma_to * (sigma_from * sigma_from - sigma_to * sigma_to)
        / (sigma_from * sigma_from);
    let up = up2.max(T::zero()).sqrt();
    let down = (sigma_to * sigma_to - up * up).max(T::zero()).sqrt();
    (up, down)
}

impl<T: Real> Schedule<T> {
    /// Number of reverse steps `T`.
    pub fn steps(&self) -> usize {
        match self {
            Schedule::Vp(s) => s.steps(),
            Schedule::Karras(s) => s.len(),
        }
    }

    pub fn is_vp(&self) -> bool {
        matches!(self, Schedule::Vp(_))
    }

    fn check_time(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            Err(Error::Argument(format!(
                "time index {t} out of range 0..={}",
                self.steps()
            )))
        } else {
            Ok(())
        }
    }

    /// Marginal `(a_t, sigma_t)` at time `t`.
    pub fn scaling_at(&self, t: usize) -> Result<DiffusionScaling<T>> {
        self.check_time(t)?;
        Ok(match self {
            Schedule::Vp(s) => DiffusionScaling::variance_preserving(s.alpha_bar(t)),
            Schedule::Karras(s) => DiffusionScaling::variance_exploding(s.sigma_at_time(t)),
        })
    }

    /// Reverse transition from `t` to `t - 1`.
    pub fn transition(&self, t: usize) -> Result<Transition<T>> {
        if t == 0 {
            return Err(Error::Argument("no reverse transition out of t = 0".into()));
        }
        self.check_time(t)?;
        Ok(match self {
            Schedule::Vp(s) => {
                let rt = s.alpha(t).sqrt();
                let sigma = s.posterior_variance(t).max(T::zero()).sqrt();
                Transition {
                    x_coeff: T::one() / rt,
                    score_coeff: s.beta(t) / rt,
                    sigma,
                    sigma_up: sigma,
                    sigma_down: T::zero(),
                }
            }
            Schedule::Karras(s) => {
                let (hi, lo) = (s.sigma_at_time(t), s.sigma_at_time(t - 1));
                let (up, down) = ancestral_split(hi, lo);
                Transition {
                    x_coeff: T::one(),
                    score_coeff: hi * (hi - down),
                    sigma: up,
                    sigma_up: up,
                    sigma_down: down,
                }
            }
        })
    }

    /// Forward kernel `x_t = scale * x_{t-1} + std * eps`.
    pub fn forward_kernel(&self, t: usize) -> Result<(T, T)> {
        if t == 0 {
            return Err(Error::Argument("no forward kernel into t = 0".into()));
        }
        let (hi, lo) = (self.scaling_at(t)?, self.scaling_at(t - 1)?);
        let ratio = hi.scale / lo.scale;
        let var = hi.noise * hi.noise - ratio * ratio * lo.noise * lo.noise;
        Ok((ratio, var.max(T::zero()).sqrt()))
    }

    /// Std of the initial state `x_T`.
    pub fn initial_std(&self) -> T {
        match self {
            Schedule::Vp(_) => T::one(),
            Schedule::Karras(s) => s.sigma_max(),
        }
    }
}

impl<T: Real> From<VpSchedule<T>> for Schedule<T> {
    fn from(s: VpSchedule<T>) -> Self {
        Schedule::Vp(s)
    }
}

impl<T: Real> From<KarrasSchedule<T>> for Schedule<T> {
    fn from(s: KarrasSchedule<T>) -> Self {
        Schedule::Karras(s)
    }
}

/// `make_vp_linear(500, 1e-4, 0.02)`.
pub fn default_vp<T: Real>() -> VpSchedule<T> {
    VpSchedule::linear(500, T::lit(1e-4), T::lit(0.02)).expect("valid defaults")
}

/// The toy Karras grid: `N = 100`, `sigma_max = 4`, `rho = 7`, `sigma_min = 0.002`.
pub fn default_karras<T: Real>() -> KarrasSchedule<T> {
    KarrasSchedule::new(100, T::lit(0.002), T::lit(4.0), T::lit(7.0)).expect("valid defaults")
}
