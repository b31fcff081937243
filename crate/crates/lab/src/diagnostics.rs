//! Measurements on a problem: score errors against the exact conditional,
//! score means at `x_T`, sample spread, mode coverage, shell concentration,
//! and the cross-entropy implication.

use std::sync::Arc;

use mapguide_core::gmm::StateLikelihood;
use mapguide_core::samplers::{chain_rng, initial_state, DiffusedFamily, ScoreSource};
use mapguide_core::{Config, Gmm, Method, NoiseSchedule};
use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::problem::Problem;
use crate::report::Curves;

fn normal(d: usize, rng: &mut impl rand::Rng) -> DVector<f64> {
    DVector::from_fn(d, |_, _| StandardNormal.sample(rng))
}

/// Score estimators compared against the exact conditional score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoreMethod {
    Reference,
    Unconditional,
    Dps {
        zeta: f64,
    },
    /// `(1 - lambda) s_ref + lambda s_uncond`.
    Blend {
        lambda: f64,
    },
}

impl ScoreMethod {
    pub fn label(&self) -> String {
        match self {
            ScoreMethod::Reference => "reference".into(),
            ScoreMethod::Unconditional => "unconditional".into(),
            ScoreMethod::Dps { zeta } => format!("dps_zeta_{zeta}"),
            ScoreMethod::Blend { lambda } => format!("cse_lambda_{lambda}"),
        }
    }
}

/// Per step `t = T..1`, the mean over `n_probes` of `||s_method - s_ref||`,
/// probes drawn from the reference conditional marginal at `t`.
pub fn score_error_curve(
    problem: &Problem,
    methods: &[ScoreMethod],
    n_probes: usize,
    seed: u64,
) -> Result<Curves> {
    if !problem.is_conjugate() {
        return Err(LabError::Argument(
            "score errors need the closed-form conditional score (Gaussian noise, linear operator)"
                .into(),
        ));
    }
    let posterior = Arc::new(problem.exact_posterior()?);
    let reference = DiffusedFamily::new(posterior.clone(), problem.schedule.clone());
    let uncond = DiffusedFamily::new(problem.prior.clone(), problem.schedule.clone());
    let samplers = methods
        .iter()
        .map(|m| match m {
            ScoreMethod::Dps { zeta } => problem.sampler(Config::new(Method::Dps, *zeta)).map(Some),
            ScoreMethod::Blend { lambda } => problem
                .sampler(Config::new(Method::CseDps, 0.0).with_lambda(*lambda))
                .map(Some),
            _ => Ok(None),
        })
        .collect::<mapguide_core::Result<Vec<_>>>()?;
    let steps = problem.steps();
    let rows = (1..=steps)
        .rev()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|t| {
            let scaling = problem.schedule.scaling_at(t)?;
            let mut rng = chain_rng(seed, t as u64);
            let mut sums = vec![0.0; methods.len()];
            for _ in 0..n_probes {
                let x = posterior.sample_one(&mut rng) * scaling.scale
                    + normal(problem.dim(), &mut rng) * scaling.noise;
                let s_ref = reference.score(&x, t)?;
                let s_u = uncond.score(&x, t)?;
                for (j, m) in methods.iter().enumerate() {
                    let err = match m {
                        ScoreMethod::Reference => 0.0,
                        ScoreMethod::Unconditional => (&s_u - &s_ref).norm(),
                        ScoreMethod::Dps { .. } => {
                            let s = samplers[j].as_ref().expect("built above");
                            (s.dps_effective_score(&x, t)? - &s_ref).norm()
                        }
                        ScoreMethod::Blend { .. } => {
                            let s = samplers[j].as_ref().expect("built above");
                            (s.base_score(&x, t)? - &s_ref).norm()
                        }
                    };
                    sums[j] += err;
                }
            }
            Ok(sums
                .into_iter()
                .map(|s| s / n_probes as f64)
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut curves = Curves::new(steps);
    for (j, m) in methods.iter().enumerate() {
        curves.push(
            format!("score_error_{}", m.label()),
            rows.iter().map(|r| r[j]).collect(),
        );
    }
    Ok(curves)
}

/// `||(1/n) sum_i s(x_T^i, T)||` with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoreMean {
    pub n: usize,
    pub mean_norm: f64,
    /// `sqrt(sum_j se_j^2)`, the per-coordinate standard errors combined.
    pub se_norm: f64,
}

impl ScoreMean {
    /// Five standard errors: the bound a zero-mean score stays under.
    pub fn zero_mean_bound(&self) -> f64 {
        5.0 * self.se_norm
    }

    pub fn is_zero_mean(&self) -> bool {
        self.mean_norm <= self.zero_mean_bound()
    }
}

/// Score mean at `t = T` over `n` draws of the solver's initial state.
pub fn score_mean_stat<S: ScoreSource<f64> + ?Sized>(
    score: &S,
    schedule: &NoiseSchedule,
    dim: usize,
    n: usize,
    seed: u64,
) -> Result<ScoreMean> {
    if n < 2 {
        return Err(LabError::Argument(
            "score mean needs at least 2 draws".into(),
        ));
    }
    let t = schedule.steps();
    let scores = (0..n)
        .into_par_iter()
        .map(|i| {
            score.score(
                &initial_state(schedule, dim, &mut chain_rng(seed, i as u64)),
                t,
            )
        })
        .collect::<mapguide_core::Result<Vec<_>>>()?;
    let nf = n as f64;
    let mean = scores.iter().fold(DVector::zeros(dim), |acc, s| acc + s) / nf;
    let var = scores
        .iter()
        .fold(DVector::zeros(dim), |acc: DVector<f64>, s| {
            let c = s - &mean;
            acc + c.component_mul(&c)
        })
        / (nf - 1.0);
    Ok(ScoreMean {
        n,
        mean_norm: mean.norm(),
        se_norm: (var.sum() / nf).sqrt(),
    })
}

/// Per-dimension standard deviations (`n - 1` denominator).
pub fn per_dim_std(samples: &[DVector<f64>]) -> Result<Vec<f64>> {
    if samples.len() < 2 {
        return Err(LabError::Argument(format!(
            "spread needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let n = samples.len() as f64;
    let d = samples[0].len();
    let mean = samples.iter().fold(DVector::zeros(d), |a, x| a + x) / n;
    let var = samples
        .iter()
        .fold(DVector::zeros(d), |a: DVector<f64>, x| {
            let c = x - &mean;
            a + c.component_mul(&c)
        })
        / (n - 1.0);
    Ok(var.iter().map(|v| v.sqrt()).collect())
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Spread {
    pub method_std: Vec<f64>,
    pub oracle_std: Vec<f64>,
    pub method_mean_std: f64,
    pub oracle_mean_std: f64,
    /// `method_mean_std / oracle_mean_std`.
    pub ratio: f64,
}

pub fn sample_spread(method: &[DVector<f64>], oracle: &[DVector<f64>]) -> Result<Spread> {
    let method_std = per_dim_std(method)?;
    let oracle_std = per_dim_std(oracle)?;
    let (m, o) = (mean(&method_std), mean(&oracle_std));
    Ok(Spread {
        method_std,
        oracle_std,
        method_mean_std: m,
        oracle_mean_std: o,
        ratio: m / o,
    })
}

/// Fraction of samples nearest (per-component Mahalanobis, ties to the
/// lower index) to each mode.
pub fn mode_coverage(samples: &[DVector<f64>], modes: &Gmm) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(LabError::Argument(
            "mode coverage of an empty sample set".into(),
        ));
    }
    let mut counts = vec![0usize; modes.len()];
    for x in samples {
        counts[modes.nearest_component(x)] += 1;
    }
    Ok(counts
        .into_iter()
        .map(|c| c as f64 / samples.len() as f64)
        .collect())
}

/// Nearest-rank quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShellStats {
    pub dim: usize,
    pub n: usize,
    pub sigma: f64,
    /// `sigma = 0`: every ratio is reported as 0.
    pub degenerate: bool,
    pub median_ratio: f64,
    pub q05_ratio: f64,
    pub q95_ratio: f64,
    /// 95% quantile of `| ratio - 1 |`.
    pub q95_deviation: f64,
}

/// Distribution of `||x - mu|| / (sqrt(d) sigma)` for `x ~ N(mu, sigma^2 I)`.
pub fn shell_check(sigma: f64, dim: usize, n: usize, seed: u64) -> ShellStats {
    let degenerate = sigma == 0.0;
    let mut ratios: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            if degenerate {
                return 0.0;
            }
            let mut rng = chain_rng(seed, i as u64);
            let mu = DVector::from_element(dim, 0.25);
            let x = &mu + normal(dim, &mut rng) * sigma;
            (x - mu).norm() / ((dim as f64).sqrt() * sigma)
        })
        .collect();
    let mut devs: Vec<f64> = ratios.iter().map(|r| (r - 1.0).abs()).collect();
    ratios.sort_by(f64::total_cmp);
    devs.sort_by(f64::total_cmp);
    ShellStats {
        dim,
        n,
        sigma,
        degenerate,
        median_ratio: median(&ratios),
        q05_ratio: quantile(&ratios, 0.05),
        q95_ratio: quantile(&ratios, 0.95),
        q95_deviation: quantile(&devs, 0.95),
    }
}

/// [`shell_check`] at the transition noise of step `t`.
pub fn shell_check_at(
    schedule: &NoiseSchedule,
    t: usize,
    dim: usize,
    n: usize,
    seed: u64,
) -> Result<ShellStats> {
    Ok(shell_check(schedule.transition(t)?.sigma, dim, n, seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Implication {
    /// `q = p_uncond` or the premise is not established beyond 3 SE.
    PremiseFalseOrEqual,
    Holds,
    /// Premise true, conclusion neither confirmed nor refuted beyond 3 SE.
    Inconclusive,
    Violated,
}

/// One `lambda` of the cross-entropy check. Cross entropies are reported up
/// to the shared constant `log p(y | x_t)`, which cancels in the comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CrossEntropyRow {
    pub t: usize,
    pub lambda: f64,
    pub h_q: f64,
    pub h_q_se: f64,
    pub h_p: f64,
    pub h_p_se: f64,
    /// `H(q, p_post) - H(p_uncond, p_post)`, from paired draws.
    pub premise_gap: f64,
    pub premise_se: f64,
    pub loglik_q: f64,
    pub loglik_q_se: f64,
    pub loglik_p: f64,
    pub loglik_p_se: f64,
    /// `E_q[log p(y | X)] - E_p[log p(y | X)]`, from paired draws.
    pub gain: f64,
    pub gain_se: f64,
    pub status: Implication,
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Compares the blended transition `q_lambda(x_{t-1} | x_t)` (CSE score)
/// with the unconditional transition `p` as approximations of the posterior
/// transition `p_post ∝ p(y | x_{t-1}) p(x_{t-1} | x_t)`, from one `x_t`
/// drawn from the conditional marginal. Draws for `q` and `p` share noise.
pub fn crossentropy_check(
    problem: &Problem,
    t: usize,
    lambdas: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<CrossEntropyRow>> {
    if !problem.is_conjugate() {
        return Err(LabError::Argument(
            "the cross-entropy check needs a linear-Gaussian measurement".into(),
        ));
    }
    if t < 2 || t > problem.steps() {
        return Err(LabError::Argument(format!(
            "t must lie in 2..={}",
            problem.steps()
        )));
    }
    if n < 2 {
        return Err(LabError::Argument(
            "the cross-entropy check needs at least 2 draws".into(),
        ));
    }
    let posterior = Arc::new(problem.exact_posterior()?);
    let reference = DiffusedFamily::new(posterior.clone(), problem.schedule.clone());
    let family = DiffusedFamily::new(problem.prior.clone(), problem.schedule.clone());
    let tr = problem.schedule.transition(t)?;
    let scaling = problem.schedule.scaling_at(t)?;
    let mut rng = chain_rng(seed, u64::MAX);
    let d = problem.dim();
    let xt = posterior.sample_one(&mut rng) * scaling.scale + normal(d, &mut rng) * scaling.noise;
    let s_ref = reference.score(&xt, t)?;
    let s_u = family.score(&xt, t)?;
    let mean_p = &xt * tr.x_coeff + &s_u * tr.score_coeff;
    let lik = StateLikelihood::new(family.at(t - 1)?, &problem.meas)?;
    let sigma = tr.sigma;
    // log p(y | x) + log p(x | x_t), dropping the Gaussian normalizer.
    let log_post = |x: &DVector<f64>| -> Result<(f64, f64)> {
        let ll = lik.eval(x)?.0;
        Ok((
            ll,
            ll - (x - &mean_p).norm_squared() / (2.0 * sigma * sigma),
        ))
    };
    lambdas
        .iter()
        .map(|&lambda| {
            let s = &s_ref * (1.0 - lambda) + &s_u * lambda;
            let mean_q = &xt * tr.x_coeff + s * tr.score_coeff;
            let draws = (0..n)
                .into_par_iter()
                .map(|i| {
                    let z = normal(d, &mut chain_rng(seed, i as u64)) * sigma;
                    let (ll_q, lp_q) = log_post(&(&mean_q + &z))?;
                    let (ll_p, lp_p) = log_post(&(&mean_p + &z))?;
                    Ok([ll_q, lp_q, ll_p, lp_p])
                })
                .collect::<Result<Vec<_>>>()?;
            let col = |k: usize| draws.iter().map(|r| r[k]).collect::<Vec<_>>();
            let neg = |v: Vec<f64>| v.into_iter().map(|x| -x).collect::<Vec<_>>();
            let (h_q, h_q_se) = mean_se(&neg(col(1)));
            let (h_p, h_p_se) = mean_se(&neg(col(3)));
            let (loglik_q, loglik_q_se) = mean_se(&col(0));
            let (loglik_p, loglik_p_se) = mean_se(&col(2));
            let (premise_gap, premise_se) =
                mean_se(&draws.iter().map(|r| r[3] - r[1]).collect::<Vec<_>>());
            let (gain, gain_se) = mean_se(&draws.iter().map(|r| r[0] - r[2]).collect::<Vec<_>>());
            let status = if lambda == 1.0 || premise_gap >= -3.0 * premise_se {
                Implication::PremiseFalseOrEqual
            } else if gain > 3.0 * gain_se {
                Implication::Holds
            } else if gain < -3.0 * gain_se {
                Implication::Violated
            } else {
                Implication::Inconclusive
            };
            Ok(CrossEntropyRow {
                t,
                lambda,
                h_q,
                h_q_se,
                h_p,
                h_p_se,
                premise_gap,
                premise_se,
                loglik_q,
                loglik_q_se,
                loglik_p,
                loglik_p_se,
                gain,
                gain_se,
                status,
            })
        })
        .collect()
}
