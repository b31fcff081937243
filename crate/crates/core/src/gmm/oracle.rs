//! Brute-force posterior references for non-conjugate likelihoods.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use super::denoise::Denoiser;
use super::measurement::{Likelihood, MeasurementModel};
use super::mixture::{Covariance, DiffusionScaling, GaussianMixture};
use crate::error::{check_dim, Error, Result};
use crate::scalar::{log_sum_exp, Real};

/// Effective sample sizes below this are flagged.
pub const MIN_EFFECTIVE_SAMPLE_SIZE: f64 = 50.0;

/// Self-normalized importance sample of `p(X0 | y)` with the prior as proposal.
#[derive(Debug, Clone)]
pub struct WeightedSamples<T: Real> {
    pub samples: Vec<DVector<T>>,
    /// Normalized importance weights.
    pub weights: Vec<T>,
    /// Prior component each sample was drawn from.
    pub labels: Vec<usize>,
    pub effective_sample_size: T,
    pub low_ess: bool,
}

impl<T: Real> WeightedSamples<T> {
    /// Posterior mass of each prior component, `P(k | y)`.
    pub fn component_masses(&self, n_components: usize) -> Vec<T> {
        let mut out = vec![T::zero(); n_components];
        for (&k, &w) in self.labels.iter().zip(&self.weights) {
            out[k] += w;
        }
        out
    }

    /// Posterior mass of each region under an arbitrary assignment.
    pub fn masses_by<F: Fn(&DVector<T>) -> usize>(&self, n: usize, assign: F) -> Vec<T> {
        let mut out = vec![T::zero(); n];
        for (x, &w) in self.samples.iter().zip(&self.weights) {
            out[assign(x)] += w;
        }
        out
    }

    pub fn mean(&self) -> DVector<T> {
        let mut out = DVector::zeros(self.samples[0].len());
        for (x, &w) in self.samples.iter().zip(&self.weights) {
            out.axpy(w, x, T::one());
        }
        out
    }

    /// Multinomial resampling to an unweighted set.
    pub fn resample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<DVector<T>> {
        let mut cdf = Vec::with_capacity(self.weights.len());
        let mut acc = 0.0;
        for w in &self.weights {
            acc += w.as_f64();
            cdf.push(acc);
        }
        (0..n)
            .map(|_| {
                let u: f64 = rng.random::<f64>() * acc;
                let i = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
                self.samples[i].clone()
            })
            .collect()
    }
}

/// Importance-sample `p(X0 | y)` from `n` prior draws.
pub fn posterior_oracle<T: Real, R: Rng + ?Sized>(
    prior: &GaussianMixture<T>,
    meas: &MeasurementModel<T>,
    n: usize,
    rng: &mut R,
) -> Result<WeightedSamples<T>> {
    check_dim(prior.dim(), meas.operator().input_dim())?;
    if n == 0 {
        return Err(Error::Argument("oracle needs at least one sample".into()));
    }
    if let Likelihood::Gaussian { sigma_y } = meas.likelihood() {
        if sigma_y == T::zero() {
            return Err(Error::Domain(
                "importance weights vanish almost surely for a noiseless measurement; use exact conditioning".into(),
            ));
        }
    }
    let weights = prior.weights();
    let mut samples = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut logs = Vec::with_capacity(n);
    for _ in 0..n {
        let k = pick(&weights, rng);
        let z = crate::linalg::standard_normal(prior.dim(), rng);
        let x = prior.components()[k].transform(&z);
        logs.push(meas.log_likelihood(&x)?);
        samples.push(x);
        labels.push(k);
    }
    let lse = log_sum_exp(&logs);
    let w: Vec<T> = logs.iter().map(|&l| (l - lse).exp()).collect();
    let ess = T::one() / w.iter().fold(T::zero(), |acc, &x| acc + x * x);
    Ok(WeightedSamples {
        samples,
        weights: w,
        labels,
        effective_sample_size: ess,
        low_ess: ess.as_f64() < MIN_EFFECTIVE_SAMPLE_SIZE,
    })
}

fn pick<T: Real, R: Rng + ?Sized>(weights: &[T], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w.as_f64();
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Uniform tensor grid over `[lo, hi]^d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub resolution: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            lo: -3.0,
            hi: 3.0,
            resolution: 400,
        }
    }
}

/// Posterior masses from grid quadrature.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMasses<T: Real> {
    /// `P(k | y)` per prior component.
    pub component: Vec<T>,
    /// Mass of the region nearest (Mahalanobis) to each component.
    pub nearest: Vec<T>,
}

/// Mode masses of `p(X0 | y)` by midpoint quadrature, for `d <= 3`.
pub fn grid_posterior_masses<T: Real>(
    prior: &GaussianMixture<T>,
    meas: &MeasurementModel<T>,
    grid: GridSpec,
) -> Result<GridMasses<T>> {
    let d = prior.dim();
    if d > 3 {
        return Err(Error::Argument(format!(
            "grid quadrature supports d <= 3, got {d}"
        )));
    }
    if grid.resolution == 0 || !(grid.hi > grid.lo) {
        return Err(Error::Argument(
            "grid needs a positive resolution and hi > lo".into(),
        ));
    }
    let h = (grid.hi - grid.lo) / grid.resolution as f64;
    let total = grid.resolution.pow(d as u32);
    let k = prior.len();
    let mut comp_logs: Vec<Vec<T>> = vec![Vec::with_capacity(total); k];
    let mut near_logs: Vec<Vec<T>> = vec![Vec::new(); k];
    let mut x = DVector::zeros(d);
    for flat in 0..total {
        let mut rem = flat;
        for j in 0..d {
            x[j] = T::lit(grid.lo + h * ((rem % grid.resolution) as f64 + 0.5));
            rem /= grid.resolution;
        }
        let ll = meas.log_likelihood(&x)?;
        let joint = prior.joint_log_densities(&x)?;
        for (c, &jl) in joint.iter().enumerate() {
            comp_logs[c].push(jl + ll);
        }
        near_logs[prior.nearest_component(&x)].push(log_sum_exp(&joint) + ll);
    }
    let comp: Vec<T> = comp_logs.iter().map(|v| log_sum_exp(v)).collect();
    let near: Vec<T> = near_logs.iter().map(|v| log_sum_exp(v)).collect();
    Ok(GridMasses {
        component: super::mixture::normalize_log(&comp),
        nearest: super::mixture::normalize_log(&near),
    })
}

/// Gauss-Hermite nodes and weights for `int e^{-z^2} f(z) dz`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        let b = (i as f64 / 2.0).sqrt();
        jac[(i, i - 1)] = b;
        jac[(i - 1, i)] = b;
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            (
                eig.eigenvalues[i],
                std::f64::consts::PI.sqrt() * eig.eigenvectors[(0, i)].powi(2),
            )
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Conditional score `grad log p(x_t | y)` for any likelihood, by
/// Gauss-Hermite quadrature of `E[X0 | x_t, y]` under each component of
/// `p(X0 | x_t)`. Only practical for `d <= 3`.
#[derive(Debug, Clone)]
pub struct QuadratureConditional<T: Real> {
    prior: Arc<GaussianMixture<T>>,
    meas: MeasurementModel<T>,
    /// Standard-normal nodes with probability weights.
    nodes: Vec<(DVector<T>, T)>,
}

impl<T: Real> QuadratureConditional<T> {
    pub fn new(
        prior: Arc<GaussianMixture<T>>,
        meas: MeasurementModel<T>,
        order: usize,
    ) -> Result<Self> {
        let d = prior.dim();
        check_dim(d, meas.operator().input_dim())?;
        if d > 3 {
            return Err(Error::Argument(format!(
                "quadrature conditional supports d <= 3, got {d}"
            )));
        }
        if let Likelihood::Gaussian { sigma_y } = meas.likelihood() {
            if sigma_y == T::zero() {
                return Err(Error::Domain(
                    "noiseless likelihood has no density to integrate".into(),
                ));
            }
        }
        if order == 0 {
            return Err(Error::Argument("quadrature order must be positive".into()));
        }
        let (z, w) = gauss_hermite(order);
        let norm = std::f64::consts::PI.powf(-(d as f64) / 2.0);
        let total = order.pow(d as u32);
        let mut nodes = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rem = flat;
            let mut p = DVector::zeros(d);
            let mut wt = norm;
            for j in 0..d {
                let i = rem % order;
                rem /= order;
                p[j] = T::lit(std::f64::consts::SQRT_2 * z[i]);
                wt *= w[i];
            }
            nodes.push((p, T::lit(wt)));
        }
        Ok(Self { prior, meas, nodes })
    }

    /// `E[X0 | x_t, y]`.
    pub fn posterior_mean(
        &self,
        scaling: DiffusionScaling<T>,
        x: &DVector<T>,
    ) -> Result<DVector<T>> {
        let den = Denoiser::new(self.prior.clone(), scaling)?;
        let local = den.local(x)?;
        let d = x.len();
        let mut log_mass = Vec::new();
        let mut means = Vec::new();
        for (k, (&r, m)) in local
            .responsibilities()
            .iter()
            .zip(local.component_means())
            .enumerate()
        {
            if r == T::zero() {
                continue;
            }
            let cov = den.component_posterior_covariance(k);
            let root = sqrt_cov(&cov, d);
            let pts: Vec<DVector<T>> = self.nodes.iter().map(|(z, _)| m + &root * z).collect();
            let lls = pts
                .iter()
                .map(|p| self.meas.log_likelihood(p))
                .collect::<Result<Vec<T>>>()?;
            let shift = lls.iter().copied().fold(T::neg_infinity(), T::max);
            let mut mass = T::zero();
            let mut first = DVector::zeros(d);
            for ((p, (_, w)), &ll) in pts.iter().zip(&self.nodes).zip(&lls) {
                let c = *w * (ll - shift).exp();
                mass += c;
                first.axpy(c, p, T::one());
            }
            log_mass.push(r.ln() + shift + mass.ln());
            means.push(first / mass);
        }
        let weights = super::mixture::normalize_log(&log_mass);
        let mut out = DVector::zeros(d);
        for (w, m) in weights.iter().zip(&means) {
            out.axpy(*w, m, T::one());
        }
        Ok(out)
    }

    /// `(a E[X0 | x_t, y] - x_t) / sigma^2`.
    pub fn score(&self, scaling: DiffusionScaling<T>, x: &DVector<T>) -> Result<DVector<T>> {
        if scaling.noise == T::zero() {
            return Err(Error::Domain(
                "conditional score needs positive noise".into(),
            ));
        }
        let m = self.posterior_mean(scaling, x)?;
        Ok((m * scaling.scale - x) / (scaling.noise * scaling.noise))
    }
}

fn sqrt_cov<T: Real>(cov: &Covariance<T>, d: usize) -> DMatrix<T> {
    match cov {
        Covariance::Iso(v) => DMatrix::identity(d, d) * v.max(T::zero()).sqrt(),
        Covariance::Dense(m) => {
            let eig = SymmetricEigen::new(m.clone());
            let vals = eig.eigenvalues.map(|l| l.max(T::zero()).sqrt());
            &eig.eigenvectors * DMatrix::from_diagonal(&vals)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::denoise::{condition_on_measurement, conditional_score_reference};
    use crate::operators::LinearOp;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    fn toy() -> GaussianMixture<f64> {
        GaussianMixture::new(vec![
            (0.5, v(&[1.0, 1.0]), Covariance::Iso(0.09)),
            (0.5, v(&[-1.0, -1.0]), Covariance::Iso(0.09)),
        ])
        .unwrap()
    }

    fn toy_meas(zeta: f64) -> MeasurementModel<f64> {
        toy_meas_at(zeta, 0.5)
    }

    fn toy_meas_at(zeta: f64, y0: f64) -> MeasurementModel<f64> {
        MeasurementModel::new(
            LinearOp::inpaint(vec![0], 2).unwrap(),
            Likelihood::NormExponential { zeta },
            v(&[y0, 0.0]),
        )
        .unwrap()
    }

    #[test]
    fn hermite_rule_integrates_moments() {
        let (z, w) = gauss_hermite(10);
        let m0: f64 = w.iter().sum();
        let m2: f64 = z.iter().zip(&w).map(|(z, w)| w * z * z).sum();
        let m4: f64 = z.iter().zip(&w).map(|(z, w)| w * z.powi(4)).sum();
        let rt = std::f64::consts::PI.sqrt();
        assert!((m0 - rt).abs() < 1e-12);
        assert!((m2 - rt / 2.0).abs() < 1e-12);
        assert!((m4 - 0.75 * rt).abs() < 1e-12);
    }

    #[test]
    fn toy_grid_masses() {
        let g = grid_posterior_masses(&toy(), &toy_meas(0.05), GridSpec::default()).unwrap();
        assert!((g.component[0] - 0.512).abs() < 2e-3, "{:?}", g.component);
        assert!((g.nearest[0] - 0.512).abs() < 2e-3, "{:?}", g.nearest);
    }

    #[test]
    fn toy_importance_masses() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let o = posterior_oracle(&toy(), &toy_meas(0.05), 100_000, &mut rng).unwrap();
        assert!(!o.low_ess);
        let m = o.component_masses(2);
        assert!((m[0] - 0.512).abs() < 0.01, "{m:?}");
    }

    #[test]
    fn sharp_likelihood_concentrates() {
        let g =
            grid_posterior_masses(&toy(), &toy_meas_at(200.0, 1.0), GridSpec::default()).unwrap();
        assert!(g.component[0] > 1.0 - 1e-6);
    }

    #[test]
    fn gaussian_oracle_matches_exact_weights() {
        let meas = MeasurementModel::new(
            LinearOp::select(vec![0], 2).unwrap(),
            Likelihood::Gaussian { sigma_y: 0.8 },
            v(&[0.3]),
        )
        .unwrap();
        let exact = condition_on_measurement(&toy(), &meas).unwrap().weights();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let o = posterior_oracle(&toy(), &meas, 200_000, &mut rng).unwrap();
        let m = o.component_masses(2);
        assert!((m[0] - exact[0]).abs() < 0.01, "{m:?} vs {exact:?}");
    }

    #[test]
    fn noiseless_oracle_is_rejected() {
        let meas = MeasurementModel::new(
            LinearOp::select(vec![0], 2).unwrap(),
            Likelihood::Gaussian { sigma_y: 0.0 },
            v(&[0.3]),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(posterior_oracle(&toy(), &meas, 10, &mut rng).is_err());
    }

    #[test]
    fn low_ess_is_flagged() {
        let meas = MeasurementModel::new(
            LinearOp::<f64>::Dense(DMatrix::identity(2, 2)),
            Likelihood::Gaussian { sigma_y: 1e-3 },
            v(&[1.0, 1.0]),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let o = posterior_oracle(&toy(), &meas, 1000, &mut rng).unwrap();
        assert!(o.low_ess);
    }

    #[test]
    fn quadrature_matches_closed_form_for_gaussian_likelihood() {
        let meas = MeasurementModel::new(
            LinearOp::select(vec![0], 2).unwrap(),
            Likelihood::Gaussian { sigma_y: 0.5 },
            v(&[0.5]),
        )
        .unwrap();
        let q = QuadratureConditional::new(Arc::new(toy()), meas.clone(), 24).unwrap();
        for (sigma, x) in [
            (0.05, v(&[0.4, 0.9])),
            (1.0, v(&[0.1, -0.3])),
            (4.0, v(&[2.0, 1.0])),
        ] {
            let s = DiffusionScaling::variance_exploding(sigma);
            let a = q.score(s, &x).unwrap();
            let b = conditional_score_reference(&toy(), &meas, s, &x).unwrap();
            assert!((&a - &b).norm() <= 1e-8 * b.norm().max(1.0), "{a} vs {b}");
        }
    }
}
