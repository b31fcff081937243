//! Posterior-mean (Tweedie) machinery and exact Gaussian conditioning.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};

use super::measurement::{Likelihood, MeasurementModel};
use super::mixture::{Covariance, DiffusionScaling, GaussianMixture};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{add_diagonal, symmetrize};
use crate::scalar::{log_sum_exp, Real};

/// A prior together with its diffused marginal at one noise level.
///
/// Holds everything needed for `E[X0 | x_t]`, its Jacobian, and products with
/// the Jacobian transpose. Construction fails when the scale is zero, since
/// the posterior mean is then undefined.
#[derive(Debug, Clone)]
pub struct Denoiser<T: Real> {
    prior: Arc<GaussianMixture<T>>,
    scaling: DiffusionScaling<T>,
    diffused: GaussianMixture<T>,
}

/// Per-component quantities evaluated at one state `x_t`.
#[derive(Debug, Clone)]
pub struct LocalPosterior<'a, T: Real> {
    denoiser: &'a Denoiser<T>,
    x: DVector<T>,
    resp: Vec<T>,
    /// `grad log N_k(x)` under the diffused component.
    grads: Vec<DVector<T>>,
    /// `E[X0 | x, k]`.
    means: Vec<DVector<T>>,
    score: DVector<T>,
}

impl<T: Real> Denoiser<T> {
    pub fn new(prior: Arc<GaussianMixture<T>>, scaling: DiffusionScaling<T>) -> Result<Self> {
        if !(scaling.scale > T::zero()) {
            return Err(Error::Domain(
                "posterior mean is undefined for a zero scale".into(),
            ));
        }
        let diffused = prior.diffuse(scaling);
        Ok(Self {
            prior,
            scaling,
            diffused,
        })
    }

    pub fn prior(&self) -> &GaussianMixture<T> {
        &self.prior
    }

    pub fn scaling(&self) -> DiffusionScaling<T> {
        self.scaling
    }

    pub fn diffused(&self) -> &GaussianMixture<T> {
        &self.diffused
    }

    /// Score of the diffused marginal.
    pub fn score(&self, x: &DVector<T>) -> Result<DVector<T>> {
        self.diffused.score(x)
    }

    pub fn local(&self, x: &DVector<T>) -> Result<LocalPosterior<'_, T>> {
        check_dim(self.prior.dim(), x.len())?;
        let resp = self.diffused.responsibilities(x)?;
        let a = self.scaling.scale;
        let mut grads = Vec::with_capacity(resp.len());
        let mut means = Vec::with_capacity(resp.len());
        let mut score = DVector::zeros(x.len());
        for ((pc, dc), &r) in self
            .prior
            .components()
            .iter()
            .zip(self.diffused.components())
            .zip(&resp)
        {
            let g = dc
                .solve(&(dc.mean() - x))
                .expect("diffused component is regular");
            let m = pc.mean() - pc.covariance().mul_vec(&g) * a;
            if r > T::zero() {
                score.axpy(r, &g, T::one());
            }
            grads.push(g);
            means.push(m);
        }
        Ok(LocalPosterior {
            denoiser: self,
            x: x.clone(),
            resp,
            grads,
            means,
            score,
        })
    }

    /// `E[X0 | x_t]` as the responsibility-weighted conjugate means.
    pub fn posterior_mean(&self, x: &DVector<T>) -> Result<DVector<T>> {
        Ok(self.local(x)?.mean())
    }

    /// `E[X0 | x_t] = (x_t + sigma^2 * score(x_t)) / a`.
    pub fn tweedie_mean(&self, x: &DVector<T>) -> Result<DVector<T>> {
        let s = self.diffused.score(x)?;
        let DiffusionScaling { scale, noise } = self.scaling;
        Ok((x + s * (noise * noise)) / scale)
    }

    pub fn jacobian(&self, x: &DVector<T>) -> Result<DMatrix<T>> {
        Ok(self.local(x)?.jacobian())
    }

    /// `Cov[X0 | x_t, k] = Sigma_k - a^2 Sigma_k C_k^{-1} Sigma_k`.
    pub fn component_posterior_covariance(&self, k: usize) -> Covariance<T> {
        let a = self.scaling.scale;
        let pc = &self.prior.components()[k];
        let dc = &self.diffused.components()[k];
        match (pc.covariance(), dc.covariance()) {
            (Covariance::Iso(v), Covariance::Iso(c)) => Covariance::Iso(*v - a * a * *v * *v / *c),
            _ => {
                let d = self.prior.dim();
                let sigma = pc.covariance().to_dense(d);
                let cinv_sigma = DMatrix::from_columns(
                    &sigma
                        .column_iter()
                        .map(|col| dc.solve(&col.into_owned()).expect("regular"))
                        .collect::<Vec<_>>(),
                );
                let mut p = &sigma - &sigma * cinv_sigma * (a * a);
                symmetrize(&mut p);
                Covariance::Dense(p)
            }
        }
    }

    /// `M_k^T v = a C_k^{-1} Sigma_k v`, the transpose of the component-mean Jacobian.
    fn component_gain_t(&self, k: usize, v: &DVector<T>) -> DVector<T> {
        let pc = &self.prior.components()[k];
        let dc = &self.diffused.components()[k];
        dc.solve(&pc.covariance().mul_vec(v)).expect("regular") * self.scaling.scale
    }
}

impl<T: Real> LocalPosterior<'_, T> {
    pub fn responsibilities(&self) -> &[T] {
        &self.resp
    }

    pub fn component_means(&self) -> &[DVector<T>] {
        &self.means
    }

    /// Score of the diffused marginal at this state.
    pub fn score(&self) -> &DVector<T> {
        &self.score
    }

    pub fn state(&self) -> &DVector<T> {
        &self.x
    }

    pub fn mean(&self) -> DVector<T> {
        let mut out = DVector::zeros(self.x.len());
        for (m, &r) in self.means.iter().zip(&self.resp) {
            if r > T::zero() {
                out.axpy(r, m, T::one());
            }
        }
        out
    }

    /// `J^T v` where `J = dE[X0|x]/dx = sum_k r_k M_k + sum_k r_k m_k (g_k - gbar)^T`.
    pub fn vjp(&self, v: &DVector<T>) -> DVector<T> {
        let mut out = DVector::zeros(self.x.len());
        for k in 0..self.resp.len() {
            let r = self.resp[k];
            if r == T::zero() {
                continue;
            }
            out.axpy(r, &self.denoiser.component_gain_t(k, v), T::one());
            let coef = r * self.means[k].dot(v);
            out.axpy(coef, &self.grads[k], T::one());
            out.axpy(-coef, &self.score, T::one());
        }
        out
    }

    /// Dense Jacobian of the posterior mean.
    pub fn jacobian(&self) -> DMatrix<T> {
        let d = self.x.len();
        let mut j = DMatrix::zeros(d, d);
        for k in 0..self.resp.len() {
            let r = self.resp[k];
            if r == T::zero() {
                continue;
            }
            // M_k = (M_k^T)^T, built column-wise from gain-transpose products.
            let mut mt = DMatrix::zeros(d, d);
            let mut e = DVector::zeros(d);
            for c in 0..d {
                e[c] = T::one();
                mt.set_column(c, &self.denoiser.component_gain_t(k, &e));
                e[c] = T::zero();
            }
            j += mt.transpose() * r;
            let dg = &self.grads[k] - &self.score;
            j += (&self.means[k] * dg.transpose()) * r;
        }
        j
    }
}

/// `E[X0 | x_t]` for `x_t = a X0 + sigma eps`, `X0 ~ prior`.
pub fn posterior_mean<T: Real>(
    prior: &GaussianMixture<T>,
    scaling: DiffusionScaling<T>,
    x: &DVector<T>,
) -> Result<DVector<T>> {
    Denoiser::new(Arc::new(prior.clone()), scaling)?.posterior_mean(x)
}

/// `dE[X0 | x_t] / dx_t`.
pub fn posterior_mean_jacobian<T: Real>(
    prior: &GaussianMixture<T>,
    scaling: DiffusionScaling<T>,
    x: &DVector<T>,
) -> Result<DMatrix<T>> {
    Denoiser::new(Arc::new(prior.clone()), scaling)?.jacobian(x)
}

fn gaussian_linear_parts<T: Real>(meas: &MeasurementModel<T>) -> Result<(DMatrix<T>, T)> {
    let sigma_y = match meas.likelihood() {
        Likelihood::Gaussian { sigma_y } => sigma_y,
        Likelihood::NormExponential { .. } => {
            return Err(Error::Argument(
                "closed-form conditioning needs a Gaussian likelihood".into(),
            ))
        }
    };
    let op = meas.operator().as_linear().ok_or_else(|| {
        Error::Argument("closed-form conditioning needs a linear operator".into())
    })?;
    Ok((op.matrix(), sigma_y))
}

fn gaussian_log_pdf_dense<T: Real>(r: &DVector<T>, chol: &Cholesky<T, nalgebra::Dyn>) -> T {
    let m = T::lit(r.len() as f64);
    let log_det = chol
        .l_dirty()
        .diagonal()
        .iter()
        .fold(T::zero(), |acc, d| acc + d.ln())
        * T::lit(2.0);
    let maha = r.dot(&chol.solve(r));
    -(m * T::two_pi().ln() + log_det + maha) * T::lit(0.5)
}

/// Exact `p(X0 | y)` for a linear-Gaussian measurement.
///
/// Component `k` is reweighted by `N(y; A mu_k, A Sigma_k A^T + sigma_y^2 I)`
/// and updated with the usual Kalman gain. With `sigma_y = 0` every posterior
/// covariance is rank-deficient and the result is flagged degenerate; diffuse
/// it with positive noise before taking scores.
pub fn condition_on_measurement<T: Real>(
    prior: &GaussianMixture<T>,
    meas: &MeasurementModel<T>,
) -> Result<GaussianMixture<T>> {
    check_dim(prior.dim(), meas.operator().input_dim())?;
    let (a, sigma_y) = gaussian_linear_parts(meas)?;
    let y = meas.y();
    let d = prior.dim();
    let mut parts = Vec::with_capacity(prior.len());
    for c in prior.components() {
        let sigma = c.covariance().to_dense(d);
        let sigma_at = &sigma * a.transpose();
        let mut s = &a * &sigma_at;
        add_diagonal(&mut s, sigma_y * sigma_y);
        symmetrize(&mut s);
        let chol = Cholesky::new(s).ok_or_else(|| {
            Error::Precondition("measurement covariance A Sigma A^T + sigma_y^2 I is singular (rank-deficient operator)".into())
        })?;
        let resid = y - &a * c.mean();
        let log_w = c.log_weight() + gaussian_log_pdf_dense(&resid, &chol);
        // gain^T = S^{-1} A Sigma
        let gain_t = chol.solve(&sigma_at.transpose());
        let mean = c.mean() + gain_t.tr_mul(&resid);
        let mut cov = &sigma - sigma_at * &gain_t;
        symmetrize(&mut cov);
        parts.push((log_w, mean, Covariance::Dense(cov)));
    }
    GaussianMixture::from_log_weights(parts, sigma_y == T::zero())
}

/// Exact conditional score `grad log p(x_t | y)`: the score of the diffused
/// closed-form posterior.
pub fn conditional_score_reference<T: Real>(
    prior: &GaussianMixture<T>,
    meas: &MeasurementModel<T>,
    scaling: DiffusionScaling<T>,
    x: &DVector<T>,
) -> Result<DVector<T>> {
    let cond = condition_on_measurement(prior, meas)?;
    let diffused = cond.diffuse(scaling);
    if diffused.is_degenerate() {
        return Err(Error::Domain(
            "conditional marginal is degenerate at zero noise".into(),
        ));
    }
    diffused.score(x)
}

/// `log p(y | x_t)` and `grad_{x_t} log p(y | x_t)` in closed form for a
/// linear-Gaussian measurement.
///
/// `p(X0 | x_t)` is a Gaussian mixture, so `p(y | x_t)` is one too:
/// `sum_k r_k(x_t) N(y; A m_k(x_t), A P_k A^T + sigma_y^2 I)`.
pub fn likelihood_given_state<T: Real>(
    denoiser: &Denoiser<T>,
    meas: &MeasurementModel<T>,
    x: &DVector<T>,
) -> Result<(T, DVector<T>)> {
    StateLikelihood::new(denoiser, meas)?.eval(x)
}

/// [`likelihood_given_state`] with the per-component factorizations of
/// `A P_k A^T + sigma_y^2 I` computed once, for repeated evaluation at one
/// noise level.
#[derive(Debug, Clone)]
pub struct StateLikelihood<'a, T: Real> {
    denoiser: &'a Denoiser<T>,
    y: DVector<T>,
    a: DMatrix<T>,
    chols: Vec<Cholesky<T, nalgebra::Dyn>>,
}

impl<'a, T: Real> StateLikelihood<'a, T> {
    pub fn new(denoiser: &'a Denoiser<T>, meas: &MeasurementModel<T>) -> Result<Self> {
        check_dim(denoiser.prior().dim(), meas.operator().input_dim())?;
        let (a, sigma_y) = gaussian_linear_parts(meas)?;
        let d = denoiser.prior().dim();
        let chols = (0..denoiser.prior().len())
            .map(|k| {
                let p = denoiser.component_posterior_covariance(k).to_dense(d);
                let mut v = &a * p * a.transpose();
                add_diagonal(&mut v, sigma_y * sigma_y);
                symmetrize(&mut v);
                Cholesky::new(v).ok_or_else(|| {
                    Error::Domain("p(y | x_t) is degenerate at this noise level".into())
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            denoiser,
            y: meas.y().clone(),
            a,
            chols,
        })
    }

    /// `(log p(y | x), grad_x log p(y | x))`.
    pub fn eval(&self, x: &DVector<T>) -> Result<(T, DVector<T>)> {
        let local = self.denoiser.local(x)?;
        let mut log_terms = Vec::new();
        let mut directions = Vec::new();
        for (k, chol) in self.chols.iter().enumerate() {
            let r = local.resp[k];
            if r == T::zero() {
                continue;
            }
            let resid = &self.y - &self.a * &local.means[k];
            log_terms.push(r.ln() + gaussian_log_pdf_dense(&resid, chol));
            let pull = self.a.tr_mul(&chol.solve(&resid));
            let dir = self.denoiser.component_gain_t(k, &pull) + &local.grads[k] - &local.score;
            directions.push(dir);
        }
        let lse = log_sum_exp(&log_terms);
        let mut grad = DVector::zeros(x.len());
        for (lt, dir) in log_terms.iter().zip(&directions) {
            grad.axpy((*lt - lse).exp(), dir, T::one());
        }
        Ok((lse, grad))
    }
}
