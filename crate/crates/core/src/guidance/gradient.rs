use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::gmm::Denoiser;
use crate::gmm::{DiffusionScaling, GaussianMixture, MeasurementModel};
use crate::scalar::Real;

/// Residual norms below this clamp the gradient to zero.
pub const RESIDUAL_FLOOR: f64 = 1e-12;

/// `grad_x ||f(E[X0|x]) - y||` and the residual norm.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementGradient<T: Real> {
    pub grad: DVector<T>,
    pub residual: T,
    /// `E[X0 | x]` at the evaluation point.
    pub x0_hat: DVector<T>,
}

/// Gradient of the un-squared residual norm through the posterior mean.
pub fn gradient_with<T: Real>(
    denoiser: &Denoiser<T>,
    meas: &MeasurementModel<T>,
    x: &DVector<T>,
) -> Result<MeasurementGradient<T>> {
    let local = denoiser.local(x)?;
    let x0_hat = local.mean();
    let r = meas.residual(&x0_hat)?;
    let residual = r.norm();
    if residual < T::lit(RESIDUAL_FLOOR) {
        return Ok(MeasurementGradient {
            grad: DVector::zeros(x.len()),
            residual,
            x0_hat,
        });
    }
    let unit = r / residual;
    let pulled = meas.operator().vjp(&x0_hat, &unit)?;
    Ok(MeasurementGradient {
        grad: local.vjp(&pulled),
        residual,
        x0_hat,
    })
}

/// `grad_x ||f(E[X0|x]) - y||` for `x` at diffusion level `scaling`.
pub fn measurement_gradient<T: Real>(
    prior: &GaussianMixture<T>,
    scaling: DiffusionScaling<T>,
    meas: &MeasurementModel<T>,
    x: &DVector<T>,
) -> Result<MeasurementGradient<T>> {
    let den = Denoiser::new(Arc::new(prior.clone()), scaling)?;
    gradient_with(&den, meas, x)
}

/// Identity-codec PSLD gluing term: `grad_x ||A^T A x0_hat - A^T y||` and its
/// residual norm. Linear operators only.
pub fn gluing_gradient_with<T: Real>(
    denoiser: &Denoiser<T>,
    meas: &MeasurementModel<T>,
    x: &DVector<T>,
) -> Result<(DVector<T>, T)> {
    let op = meas.operator().as_linear().ok_or_else(|| {
        Error::Argument("PSLD gluing is only defined for linear operators".into())
    })?;
    let local = denoiser.local(x)?;
    let x0_hat = local.mean();
    let r = op.transpose_apply(&(op.apply(&x0_hat)? - meas.y()))?;
    let norm = r.norm();
    if norm < T::lit(RESIDUAL_FLOOR) {
        return Ok((DVector::zeros(x.len()), norm));
    }
    let pulled = op.transpose_apply(&op.apply(&(r / norm))?)?;
    Ok((local.vjp(&pulled), norm))
}

pub fn psld_gluing_gradient<T: Real>(
    prior: &GaussianMixture<T>,
    scaling: DiffusionScaling<T>,
    meas: &MeasurementModel<T>,
    x: &DVector<T>,
) -> Result<(DVector<T>, T)> {
    let den = Denoiser::new(Arc::new(prior.clone()), scaling)?;
    gluing_gradient_with(&den, meas, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::{Covariance, Likelihood};
    use crate::operators::LinearOp;
    use nalgebra::DMatrix;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    #[test]
    fn identity_operator_single_gaussian() {
        let (tau2, sigma) = (0.5, 0.8);
        let prior = GaussianMixture::gaussian(v(&[0.0, 0.0]), Covariance::Iso(tau2)).unwrap();
        let y = v(&[1.0, 2.0]);
        let meas = MeasurementModel::new(
            LinearOp::Dense(DMatrix::identity(2, 2)),
            Likelihood::Gaussian { sigma_y: 0.1 },
            y.clone(),
        )
        .unwrap();
        let x = v(&[-0.3, 0.4]);
        let g = measurement_gradient(
            &prior,
            DiffusionScaling::variance_exploding(sigma),
            &meas,
            &x,
        )
        .unwrap();
        let gain = tau2 / (tau2 + sigma * sigma);
        let r = &x * gain - &y;
        let expected = &r / r.norm() * gain;
        assert!((g.grad - expected).norm() < 1e-14);
        assert!((g.residual - r.norm()).abs() < 1e-14);
    }

    #[test]
    fn exact_hit_is_clamped() {
        let prior = GaussianMixture::gaussian(v(&[0.0, 0.0]), Covariance::Iso(1.0)).unwrap();
        let meas = MeasurementModel::new(
            LinearOp::select(vec![0], 2).unwrap(),
            Likelihood::Gaussian { sigma_y: 0.1 },
            v(&[0.25]),
        )
        .unwrap();
        // VE sigma = 1: E[X0|x] = x / 2.
        let g = measurement_gradient(
            &prior,
            DiffusionScaling::variance_exploding(1.0),
            &meas,
            &v(&[0.5, 3.0]),
        )
        .unwrap();
        assert_eq!(g.grad, DVector::zeros(2));
        assert!(g.residual < 1e-12);
    }

    #[test]
    fn zero_scale_is_domain_error() {
        let prior = GaussianMixture::gaussian(v(&[0.0]), Covariance::Iso(1.0)).unwrap();
        let meas = MeasurementModel::new(
            LinearOp::Dense(DMatrix::identity(1, 1)),
            Likelihood::Gaussian { sigma_y: 0.1 },
            v(&[0.0]),
        )
        .unwrap();
        let r = measurement_gradient(
            &prior,
            DiffusionScaling::new(0.0, 1.0).unwrap(),
            &meas,
            &v(&[1.0]),
        );
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn gluing_with_identity_matches_dps_direction() {
        let prior = GaussianMixture::gaussian(v(&[0.0, 0.0]), Covariance::Iso(1.0)).unwrap();
        let meas = MeasurementModel::new(
            LinearOp::Dense(DMatrix::identity(2, 2)),
            Likelihood::Gaussian { sigma_y: 0.1 },
            v(&[1.0, -1.0]),
        )
        .unwrap();
        let s = DiffusionScaling::variance_preserving(0.5);
        let x = v(&[0.2, 0.9]);
        let dps = measurement_gradient(&prior, s, &meas, &x).unwrap();
        let (glue, _) = psld_gluing_gradient(&prior, s, &meas, &x).unwrap();
        assert!((dps.grad - glue).norm() < 1e-14);
    }
}
