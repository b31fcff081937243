#![allow(dead_code)]

use std::sync::Arc;

use mapguide_core::gmm::{
    Covariance, DiffusionScaling, GaussianMixture, Likelihood, MeasurementModel,
};
use mapguide_core::operators::{Grid, LinearOp, Operator, QuadraticMap};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(xs)
}

pub fn normal_vec<R: Rng>(d: usize, scale: f64, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal) * scale)
}

pub fn toy() -> GaussianMixture<f64> {
    GaussianMixture::new(vec![
        (0.5, v(&[1.0, 1.0]), Covariance::Iso(0.09)),
        (0.5, v(&[-1.0, -1.0]), Covariance::Iso(0.09)),
    ])
    .unwrap()
}

/// Random mixture with a mix of isotropic and dense covariances.
pub fn random_mixture<R: Rng>(d: usize, k: usize, rng: &mut R) -> GaussianMixture<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let parts = raw
        .iter()
        .map(|w| {
            let mean = normal_vec(d, 1.5, rng);
            let cov = if rng.random_bool(0.5) {
                Covariance::Iso(rng.random_range(0.2..1.5))
            } else {
                let l = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.5);
                Covariance::Dense(&l * l.transpose() + DMatrix::identity(d, d) * 0.3)
            };
            (w / total, mean, cov)
        })
        .collect();
    GaussianMixture::new(parts).unwrap()
}

pub fn random_scaling<R: Rng>(rng: &mut R) -> DiffusionScaling<f64> {
    DiffusionScaling::new(rng.random_range(0.2..1.0), rng.random_range(0.1..1.5)).unwrap()
}

/// A point drawn from the diffused marginal.
pub fn random_state<R: Rng>(
    prior: &GaussianMixture<f64>,
    s: DiffusionScaling<f64>,
    rng: &mut R,
) -> DVector<f64> {
    prior.sample_one(rng) * s.scale + normal_vec(prior.dim(), s.noise, rng)
}

/// Random linear operator of each constructor kind, sized for dimension `d`.
pub fn random_linear<R: Rng>(d: usize, rng: &mut R) -> LinearOp<f64> {
    match rng.random_range(0..4) {
        0 => {
            let m = rng.random_range(1..=d);
            LinearOp::Dense(DMatrix::from_fn(m, d, |_, _| {
                rng.sample::<f64, _>(StandardNormal)
            }))
        }
        1 => {
            let keep: Vec<usize> = (0..d).filter(|_| rng.random_bool(0.6)).collect();
            let keep = if keep.is_empty() { vec![0] } else { keep };
            LinearOp::select(keep, d).unwrap()
        }
        2 if d.is_multiple_of(2) => LinearOp::downsample(2, Grid::line(d)).unwrap(),
        _ => LinearOp::gaussian_blur(3, 1.0, Grid::line(d)).unwrap(),
    }
}

pub fn gaussian_measurement<R: Rng>(
    prior: &GaussianMixture<f64>,
    op: LinearOp<f64>,
    sigma_y: f64,
    rng: &mut R,
) -> MeasurementModel<f64> {
    let x = prior.sample_one(rng);
    let y = op.apply(&x).unwrap() + normal_vec(op.output_dim(), sigma_y, rng);
    MeasurementModel::new(op, Likelihood::Gaussian { sigma_y }, y).unwrap()
}

pub fn quadratic_measurement<R: Rng>(
    prior: &GaussianMixture<f64>,
    rng: &mut R,
) -> MeasurementModel<f64> {
    let d = prior.dim();
    let map = QuadraticMap::random(d, d, 0.3, rng);
    let op = Operator::nonlinear(map);
    let y = op.apply(&prior.sample_one(rng)).unwrap() + normal_vec(d, 0.05, rng);
    MeasurementModel::new(op, Likelihood::Gaussian { sigma_y: 0.05 }, y).unwrap()
}

pub fn arc(g: GaussianMixture<f64>) -> Arc<GaussianMixture<f64>> {
    Arc::new(g)
}
