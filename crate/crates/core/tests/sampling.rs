mod common;

use std::sync::Arc;

use common::*;
use mapguide_core::gmm::{Covariance, GaussianMixture};
use mapguide_core::samplers::{run_unconditional, DiffusedFamily, Solver};
use mapguide_core::schedule::{default_karras, default_vp, KarrasSchedule, Schedule, VpSchedule};
use nalgebra::{DMatrix, DVector};

fn moments(xs: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = xs.len() as f64;
    let d = xs[0].len();
    let mean = xs.iter().fold(DVector::zeros(d), |a, x| a + x) / n;
    let cov = xs.iter().fold(DMatrix::zeros(d, d), |a, x| {
        let c = x - &mean;
        a + &c * c.transpose()
    }) / (n - 1.0);
    (mean, cov)
}

fn gaussian_prior() -> GaussianMixture<f64> {
    GaussianMixture::gaussian(
        v(&[0.7, -0.4]),
        Covariance::Dense(DMatrix::from_row_slice(2, 2, &[0.5, 0.15, 0.15, 0.3])),
    )
    .unwrap()
}

fn check_moments(prior: &GaussianMixture<f64>, schedule: Schedule<f64>, solver: Solver, n: usize) {
    let schedule = Arc::new(schedule);
    let fam = DiffusedFamily::new(Arc::new(prior.clone()), schedule.clone());
    let run = run_unconditional(&fam, &schedule, solver, prior.dim(), n, 42, false).unwrap();
    let (mean, cov) = moments(&run.samples);
    let c = &prior.components()[0];
    let true_cov = c.covariance().to_dense(prior.dim());
    for i in 0..prior.dim() {
        let se = (true_cov[(i, i)] / n as f64).sqrt();
        assert!(
            (mean[i] - c.mean()[i]).abs() < 5.0 * se,
            "{:?}: mean {mean} vs {}",
            solver,
            c.mean()
        );
    }
    let rel = (&cov - &true_cov).norm() / true_cov.norm();
    assert!(rel < 0.05, "{solver:?}: covariance error {rel}");
}

// The moment checks need x_T to match the terminal marginal and a fine
// enough grid: the 500-step VP schedule leaves a_T ~ 0.08, which biases the
// deterministic DDIM map, and 100 Euler-ancestral steps shrink the covariance
// by about 6%.
fn long_vp() -> Schedule<f64> {
    Schedule::Vp(VpSchedule::linear(1000, 1e-4, 0.02).unwrap())
}

#[test]
fn ddpm_reproduces_gaussian_prior() {
    check_moments(
        &gaussian_prior(),
        Schedule::Vp(default_vp()),
        Solver::Ddpm,
        10_000,
    );
    check_moments(&gaussian_prior(), long_vp(), Solver::Ddpm, 10_000);
}

#[test]
fn ddim_reproduces_gaussian_prior() {
    check_moments(&gaussian_prior(), long_vp(), Solver::Ddim, 10_000);
}

#[test]
fn euler_ancestral_reproduces_gaussian_prior() {
    let fine = KarrasSchedule::new(1000, 0.002, 80.0, 7.0).unwrap();
    check_moments(
        &gaussian_prior(),
        Schedule::Karras(fine),
        Solver::EulerAncestral,
        10_000,
    );
}

fn occupancy(prior: &GaussianMixture<f64>, samples: &[DVector<f64>]) -> Vec<f64> {
    let mut counts = vec![0.0; prior.len()];
    for x in samples {
        counts[prior.nearest_component(x)] += 1.0;
    }
    counts.iter().map(|c| c / samples.len() as f64).collect()
}

#[test]
fn toy_mode_occupancy_is_balanced() {
    let prior = Arc::new(toy());
    for (schedule, solver) in [
        (Schedule::Vp(default_vp()), Solver::Ddpm),
        (Schedule::Vp(default_vp()), Solver::Ddim),
        (Schedule::Karras(default_karras()), Solver::EulerAncestral),
    ] {
        let schedule = Arc::new(schedule);
        let fam = DiffusedFamily::new(prior.clone(), schedule.clone());
        let run = run_unconditional(&fam, &schedule, solver, 2, 10_000, 7, false).unwrap();
        let occ = occupancy(&prior, &run.samples);
        assert!((occ[0] - 0.5).abs() < 0.02, "{solver:?}: {occ:?}");
    }
}

#[test]
fn toy_samples_match_prior_moments() {
    let prior = Arc::new(toy());
    let schedule = Arc::new(Schedule::Karras(default_karras()));
    let fam = DiffusedFamily::new(prior.clone(), schedule.clone());
    let run =
        run_unconditional(&fam, &schedule, Solver::EulerAncestral, 2, 10_000, 3, false).unwrap();
    let (mean, cov) = moments(&run.samples);
    // Mixture moments: mean 0, covariance 0.09 I + [[1, 1], [1, 1]].
    let true_cov = DMatrix::from_row_slice(2, 2, &[1.09, 1.0, 1.0, 1.09]);
    for i in 0..2 {
        assert!(mean[i].abs() < 5.0 * (1.09f64 / 10_000.0).sqrt());
    }
    assert!((&cov - &true_cov).norm() / true_cov.norm() < 0.05);
}

#[test]
fn ddim_is_deterministic_given_start() {
    let prior = Arc::new(toy());
    let schedule = Arc::new(Schedule::Vp(default_vp()));
    let fam = DiffusedFamily::new(prior, schedule.clone());
    let a = run_unconditional(&fam, &schedule, Solver::Ddim, 2, 4, 1, false).unwrap();
    let b = run_unconditional(&fam, &schedule, Solver::Ddim, 2, 4, 1, false).unwrap();
    assert_eq!(a, b);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let prior = Arc::new(toy());
    let schedule = Arc::new(Schedule::Karras(default_karras()));
    let fam = DiffusedFamily::new(prior, schedule.clone());
    let run_with = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                run_unconditional(&fam, &schedule, Solver::EulerAncestral, 2, 64, 11, true).unwrap()
            })
    };
    let one = run_with(1);
    assert_eq!(one, run_with(4));
    let two = run_unconditional(&fam, &schedule, Solver::EulerAncestral, 2, 2, 11, false).unwrap();
    assert_eq!(two.samples[..], one.samples[..2]);
}
