mod common;

use std::f64::consts::PI;
use std::sync::Arc;

use common::*;
use mapguide_core::gmm::{likelihood_given_state, GaussianMixture, Likelihood, MeasurementModel};
use mapguide_core::guidance::{
    gluing_gradient_with, gradient_with, shell_radius, DmapHooks, GuidanceConfig, GuidedSampler,
    Method,
};
use mapguide_core::linalg::{central_difference, relative_error, standard_normal};
use mapguide_core::operators::LinearOp;
use mapguide_core::samplers::{
    ancestral_step_with_noise, chain_rng, run_unconditional, DiffusedFamily, Solver,
};
use mapguide_core::schedule::{default_karras, default_vp, Schedule};
use mapguide_core::Error;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vp() -> Arc<Schedule<f64>> {
    Arc::new(Schedule::Vp(default_vp()))
}

fn karras() -> Arc<Schedule<f64>> {
    Arc::new(Schedule::Karras(default_karras()))
}

fn toy_mask(y0: f64, sigma_y: f64) -> MeasurementModel<f64> {
    MeasurementModel::new(
        LinearOp::select(vec![0], 2).unwrap(),
        Likelihood::Gaussian { sigma_y },
        v(&[y0]),
    )
    .unwrap()
}

fn sampler(
    method: Method,
    zeta: f64,
    schedule: Arc<Schedule<f64>>,
    solver: Solver,
    meas: MeasurementModel<f64>,
) -> GuidedSampler<f64> {
    GuidedSampler::new(
        arc(toy()),
        schedule,
        solver,
        meas,
        GuidanceConfig::new(method, zeta),
    )
    .unwrap()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn terminal_residuals(s: &GuidedSampler<f64>, n: usize, seed: u64) -> Vec<f64> {
    let run = s.run(n, seed, false).unwrap();
    run.samples
        .iter()
        .map(|x| s.measurement().residual(x).unwrap().norm())
        .collect()
}

#[test]
fn ddpm_with_effective_score_is_dps() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let schedule = vp();
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let d = rng.random_range(1..=4);
        let prior = random_mixture(d, rng.random_range(1..=3), &mut rng);
        let meas = gaussian_measurement(&prior, random_linear(d, &mut rng), 0.1, &mut rng);
        let zeta = rng.random_range(0.0..2.0);
        let s = GuidedSampler::new(
            arc(prior.clone()),
            schedule.clone(),
            Solver::Ddpm,
            meas,
            GuidanceConfig::new(Method::Dps, zeta),
        )
        .unwrap();
        let t = rng.random_range(1..=schedule.steps());
        let x = random_state(&prior, schedule.scaling_at(t).unwrap(), &mut rng);
        let noise: DVector<f64> = standard_normal(d, &mut rng);
        let eff = s.effective_score();
        let a = ancestral_step_with_noise(&eff, &schedule, t, &x, noise.clone()).unwrap();
        let b = s.step_with_noise(t, &x, noise, &mut rng).unwrap();
        worst = worst.max((a.next - b.next).amax());
    }
    assert!(worst < 1e-12, "max abs diff {worst}");
}

#[test]
fn effective_score_needs_vp() {
    let s = sampler(
        Method::Dps,
        0.1,
        karras(),
        Solver::EulerAncestral,
        toy_mask(0.5, 0.1),
    );
    assert!(matches!(
        s.dps_effective_score(&v(&[0.0, 0.0]), 5),
        Err(Error::Argument(_))
    ));
}

#[test]
fn zero_zeta_effective_score_is_unconditional() {
    let s = sampler(Method::Dps, 0.0, vp(), Solver::Ddpm, toy_mask(0.5, 0.1));
    let x = v(&[0.3, -0.8]);
    assert_eq!(
        s.dps_effective_score(&x, 37).unwrap(),
        s.family().at(37).unwrap().score(&x).unwrap()
    );
}

fn check_gradients(
    kind: &str,
    make: impl Fn(&GaussianMixture<f64>, &mut ChaCha8Rng) -> MeasurementModel<f64>,
    glue: bool,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(kind.len() as u64);
    let mut worst: f64 = 0.0;
    let mut worst_glue: f64 = 0.0;
    for _ in 0..100 {
        let d = 4;
        let prior = random_mixture(d, 2, &mut rng);
        let meas = make(&prior, &mut rng);
        let s = random_scaling(&mut rng);
        let den = mapguide_core::gmm::Denoiser::new(arc(prior.clone()), s).unwrap();
        let x = random_state(&prior, s, &mut rng);
        let g = gradient_with(&den, &meas, &x).unwrap();
        let fd = central_difference(
            |z| {
                meas.residual(&den.posterior_mean(z).unwrap())
                    .unwrap()
                    .norm()
            },
            &x,
            1e-5,
        );
        worst = worst.max(relative_error(&g.grad, &fd, 1e-3));
        if glue {
            let op = meas.operator().as_linear().unwrap().clone();
            let (gg, _) = gluing_gradient_with(&den, &meas, &x).unwrap();
            let fd = central_difference(
                |z| {
                    let x0 = den.posterior_mean(z).unwrap();
                    let r = op
                        .transpose_apply(&(op.apply(&x0).unwrap() - meas.y()))
                        .unwrap();
                    r.norm()
                },
                &x,
                1e-5,
            );
            worst_glue = worst_glue.max(relative_error(&gg, &fd, 1e-3));
        }
    }
    assert!(
        worst < 1e-6,
        "{kind}: measurement gradient rel. error {worst}"
    );
    assert!(
        worst_glue < 1e-6,
        "{kind}: gluing gradient rel. error {worst_glue}"
    );
}

#[test]
fn measurement_gradients_match_finite_differences() {
    check_gradients(
        "dense",
        |p, rng| {
            let op = LinearOp::Dense(DMatrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0)));
            gaussian_measurement(p, op, 0.1, rng)
        },
        true,
    );
    check_gradients(
        "mask",
        |p, rng| gaussian_measurement(p, LinearOp::select(vec![0, 2], 4).unwrap(), 0.1, rng),
        true,
    );
    check_gradients(
        "downsample",
        |p, rng| {
            gaussian_measurement(
                p,
                LinearOp::downsample(2, mapguide_core::operators::Grid::line(4)).unwrap(),
                0.1,
                rng,
            )
        },
        true,
    );
    check_gradients(
        "blur",
        |p, rng| {
            gaussian_measurement(
                p,
                LinearOp::gaussian_blur(3, 1.0, mapguide_core::operators::Grid::new(2, 2)).unwrap(),
                0.1,
                rng,
            )
        },
        true,
    );
    check_gradients("quadratic", quadratic_measurement, false);
}

#[test]
fn dmap_reduces_to_dps_without_projection() {
    let meas = toy_mask(0.5, 0.1);
    let dps = sampler(Method::Dps, 0.3, vp(), Solver::Ddpm, meas.clone());
    let dmap = sampler(Method::Dmap, 0.3, vp(), Solver::Ddpm, meas).with_dmap_hooks(DmapHooks {
        project: false,
        grad_at_xt: true,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for t in [1, 7, 120, 499] {
        let x = standard_normal(2, &mut rng);
        let noise = standard_normal(2, &mut rng);
        let a = dps.step_with_noise(t, &x, noise.clone(), &mut rng).unwrap();
        let b = dmap.step_with_noise(t, &x, noise, &mut rng).unwrap();
        assert_eq!(a.next, b.next);
    }
}

#[test]
fn projected_methods_land_on_the_shell() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (schedule, solver) in [(vp(), Solver::Ddpm), (karras(), Solver::EulerAncestral)] {
        for method in [Method::Dmap, Method::Dsg, Method::CseDmap] {
            let cfg = GuidanceConfig {
                k: 3,
                ..GuidanceConfig::new(method, 0.2)
            };
            let s = GuidedSampler::new(
                arc(toy()),
                schedule.clone(),
                solver,
                toy_mask(0.5, 0.1),
                cfg,
            )
            .unwrap();
            for _ in 0..50 {
                let t = rng.random_range(1..=schedule.steps());
                let x = standard_normal::<f64, _>(2, &mut rng) * 1.5;
                let out = s.step(t, &x, &mut rng).unwrap();
                let radius = shell_radius(2, out.sigma);
                if radius == 0.0 {
                    assert_eq!(out.next, out.mean);
                    continue;
                }
                let rel = ((&out.next - &out.mean).norm() - radius).abs() / radius;
                assert!(rel < 1e-9, "{method:?} at t={t}: {rel}");
                assert!(out.telemetry.shell_deviation < 1e-9);
            }
        }
    }
}

#[test]
fn euler_ancestral_shell_uses_sigma_up() {
    let schedule = karras();
    let s = sampler(
        Method::Dmap,
        0.05,
        schedule.clone(),
        Solver::EulerAncestral,
        toy_mask(0.5, 0.1),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let out = s.step(40, &v(&[0.5, 0.2]), &mut rng).unwrap();
    assert_eq!(out.sigma, schedule.transition(40).unwrap().sigma_up);
}

#[test]
fn dsg_full_mix_matches_closed_form() {
    let s = GuidedSampler::new(
        arc(toy()),
        vp(),
        Solver::Ddpm,
        toy_mask(0.5, 0.1),
        GuidanceConfig {
            dsg_mix: 1.0,
            ..GuidanceConfig::new(Method::Dsg, 0.1)
        },
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for t in [2, 50, 300] {
        let x = v(&[0.4, -0.1]);
        let out = s.step(t, &x, &mut rng).unwrap();
        let g = s.measurement_gradient(&x, t).unwrap().grad;
        let expected = &out.mean - &g * (2f64.sqrt() * out.sigma / g.norm());
        assert!((out.next - expected).amax() < 1e-12);
    }
}

// The DSG point should be the maximizer of log p(y | x_{t-1}) on the circle
// of radius sqrt(d) sigma around the transition mean.
#[test]
fn dsg_solves_map_on_the_circle() {
    let schedule = vp();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut hits = 0;
    for _ in 0..100 {
        let row = DMatrix::from_fn(1, 2, |_, _| rng.random_range(-1.0..1.0));
        let meas = MeasurementModel::new(
            LinearOp::Dense(row),
            Likelihood::Gaussian { sigma_y: 0.1 },
            v(&[rng.random_range(-1.5..1.5)]),
        )
        .unwrap();
        let s = GuidedSampler::new(
            arc(toy()),
            schedule.clone(),
            Solver::Ddpm,
            meas.clone(),
            GuidanceConfig {
                dsg_mix: 1.0,
                ..GuidanceConfig::new(Method::Dsg, 0.1)
            },
        )
        .unwrap();
        let t = rng.random_range(2..=20);
        let x = random_state(&toy(), schedule.scaling_at(t).unwrap(), &mut rng);
        let out = s.step(t, &x, &mut rng).unwrap();
        let radius = shell_radius(2, out.sigma);
        let prev = s.family().at(t - 1).unwrap();
        let (best, _) = (0..10_000)
            .map(|i| {
                let th = 2.0 * PI * i as f64 / 10_000.0;
                let p = &out.mean + v(&[th.cos(), th.sin()]) * radius;
                (th, likelihood_given_state(prev, &meas, &p).unwrap().0)
            })
            .fold(
                (0.0, f64::NEG_INFINITY),
                |acc, c| if c.1 > acc.1 { c } else { acc },
            );
        let d = &out.next - &out.mean;
        let got = d[1].atan2(d[0]);
        let diff = (got - best).rem_euclid(2.0 * PI);
        if diff.min(2.0 * PI - diff) < 1e-2 {
            hits += 1;
        }
    }
    assert!(hits >= 99, "{hits} of 100 within 1e-2 rad");
}

#[test]
fn unguided_draws_concentrate_on_the_shell() {
    let d = 1000;
    let sigma = 0.37;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut devs: Vec<f64> = (0..10_000)
        .map(|_| {
            let z: DVector<f64> = standard_normal(d, &mut rng);
            ((z * sigma).norm() / shell_radius(d, sigma) - 1.0).abs()
        })
        .collect();
    devs.sort_by(f64::total_cmp);
    assert!(devs[9_499] < 0.05, "95% quantile {}", devs[9_499]);
}

#[test]
fn single_travel_rep_is_plain_dps() {
    let meas = toy_mask(0.5, 0.1);
    let dps = sampler(Method::Dps, 0.1, vp(), Solver::Ddpm, meas.clone());
    let cfg = GuidanceConfig {
        travel_reps: 1,
        ..GuidanceConfig::new(Method::Freedom, 0.1)
    };
    let free = GuidedSampler::new(arc(toy()), vp(), Solver::Ddpm, meas.clone(), cfg).unwrap();
    assert_eq!(
        dps.run(8, 3, false).unwrap().samples,
        free.run(8, 3, false).unwrap().samples
    );
    let two = sampler(Method::Freedom, 0.1, vp(), Solver::Ddpm, meas);
    assert_ne!(
        dps.run(8, 3, false).unwrap().samples,
        two.run(8, 3, false).unwrap().samples
    );
}

#[test]
fn renoising_kernel_matches_forward_marginals() {
    for schedule in [vp(), karras()] {
        for t in 1..=schedule.steps() {
            let (scale, std) = schedule.forward_kernel(t).unwrap();
            let lo = schedule.scaling_at(t - 1).unwrap();
            let hi = schedule.scaling_at(t).unwrap();
            assert!((scale * lo.scale - hi.scale).abs() < 1e-12);
            let var = scale * scale * lo.noise * lo.noise + std * std;
            assert!((var - hi.noise * hi.noise).abs() < 1e-12 * hi.noise.max(1.0).powi(2));
        }
    }
    if let Schedule::Vp(s) = &*vp() {
        let (scale, std) = vp().forward_kernel(10).unwrap();
        assert!((scale - s.alpha(10).sqrt()).abs() < 1e-15);
        assert!((std - s.beta(10).sqrt()).abs() < 1e-12);
    }
}

#[test]
fn resample_with_zero_eta_lands_on_least_squares_point() {
    let meas = toy_mask(0.5, 0.1);
    let cfg = GuidanceConfig {
        eta: 0.0,
        resample_every: 5,
        resample_inner: 200,
        ..GuidanceConfig::new(Method::Resample, 0.5)
    };
    let s = GuidedSampler::new(arc(toy()), vp(), Solver::Ddpm, meas.clone(), cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let out = s.step(100, &v(&[0.2, 0.3]), &mut rng).unwrap();
    assert!(meas.residual(&out.next).unwrap().norm() < 1e-6);
    let off = s.step(101, &v(&[0.2, 0.3]), &mut rng).unwrap();
    assert!(meas.residual(&off.next).unwrap().norm() > 1e-3);
}

#[test]
fn psld_without_gluing_is_dps() {
    let meas = toy_mask(0.5, 0.1);
    let dps = sampler(Method::Dps, 0.2, vp(), Solver::Ddpm, meas.clone());
    let cfg = GuidanceConfig {
        gamma: 0.0,
        ..GuidanceConfig::new(Method::Psld, 0.2)
    };
    let psld = GuidedSampler::new(arc(toy()), vp(), Solver::Ddpm, meas, cfg).unwrap();
    assert_eq!(
        dps.run(6, 2, false).unwrap().samples,
        psld.run(6, 2, false).unwrap().samples
    );
}

#[test]
fn cse_with_unit_lambda_is_unconditional() {
    let meas = toy_mask(0.5, 0.1);
    let uncond = sampler(Method::Unconditional, 0.0, vp(), Solver::Ddpm, meas.clone());
    let cfg = GuidanceConfig::new(Method::CseDps, 0.0).with_lambda(1.0);
    let cse = GuidedSampler::new(arc(toy()), vp(), Solver::Ddpm, meas, cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for t in [1, 250, 500] {
        let x = standard_normal(2, &mut rng);
        let noise = standard_normal(2, &mut rng);
        let a = uncond
            .step_with_noise(t, &x, noise.clone(), &mut rng)
            .unwrap();
        let b = cse.step_with_noise(t, &x, noise, &mut rng).unwrap();
        assert_eq!(a.next, b.next);
    }
}

#[test]
fn exact_conditional_chain_matches_posterior_masses() {
    let meas = toy_mask(0.1, 0.4);
    let cond = mapguide_core::gmm::condition_on_measurement(&toy(), &meas).unwrap();
    let target = cond.components()[0].weight();
    let cfg = GuidanceConfig::new(Method::CseDps, 0.0).with_lambda(0.0);
    let s = GuidedSampler::new(arc(toy()), karras(), Solver::EulerAncestral, meas, cfg).unwrap();
    let n = 4000;
    let run = s.run(n, 12, false).unwrap();
    let frac = run
        .samples
        .iter()
        .filter(|x| cond.nearest_component(x) == 0)
        .count() as f64
        / n as f64;
    let se = (target * (1.0 - target) / n as f64).sqrt();
    assert!((frac - target).abs() < 5.0 * se, "{frac} vs {target}");
}

#[test]
fn zero_zeta_dps_reproduces_unconditional_run() {
    let meas = toy_mask(0.5, 0.1);
    for (schedule, solver) in [
        (vp(), Solver::Ddpm),
        (vp(), Solver::Ddim),
        (karras(), Solver::EulerAncestral),
    ] {
        let dps = sampler(Method::Dps, 0.0, schedule.clone(), solver, meas.clone());
        let fam = DiffusedFamily::new(arc(toy()), schedule.clone());
        let plain = run_unconditional(&fam, &schedule, solver, 2, 64, 13, false).unwrap();
        assert_eq!(dps.run(64, 13, false).unwrap().samples, plain.samples);
    }
}

#[test]
fn inconsistent_combinations_are_rejected() {
    let meas = toy_mask(0.5, 0.1);
    let build = |cfg: GuidanceConfig<f64>, solver: Solver, meas: MeasurementModel<f64>| {
        let schedule = if solver == Solver::EulerAncestral {
            karras()
        } else {
            vp()
        };
        GuidedSampler::new(arc(toy()), schedule, solver, meas, cfg)
    };
    for method in [
        Method::Dmap,
        Method::Dsg,
        Method::CseDmap,
        Method::Resample,
        Method::Freedom,
    ] {
        let err = build(GuidanceConfig::new(method, 0.1), Solver::Ddim, meas.clone()).unwrap_err();
        assert!(matches!(err, Error::Argument(_)), "{method:?}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let quad = quadratic_measurement(&toy(), &mut rng);
    assert!(build(
        GuidanceConfig::new(Method::Psld, 0.1),
        Solver::Ddpm,
        quad.clone()
    )
    .is_err());
    assert!(build(GuidanceConfig::new(Method::CseDps, 0.1), Solver::Ddpm, quad).is_err());
    let normexp = MeasurementModel::new(
        LinearOp::select(vec![0], 2).unwrap(),
        Likelihood::NormExponential { zeta: 0.05 },
        v(&[0.5]),
    )
    .unwrap();
    assert!(build(
        GuidanceConfig::new(Method::CseDmap, 0.1),
        Solver::Ddpm,
        normexp
    )
    .is_err());
    let bad = [
        GuidanceConfig {
            k: 0,
            ..GuidanceConfig::new(Method::Dmap, 0.1)
        },
        GuidanceConfig {
            dsg_mix: 1.5,
            ..GuidanceConfig::new(Method::Dsg, 0.1)
        },
        GuidanceConfig::new(Method::CseDps, 0.1).with_lambda(-0.1),
        GuidanceConfig {
            travel_window: [300, 900],
            ..GuidanceConfig::new(Method::Freedom, 0.1)
        },
        GuidanceConfig::new(Method::Dps, -1.0),
    ];
    for cfg in bad {
        let msg = build(cfg, Solver::Ddpm, meas.clone())
            .unwrap_err()
            .to_string();
        assert!(msg.contains("guidance."), "{msg}");
    }
    let karras_ddpm = GuidedSampler::new(
        arc(toy()),
        karras(),
        Solver::Ddpm,
        meas,
        GuidanceConfig::new(Method::Dps, 0.1),
    );
    assert!(karras_ddpm.is_err());
}

#[test]
fn effective_score_mean_grows_with_zeta() {
    let schedule = vp();
    let meas = toy_mask(0.5, 0.1);
    let t = schedule.steps();
    let mut norms = Vec::new();
    for zeta in [0.0, 0.05, 0.3, 1.2, 4.8] {
        let s = sampler(
            Method::Dps,
            zeta,
            schedule.clone(),
            Solver::Ddpm,
            meas.clone(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut sum = DVector::zeros(2);
        for _ in 0..1000 {
            let x = standard_normal(2, &mut rng);
            sum += s.dps_effective_score(&x, t).unwrap();
        }
        norms.push((sum / 1000.0).norm());
    }
    assert!(norms.windows(2).all(|w| w[1] >= w[0]), "{norms:?}");
}

#[test]
fn more_inner_steps_lower_the_residual() {
    let meas = toy_mask(0.5, 0.1);
    let build = |k| {
        // At zeta = 0.05 both settings already sit at the noise floor.
        let cfg = GuidanceConfig::new(Method::Dmap, 0.01).with_k(k);
        GuidedSampler::new(arc(toy()), vp(), Solver::Ddpm, meas.clone(), cfg).unwrap()
    };
    let one = median(terminal_residuals(&build(1), 100, 16));
    let three = median(terminal_residuals(&build(3), 100, 16));
    assert!(three < one, "K=3 {three} vs K=1 {one}");
}

#[test]
fn time_travel_does_not_hurt_the_residual() {
    let meas = toy_mask(0.5, 0.1);
    let dps = sampler(Method::Dps, 0.05, vp(), Solver::Ddpm, meas.clone());
    let free = sampler(Method::Freedom, 0.05, vp(), Solver::Ddpm, meas);
    let a = median(terminal_residuals(&dps, 100, 17));
    let b = median(terminal_residuals(&free, 100, 17));
    assert!(b <= a, "freedom {b} vs dps {a}");
}

#[test]
fn guided_runs_do_not_depend_on_thread_count() {
    let s = GuidedSampler::new(
        arc(toy()),
        karras(),
        Solver::EulerAncestral,
        toy_mask(0.5, 0.1),
        GuidanceConfig::new(Method::Dmap, 0.05).with_k(2),
    )
    .unwrap();
    let run_with = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| s.run(32, 5, true).unwrap())
    };
    let one = run_with(1);
    assert_eq!(one, run_with(3));
    let mut rng = chain_rng(5, 4);
    let x = mapguide_core::samplers::initial_state(s.schedule(), 2, &mut rng);
    let (x0, _, _) = s.run_chain(x, &mut rng, false).unwrap();
    assert_eq!(x0, one.samples[4]);
}

#[test]
fn telemetry_covers_every_step() {
    let s = sampler(Method::Dps, 0.05, vp(), Solver::Ddpm, toy_mask(0.5, 0.1));
    let run = s.run(3, 1, false).unwrap();
    for tel in &run.telemetry {
        assert_eq!(tel.len(), 500);
        assert_eq!(tel[0].t, 500);
        assert_eq!(tel[499].t, 1);
        assert!(tel
            .iter()
            .all(|r| r.score_error.is_some() && r.residual >= 0.0));
    }
}
