//! End-to-end experiments: single runs, the toy replication, zeta sweeps,
//! and the diagnostic batteries behind `lab diagnose`.

use mapguide_core::guidance::StepTelemetry;
use mapguide_core::samplers::{run_unconditional, DiffusedFamily};
use mapguide_core::{Config, Gmm, Method};
use nalgebra::DVector;
use serde::Serialize;

use crate::checks::{dps_ddpm_identity, dsg_argmax, DsgArgmax, Worst};
use crate::config::RunSpec;
use crate::diagnostics::{
    crossentropy_check, median, mode_coverage, per_dim_std, sample_spread, score_error_curve,
    score_mean_stat, shell_check_at, CrossEntropyRow, Implication, ScoreMean, ScoreMethod,
    ShellStats, Spread,
};
use crate::error::Result;
use crate::problem::Problem;
use crate::report::{Artifacts, Curves, MethodSummary, Provenance, ScatterPoint, Stats};
use crate::tasks::{self, TaskKind, DEFAULT_ZETA};

/// Draws of `x_T` behind every score-mean statistic.
pub const SCORE_MEAN_DRAWS: usize = 1000;
/// Probes per step for score-error curves.
pub const SCORE_ERROR_PROBES: usize = 32;
/// Inner steps for DMAP whenever it is compared with DPS.
pub const DMAP_K: usize = 3;
/// Samples per side of the spread comparison.
pub const SPREAD_SAMPLES: usize = 50;
/// Blend weight of the CSE score-error curve.
pub const CSE_CURVE_LAMBDA: f64 = 0.25;

/// A finished guided run of one method.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub label: String,
    pub zeta: f64,
    pub samples: Vec<DVector<f64>>,
    pub telemetry: Vec<Vec<StepTelemetry<f64>>>,
}

pub fn run_method(
    problem: &Problem,
    label: &str,
    config: Config,
    n: usize,
    seed: u64,
) -> Result<MethodRun> {
    let zeta = config.zeta_at(problem.steps());
    let run = problem.sampler(config)?.run(n, seed, false)?;
    Ok(MethodRun {
        label: label.into(),
        zeta,
        samples: run.samples,
        telemetry: run.telemetry,
    })
}

/// Score mean at `x_T` of the score a method runs on, where defined: the
/// unconditional score, or the DPS effective score on VP schedules.
pub fn method_score_mean(
    problem: &Problem,
    config: &Config,
    seed: u64,
) -> Result<Option<ScoreMean>> {
    let sampler = problem.sampler(config.clone())?;
    let (schedule, d) = (problem.schedule.as_ref(), problem.dim());
    Ok(match config.method {
        Method::Unconditional => Some(score_mean_stat(
            sampler.family(),
            schedule,
            d,
            SCORE_MEAN_DRAWS,
            seed,
        )?),
        Method::Dps if schedule.is_vp() => Some(score_mean_stat(
            &sampler.effective_score(),
            schedule,
            d,
            SCORE_MEAN_DRAWS,
            seed,
        )?),
        _ => None,
    })
}

pub fn summarize(
    problem: &Problem,
    label: &str,
    zeta: f64,
    samples: &[DVector<f64>],
    modes: &Gmm,
    score_mean: Option<ScoreMean>,
) -> Result<MethodSummary> {
    let residuals = samples
        .iter()
        .map(|x| problem.residual(x))
        .collect::<Result<Vec<_>>>()?;
    let logpost = samples
        .iter()
        .map(|x| problem.log_posterior(x))
        .collect::<Result<Vec<_>>>()?;
    let per_dim_std = per_dim_std(samples)?;
    Ok(MethodSummary {
        method: label.into(),
        zeta,
        n: samples.len(),
        residual: Stats::of(&residuals),
        log_posterior: Stats::of(&logpost),
        mode_coverage: mode_coverage(samples, modes)?,
        mean_std: crate::diagnostics::mean(&per_dim_std),
        per_dim_std,
        score_mean,
    })
}

/// Chain-averaged telemetry per step. The score-error column appears only
/// when every step of every chain recorded one.
pub fn telemetry_curves(
    label: &str,
    steps: usize,
    telemetry: &[Vec<StepTelemetry<f64>>],
) -> Curves {
    let mut curves = Curves::new(steps);
    let n = telemetry.len() as f64;
    let column = |f: &dyn Fn(&StepTelemetry<f64>) -> f64| -> Vec<f64> {
        (0..steps)
            .map(|i| telemetry.iter().map(|c| f(&c[i])).sum::<f64>() / n)
            .collect()
    };
    curves.push(format!("{label}_residual"), column(&|s| s.residual));
    curves.push(format!("{label}_grad_norm"), column(&|s| s.grad_norm));
    curves.push(
        format!("{label}_shell_deviation"),
        column(&|s| s.shell_deviation),
    );
    if telemetry
        .iter()
        .all(|c| c.iter().all(|s| s.score_error.is_some()))
    {
        curves.push(
            format!("{label}_score_error"),
            column(&|s| s.score_error.unwrap_or(f64::NAN)),
        );
    }
    curves
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub command: &'static str,
    /// Method whose samples are in `samples.csv`.
    pub primary: String,
    pub summary: Vec<MethodSummary>,
    pub curves: Curves,
    pub provenance: Provenance,
}

/// `lab run`: the configured method on the configured problem.
pub fn run(spec: &RunSpec) -> Result<Artifacts<RunReport>> {
    let problem = spec.build()?;
    let config = spec.guidance.clone();
    let label = config.method.name();
    let out = run_method(&problem, label, config.clone(), spec.n_chains, spec.seed)?;
    let modes = problem.modes()?;
    let score_mean = method_score_mean(&problem, &config, spec.seed)?;
    let summary = summarize(&problem, label, out.zeta, &out.samples, &modes, score_mean)?;
    let curves = telemetry_curves(label, problem.steps(), &out.telemetry);
    let provenance = Provenance::of(spec);
    let report = RunReport {
        command: "run",
        primary: label.into(),
        summary: vec![summary],
        curves: curves.clone(),
        provenance: provenance.clone(),
    };
    Ok(Artifacts {
        report,
        curves,
        provenance,
        samples: Some(out.samples),
        scatter: None,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Occupancy {
    pub method: String,
    pub coverage: Vec<f64>,
}

/// Median terminal residuals of two methods over the same chain seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Paired {
    pub chains: usize,
    pub dmap_median_residual: f64,
    pub dps_median_residual: f64,
    pub dmap_not_worse: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ToyReport {
    pub command: &'static str,
    pub primary: String,
    pub oracle_occupancy: Vec<f64>,
    pub occupancy: Vec<Occupancy>,
    pub dps_max_occupancy: f64,
    /// Largest per-mode gap between exact-conditional sampling and the oracle.
    pub exact_conditional_gap: f64,
    pub dmap_vs_dps: Paired,
    pub summary: Vec<MethodSummary>,
    pub curves: Curves,
    pub provenance: Provenance,
}

/// Chains in the toy DMAP/DPS paired comparison.
pub const TOY_PAIRED_CHAINS: usize = 100;

/// `lab toy`: oracle, unconditional, DPS, DSG, DMAP, and exact-conditional
/// sampling on the 2-d toy task.
pub fn toy_experiment(seed: u64) -> Result<Artifacts<ToyReport>> {
    let spec = RunSpec {
        seed,
        ..tasks::toy()
    };
    let problem = spec.build()?;
    let n = spec.n_chains;
    let modes = problem.modes()?;
    let oracle_occupancy = problem.oracle_occupancy(seed)?;
    let oracle_samples = problem.oracle_samples(n, seed)?;

    let configs = [
        ("unconditional", Config::new(Method::Unconditional, 0.0)),
        ("dps", Config::new(Method::Dps, DEFAULT_ZETA)),
        ("dsg", Config::new(Method::Dsg, DEFAULT_ZETA)),
        (
            "dmap",
            Config::new(Method::Dmap, DEFAULT_ZETA).with_k(DMAP_K),
        ),
    ];
    let mut runs = configs
        .iter()
        .map(|(label, c)| run_method(&problem, label, c.clone(), n, seed))
        .collect::<Result<Vec<_>>>()?;
    let exact = exact_conditional_samples(&problem, n, seed)?;

    let mut curves = Curves::new(problem.steps());
    for r in &runs {
        curves.extend(telemetry_curves(&r.label, problem.steps(), &r.telemetry));
    }
    runs.insert(
        0,
        MethodRun {
            label: "oracle".into(),
            zeta: 0.0,
            samples: oracle_samples,
            telemetry: vec![],
        },
    );
    runs.push(MethodRun {
        label: "exact_conditional".into(),
        zeta: 0.0,
        samples: exact,
        telemetry: vec![],
    });

    let summary = runs
        .iter()
        .map(|r| summarize(&problem, &r.label, r.zeta, &r.samples, &modes, None))
        .collect::<Result<Vec<_>>>()?;
    let occupancy: Vec<Occupancy> = summary
        .iter()
        .map(|s| Occupancy {
            method: s.method.clone(),
            coverage: s.mode_coverage.clone(),
        })
        .collect();
    let find = |label: &str| runs.iter().find(|r| r.label == label).expect("method ran");
    let coverage_of = |label: &str| {
        &occupancy
            .iter()
            .find(|o| o.method == label)
            .expect("method ran")
            .coverage
    };
    let dps_max_occupancy = coverage_of("dps").iter().copied().fold(0.0, f64::max);
    let exact_conditional_gap = coverage_of("exact_conditional")
        .iter()
        .zip(&oracle_occupancy)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let paired_median = |label: &str| -> Result<f64> {
        let r = find(label).samples[..TOY_PAIRED_CHAINS.min(n)]
            .iter()
            .map(|x| problem.residual(x))
            .collect::<Result<Vec<_>>>()?;
        Ok(median(&r))
    };
    let (dm, dp) = (paired_median("dmap")?, paired_median("dps")?);
    let dmap_vs_dps = Paired {
        chains: TOY_PAIRED_CHAINS.min(n),
        dmap_median_residual: dm,
        dps_median_residual: dp,
        dmap_not_worse: dm <= dp,
    };

    let scatter = runs
        .iter()
        .flat_map(|r| {
            r.samples.iter().enumerate().map(|(chain, x)| ScatterPoint {
                method: r.label.clone(),
                chain,
                x: x.clone(),
            })
        })
        .collect();
    let provenance = Provenance::of(&spec);
    let report = ToyReport {
        command: "toy",
        primary: "dps".into(),
        oracle_occupancy,
        occupancy,
        dps_max_occupancy,
        exact_conditional_gap,
        dmap_vs_dps,
        summary,
        curves: curves.clone(),
        provenance: provenance.clone(),
    };
    Ok(Artifacts {
        report,
        curves,
        provenance,
        samples: Some(find("dps").samples.clone()),
        scatter: Some(scatter),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub zeta: f64,
    pub median_residual: f64,
    pub median_log_posterior: f64,
    pub finite: bool,
    /// Finite, and median residual below the unconditional median residual.
    pub stable: bool,
    /// Trajectory-averaged DPS score error (linear-Gaussian, VP, DPS only).
    pub score_error_mean: Option<f64>,
    /// DPS effective score mean at `x_T` (VP, DPS only).
    pub score_mean: Option<ScoreMean>,
    /// Mean per-dimension std against the same number of oracle draws.
    pub spread_ratio: f64,
    pub mode_coverage: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub command: &'static str,
    pub method: String,
    pub unconditional_median_residual: f64,
    pub rows: Vec<SweepRow>,
    pub stable_zetas: Vec<f64>,
    pub best_residual_zeta: Option<f64>,
    pub largest_stable_zeta: Option<f64>,
    pub score_mean_nondecreasing: Option<bool>,
    pub residual_nonincreasing_over_stable: bool,
    pub curves: Curves,
    pub provenance: Provenance,
}

/// A sweep plus the terminal samples of every row.
#[derive(Debug, Clone)]
pub struct Sweep {
    pub report: SweepReport,
    pub samples: Vec<Vec<DVector<f64>>>,
    pub unconditional: Vec<DVector<f64>>,
}

impl Sweep {
    pub fn row(&self, zeta: f64) -> Option<(&SweepRow, &[DVector<f64>])> {
        let i = self.report.rows.iter().position(|r| r.zeta == zeta)?;
        Some((&self.report.rows[i], &self.samples[i]))
    }
}

fn nondecreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] >= w[0])
}

/// Runs `base` at every `zeta` (the configured method, chains, and seed).
pub fn zeta_sweep(spec: &RunSpec, zetas: &[f64]) -> Result<Sweep> {
    if zetas.is_empty() {
        return Err(crate::error::LabError::Argument(
            "zeta list is empty".into(),
        ));
    }
    let problem = spec.build()?;
    let (n, seed) = (spec.n_chains, spec.seed);
    let method = spec.guidance.method;
    let modes = problem.modes()?;
    let oracle = problem.oracle_samples(n, seed)?;
    let uncond = run_method(
        &problem,
        "unconditional",
        Config::new(Method::Unconditional, 0.0),
        n,
        seed,
    )?;
    let uncond_res = median(
        &uncond
            .samples
            .iter()
            .map(|x| problem.residual(x))
            .collect::<Result<Vec<_>>>()?,
    );
    let dps_scores = method == Method::Dps && problem.schedule.is_vp();
    let mut curves = Curves::new(problem.steps());
    let mut rows = Vec::new();
    let mut samples = Vec::new();
    for &zeta in zetas {
        let config = Config {
            zeta: mapguide_core::guidance::Zeta::Constant(zeta),
            ..spec.guidance.clone()
        };
        let label = format!("{}_zeta_{zeta}", method.name());
        let out = run_method(&problem, &label, config.clone(), n, seed)?;
        let finite = out.samples.iter().all(|x| x.iter().all(|v| v.is_finite()));
        let (median_residual, median_log_posterior, mode_cov, spread_ratio) = if finite {
            let res = out
                .samples
                .iter()
                .map(|x| problem.residual(x))
                .collect::<Result<Vec<_>>>()?;
            let lp = out
                .samples
                .iter()
                .map(|x| problem.log_posterior(x))
                .collect::<Result<Vec<_>>>()?;
            (
                median(&res),
                median(&lp),
                mode_coverage(&out.samples, &modes)?,
                sample_spread(&out.samples, &oracle)?.ratio,
            )
        } else {
            (f64::NAN, f64::NAN, vec![f64::NAN; modes.len()], f64::NAN)
        };
        let score_error_mean = if dps_scores && problem.is_conjugate() {
            let c = score_error_curve(
                &problem,
                &[ScoreMethod::Dps { zeta }],
                SCORE_ERROR_PROBES,
                seed,
            )?;
            Some(crate::diagnostics::mean(&c.columns[0].values))
        } else {
            None
        };
        let score_mean = if dps_scores {
            method_score_mean(&problem, &config, seed)?
        } else {
            None
        };
        curves.extend(telemetry_curves(&label, problem.steps(), &out.telemetry));
        rows.push(SweepRow {
            zeta,
            median_residual,
            median_log_posterior,
            finite,
            stable: finite && median_residual < uncond_res,
            score_error_mean,
            score_mean,
            spread_ratio,
            mode_coverage: mode_cov,
        });
        samples.push(out.samples);
    }
    let stable: Vec<&SweepRow> = rows.iter().filter(|r| r.stable).collect();
    let best_residual_zeta = stable
        .iter()
        .min_by(|a, b| a.median_residual.total_cmp(&b.median_residual))
        .map(|r| r.zeta);
    let largest_stable_zeta = stable
        .iter()
        .map(|r| r.zeta)
        .fold(None, |acc: Option<f64>, z| {
            Some(acc.map_or(z, |a| a.max(z)))
        });
    let mut by_zeta: Vec<&SweepRow> = rows.iter().collect();
    by_zeta.sort_by(|a, b| a.zeta.total_cmp(&b.zeta));
    let score_mean_nondecreasing = dps_scores.then(|| {
        nondecreasing(
            &by_zeta
                .iter()
                .map(|r| r.score_mean.expect("computed for dps").mean_norm)
                .collect::<Vec<_>>(),
        )
    });
    let stable_res: Vec<f64> = by_zeta
        .iter()
        .filter(|r| r.stable)
        .map(|r| -r.median_residual)
        .collect();
    let provenance = Provenance::of(spec);
    let report = SweepReport {
        command: "sweep",
        method: method.name().into(),
        unconditional_median_residual: uncond_res,
        stable_zetas: stable.iter().map(|r| r.zeta).collect(),
        best_residual_zeta,
        largest_stable_zeta,
        score_mean_nondecreasing,
        residual_nonincreasing_over_stable: nondecreasing(&stable_res),
        rows,
        curves,
        provenance,
    };
    Ok(Sweep {
        report,
        samples,
        unconditional: uncond.samples,
    })
}

pub fn sweep_artifacts(sweep: &Sweep) -> Artifacts<SweepReport> {
    Artifacts {
        report: sweep.report.clone(),
        curves: sweep.report.curves.clone(),
        provenance: sweep.report.provenance.clone(),
        samples: None,
        scatter: None,
    }
}

/// Pass, fail, or not applicable to this task.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: Option<bool>,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed: Some(passed),
            detail,
        }
    }

    pub fn skipped(name: &str, why: &str) -> Self {
        Self {
            name: name.into(),
            passed: None,
            detail: why.into(),
        }
    }
}

/// Score-error, score-mean, and spread measurements on one task.
#[derive(Debug, Clone, Serialize)]
pub struct ObservationReport {
    pub sweep: SweepReport,
    pub unconditional_score_mean: Option<ScoreMean>,
    pub reference_score_mean: Option<ScoreMean>,
    pub score_error_zeta: Option<f64>,
    pub score_errors: Option<Curves>,
    pub spread_zeta: Option<f64>,
    pub spread: Option<Spread>,
    /// Oracle against an independent oracle draw.
    pub spread_control: Option<Spread>,
    /// Std of the control ratio over independent oracle pairs.
    pub spread_control_sd: Option<f64>,
    pub oracle_occupancy: Vec<f64>,
}

/// Replicate pairs behind the spread control's Monte Carlo error.
pub const SPREAD_CONTROL_REPS: usize = 32;

pub fn observation_battery(kind: TaskKind, seed: u64) -> Result<ObservationReport> {
    let spec = RunSpec {
        seed,
        ..kind.spec()
    };
    let problem = spec.build()?;
    let sweep = zeta_sweep(&spec, &kind.zeta_grid())?;
    let conj = problem.is_conjugate();
    let vp = problem.schedule.is_vp();
    let (unconditional_score_mean, reference_score_mean) = if vp {
        let fam = DiffusedFamily::new(problem.prior.clone(), problem.schedule.clone());
        let u = score_mean_stat(
            &fam,
            &problem.schedule,
            problem.dim(),
            SCORE_MEAN_DRAWS,
            seed,
        )?;
        let r = if conj {
            let refs = problem.reference_score()?;
            Some(score_mean_stat(
                &*refs,
                &problem.schedule,
                problem.dim(),
                SCORE_MEAN_DRAWS,
                seed,
            )?)
        } else {
            None
        };
        (Some(u), r)
    } else {
        (None, None)
    };
    let score_error_zeta = sweep.report.best_residual_zeta.filter(|_| conj && vp);
    let score_errors = match score_error_zeta {
        Some(z) => Some(score_error_curve(
            &problem,
            &[
                ScoreMethod::Reference,
                ScoreMethod::Unconditional,
                ScoreMethod::Dps { zeta: z },
                ScoreMethod::Blend {
                    lambda: CSE_CURVE_LAMBDA,
                },
            ],
            SCORE_ERROR_PROBES,
            seed,
        )?),
        None => None,
    };
    // Spread of DPS at its best stable zeta (the task default when none is stable).
    let spread_zeta = sweep.report.best_residual_zeta.or(Some(DEFAULT_ZETA));
    let (spread, spread_control, spread_control_sd) = match spread_zeta.and_then(|z| sweep.row(z)) {
        Some((_, samples)) if samples.len() >= SPREAD_SAMPLES => {
            let oracle = problem.oracle_samples(SPREAD_SAMPLES, seed)?;
            let spread = sample_spread(&samples[..SPREAD_SAMPLES], &oracle)?;
            let ratios = (0..SPREAD_CONTROL_REPS as u64)
                .map(|r| {
                    let a =
                        problem.oracle_samples(SPREAD_SAMPLES, seed.wrapping_add(1000 + 2 * r))?;
                    let b =
                        problem.oracle_samples(SPREAD_SAMPLES, seed.wrapping_add(1001 + 2 * r))?;
                    Ok(sample_spread(&a, &b)?.ratio)
                })
                .collect::<Result<Vec<_>>>()?;
            let m = crate::diagnostics::mean(&ratios);
            let sd = (ratios.iter().map(|r| (r - m) * (r - m)).sum::<f64>()
                / (ratios.len() - 1) as f64)
                .sqrt();
            let control = sample_spread(
                &problem.oracle_samples(SPREAD_SAMPLES, seed.wrapping_add(1))?,
                &oracle,
            )?;
            (Some(spread), Some(control), Some(sd))
        }
        _ => (None, None, None),
    };
    Ok(ObservationReport {
        sweep: sweep.report,
        unconditional_score_mean,
        reference_score_mean,
        score_error_zeta,
        score_errors,
        spread_zeta,
        spread,
        spread_control,
        spread_control_sd,
        oracle_occupancy: problem.oracle_occupancy(seed)?,
    })
}

/// Analytic property checks: DPS/DDPM identity, shell concentration, cross-entropy
/// implication, DSG argmax.
#[derive(Debug, Clone, Serialize)]
pub struct PropertyReport {
    pub identity: Worst,
    pub shell: ShellStats,
    pub shell_d1: ShellStats,
    pub crossentropy: Vec<CrossEntropyRow>,
    pub dsg: DsgArgmax,
}

pub const IDENTITY_TRIPLES: usize = 500;
pub const SHELL_DIM: usize = 1000;
pub const SHELL_DRAWS: usize = 10_000;
pub const CROSSENTROPY_DRAWS: usize = 10_000;
pub const CROSSENTROPY_LAMBDAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
pub const DSG_TRIALS: usize = 100;
pub const DSG_GRID: usize = 10_000;
pub const DSG_TOL: f64 = 1e-2;

/// Step of the cross-entropy check: a fifth of the way from the data end.
pub fn crossentropy_step(steps: usize) -> usize {
    (steps / 5).max(2)
}

pub fn property_battery(kind: TaskKind, seed: u64) -> Result<PropertyReport> {
    let spec = RunSpec {
        seed,
        ..kind.spec()
    };
    let problem = spec.build()?;
    let identity = dps_ddpm_identity(std::slice::from_ref(&problem), IDENTITY_TRIPLES, seed)?;
    let t_mid = (problem.steps() / 2).max(1);
    let shell = shell_check_at(&problem.schedule, t_mid, SHELL_DIM, SHELL_DRAWS, seed)?;
    let shell_d1 = shell_check_at(&problem.schedule, t_mid, 1, SHELL_DRAWS, seed)?;
    // The toy's norm-exponential likelihood has no closed-form p(y | x_t);
    // its Gaussian reading stands in.
    let ce_problem = if problem.is_conjugate() {
        problem.clone()
    } else {
        tasks::toy_gaussian(0.1).build()?
    };
    let crossentropy = crossentropy_check(
        &ce_problem,
        crossentropy_step(ce_problem.steps()),
        &CROSSENTROPY_LAMBDAS,
        CROSSENTROPY_DRAWS,
        seed,
    )?;
    let dsg = dsg_argmax(DSG_TRIALS, DSG_GRID, DSG_TOL, seed)?;
    Ok(PropertyReport {
        identity,
        shell,
        shell_d1,
        crossentropy,
        dsg,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnoseReport {
    pub command: &'static str,
    pub task: String,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub observations: ObservationReport,
    pub properties: PropertyReport,
    pub curves: Curves,
    pub provenance: Provenance,
}

/// Pass/fail of every battery measurement against its threshold.
pub fn evaluate(obs: &ObservationReport, props: &PropertyReport) -> Vec<Check> {
    let mut checks = Vec::new();
    let sw = &obs.sweep;
    match (&obs.score_errors, obs.score_error_zeta) {
        (Some(c), Some(z)) => {
            let uncond = c.get("score_error_unconditional").expect("computed");
            let dps = c
                .get(&format!(
                    "score_error_{}",
                    ScoreMethod::Dps { zeta: z }.label()
                ))
                .expect("computed");
            let blend = c
                .get(&format!(
                    "score_error_{}",
                    ScoreMethod::Blend {
                        lambda: CSE_CURVE_LAMBDA
                    }
                    .label()
                ))
                .expect("computed");
            let (mu, md) = (
                crate::diagnostics::mean(uncond),
                crate::diagnostics::mean(dps),
            );
            checks.push(Check::new(
                "score_error.dps_exceeds_unconditional",
                md > mu,
                format!("zeta {z}: dps {md:.4e} vs unconditional {mu:.4e} (trajectory mean)"),
            ));
            let below = blend.iter().zip(uncond).filter(|(b, u)| b < u).count();
            checks.push(Check::new(
                "score_error.cse_below_unconditional",
                below == uncond.len(),
                format!(
                    "lambda {CSE_CURVE_LAMBDA}: below at {below} of {} steps",
                    uncond.len()
                ),
            ));
        }
        _ => checks.push(Check::skipped(
            "score_error",
            "needs a linear-Gaussian measurement on a VP schedule",
        )),
    }
    match (&obs.unconditional_score_mean, sw.score_mean_nondecreasing) {
        (Some(u), Some(mono)) => {
            checks.push(Check::new(
                "score_mean.unconditional_zero_mean",
                u.is_zero_mean(),
                format!(
                    "norm {:.4e} vs bound {:.4e}",
                    u.mean_norm,
                    u.zero_mean_bound()
                ),
            ));
            if let Some(r) = &obs.reference_score_mean {
                checks.push(Check::new(
                    "score_mean.reference_zero_mean",
                    r.is_zero_mean(),
                    format!(
                        "norm {:.4e} vs bound {:.4e}",
                        r.mean_norm,
                        r.zero_mean_bound()
                    ),
                ));
            }
            let big = sw
                .largest_stable_zeta
                .and_then(|z| sw.rows.iter().find(|r| r.zeta == z));
            let ratio = big
                .and_then(|r| r.score_mean)
                .map(|m| m.mean_norm / u.mean_norm);
            checks.push(Check::new(
                "score_mean.dps_inflated",
                ratio.is_some_and(|r| r >= 5.0),
                format!(
                    "largest stable zeta {:?}: dps/unconditional mean norm {:?}",
                    sw.largest_stable_zeta, ratio
                ),
            ));
            checks.push(Check::new(
                "score_mean.nondecreasing_in_zeta",
                mono,
                "over the zeta grid".into(),
            ));
        }
        _ => checks.push(Check::skipped(
            "score_mean",
            "the DPS effective score is defined on VP schedules only",
        )),
    }
    match (&obs.spread, &obs.spread_control, obs.spread_control_sd) {
        (Some(s), Some(c), Some(sd)) => {
            checks.push(Check::new(
                "spread.dps_below_half_oracle",
                s.ratio < 0.5,
                format!("zeta {:?}: ratio {:.4}", obs.spread_zeta, s.ratio),
            ));
            checks.push(Check::new(
                "spread.oracle_control",
                (c.ratio - 1.0).abs() <= 3.0 * sd,
                format!("ratio {:.4}, Monte Carlo sd {sd:.4}", c.ratio),
            ));
        }
        _ => checks.push(Check::skipped("spread", "too few samples")),
    }
    checks.push(Check::new(
        "identity.dps_as_ddpm",
        props.identity.below(1e-12),
        format!(
            "max abs diff {:.3e} over {} triples",
            props.identity.max_error, props.identity.probes
        ),
    ));
    checks.push(Check::new(
        "shell.concentration",
        !props.shell.degenerate && props.shell.q95_deviation < 0.05,
        format!(
            "d = {}: 95% quantile of |ratio - 1| = {:.4}",
            props.shell.dim, props.shell.q95_deviation
        ),
    ));
    let violations = props
        .crossentropy
        .iter()
        .filter(|r| r.status == Implication::Violated)
        .count();
    checks.push(Check::new(
        "crossentropy.implication",
        violations == 0,
        format!(
            "{violations} premise-true/conclusion-false rows of {}",
            props.crossentropy.len()
        ),
    ));
    checks.push(Check::new(
        "dsg.argmax",
        props.dsg.hits >= 99 * props.dsg.trials / 100,
        format!(
            "{} of {} within {DSG_TOL} rad",
            props.dsg.hits, props.dsg.trials
        ),
    ));
    checks
}

/// `lab diagnose`: both batteries on one task.
pub fn diagnose(kind: TaskKind, seed: u64) -> Result<Artifacts<DiagnoseReport>> {
    let spec = RunSpec {
        seed,
        ..kind.spec()
    };
    let observations = observation_battery(kind, seed)?;
    let properties = property_battery(kind, seed)?;
    let checks = evaluate(&observations, &properties);
    let mut curves = observations.sweep.curves.clone();
    if let Some(c) = &observations.score_errors {
        curves.extend(c.clone());
    }
    let provenance = Provenance::of(&spec);
    let report = DiagnoseReport {
        command: "diagnose",
        task: kind.name().into(),
        passed: checks.iter().all(|c| c.passed != Some(false)),
        checks,
        observations,
        properties,
        curves: curves.clone(),
        provenance: provenance.clone(),
    };
    Ok(Artifacts {
        report,
        curves,
        provenance,
        samples: None,
        scatter: None,
    })
}

/// Samples drawn with the reference conditional score.
pub fn exact_conditional_samples(
    problem: &Problem,
    n: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    let reference = problem.reference_score()?;
    Ok(run_unconditional(
        &*reference,
        &problem.schedule,
        problem.solver,
        problem.dim(),
        n,
        seed,
        false,
    )?
    .samples)
}

/// Methods run on the same chain seeds of one task.
#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub task: String,
    pub oracle_occupancy: Vec<f64>,
    pub summary: Vec<MethodSummary>,
}

impl Comparison {
    pub fn get(&self, label: &str) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == label)
    }

    /// Total variation distance between a method's mode occupancy and the oracle's.
    pub fn occupancy_gap(&self, label: &str) -> Option<f64> {
        let s = self.get(label)?;
        Some(
            0.5 * s
                .mode_coverage
                .iter()
                .zip(&self.oracle_occupancy)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>(),
        )
    }
}

pub fn compare_methods(
    kind: TaskKind,
    methods: &[(&str, Config)],
    n: usize,
    seed: u64,
) -> Result<Comparison> {
    let problem = RunSpec {
        seed,
        ..kind.spec()
    }
    .build()?;
    let modes = problem.modes()?;
    let summary = methods
        .iter()
        .map(|(label, c)| {
            let r = run_method(&problem, label, c.clone(), n, seed)?;
            summarize(&problem, label, r.zeta, &r.samples, &modes, None)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Comparison {
        task: kind.name().into(),
        oracle_occupancy: problem.oracle_occupancy(seed)?,
        summary,
    })
}
