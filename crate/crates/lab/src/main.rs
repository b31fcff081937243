use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mapguide_lab::config::OutputSpec;
use mapguide_lab::experiments::{self, Check};
use mapguide_lab::report::{Artifacts, REPORT_FILE};
use mapguide_lab::{LabError, RunSpec, TaskKind};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "lab",
    version,
    about = "Measurement-guided diffusion sampling experiments"
)]
struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one guided sampler from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's `outputs.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Two-mode toy: oracle, unconditional, DPS, DSG, DMAP, exact conditional.
    Toy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sweep the guidance scale of a JSON config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated zeta values.
        #[arg(long, value_delimiter = ',', required = true)]
        zeta: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score-statistic and analytic-property batteries on a benchmark task.
    Diagnose {
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

const EXIT_ERROR: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_CHECK_FAILED: u8 = 3;

fn load(path: &Path, seed: Option<u64>) -> Result<RunSpec, LabError> {
    let mut spec = RunSpec::load(path)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    Ok(spec)
}

fn out_dir(out: Option<PathBuf>, spec: &RunSpec) -> Result<PathBuf, LabError> {
    out.or_else(|| spec.outputs.dir.clone()).ok_or_else(|| {
        LabError::Argument("no output directory: pass --out or set outputs.dir".into())
    })
}

fn write<R: Serialize>(a: &Artifacts<R>, out: &Path, outputs: &OutputSpec) -> Result<(), LabError> {
    a.write(out, outputs.curves, outputs.samples)?;
    println!("wrote {}", out.join(REPORT_FILE).display());
    Ok(())
}

fn print_checks(checks: &[Check]) {
    for c in checks {
        let status = match c.passed {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "SKIP",
        };
        println!("{status} {}: {}", c.name, c.detail);
    }
}

fn execute(cli: Cli) -> Result<bool, LabError> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let spec = load(&config, seed)?;
            let out = out_dir(out, &spec)?;
            let a = experiments::run(&spec)?;
            for s in &a.report.summary {
                println!(
                    "{}: median residual {:.4e}, coverage {:?}",
                    s.method, s.residual.median, s.mode_coverage
                );
            }
            write(&a, &out, &spec.outputs)?;
            Ok(true)
        }
        Command::Toy { out, seed } => {
            let a = experiments::toy_experiment(seed)?;
            for o in &a.report.occupancy {
                println!("{}: occupancy {:?}", o.method, o.coverage);
            }
            write(&a, &out, &OutputSpec::default())?;
            Ok(true)
        }
        Command::Sweep {
            config,
            zeta,
            out,
            seed,
        } => {
            let spec = load(&config, seed)?;
            let out = out_dir(out, &spec)?;
            let sweep = experiments::zeta_sweep(&spec, &zeta)?;
            for r in &sweep.report.rows {
                println!(
                    "zeta {}: median residual {:.4e}, stable {}",
                    r.zeta, r.median_residual, r.stable
                );
            }
            write(&experiments::sweep_artifacts(&sweep), &out, &spec.outputs)?;
            Ok(true)
        }
        Command::Diagnose { task, out, seed } => {
            let a = experiments::diagnose(task, seed)?;
            print_checks(&a.report.checks);
            write(&a, &out, &OutputSpec::default())?;
            Ok(a.report.passed)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers.max(1))
        .build();
    let result = match pool {
        Ok(pool) => pool.install(|| execute(cli)),
        Err(e) => Err(LabError::Argument(format!("--workers: {e}"))),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_CHECK_FAILED),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, LabError::Config(_)) {
                EXIT_CONFIG
            } else {
                EXIT_ERROR
            })
        }
    }
}
