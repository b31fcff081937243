//! JSON run configuration and its validation.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use mapguide_core::operators::{Grid, QuadraticMap};
use mapguide_core::{
    Config, Error as CoreError, Gmm, KarrasSchedule, Likelihood, LinearOp, Measurement,
    MeasurementModel, NoiseSchedule, Operator, Schedule, Solver, VpSchedule,
};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ConfigError;
use crate::problem::Problem;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub prior: Gmm,
    pub schedule: ScheduleSpec,
    pub solver: Solver,
    pub operator: OperatorSpec,
    pub likelihood: LikelihoodSpec,
    /// Observed measurement.
    pub y: Vec<f64>,
    pub guidance: Config,
    pub n_chains: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub outputs: OutputSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    VpLinear {
        steps: usize,
        beta_start: f64,
        beta_end: f64,
    },
    Karras {
        steps: usize,
        sigma_min: f64,
        sigma_max: f64,
        rho: f64,
    },
}

/// Operators act on the prior's dimension; grid shapes must multiply to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorSpec {
    Select {
        keep: Vec<usize>,
    },
    Inpaint {
        keep: Vec<usize>,
    },
    Downsample {
        factor: usize,
        rows: usize,
        cols: usize,
    },
    GaussianBlur {
        size: usize,
        intensity: f64,
        rows: usize,
        cols: usize,
    },
    Dense {
        matrix: Vec<Vec<f64>>,
    },
    /// `QuadraticMap::random(out_dim, dim, strength)` drawn from `seed`.
    Quadratic {
        out_dim: usize,
        strength: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LikelihoodSpec {
    Gaussian { sigma_y: f64 },
    NormExponential { zeta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    /// Output directory; `--out` takes precedence.
    pub dir: Option<PathBuf>,
    pub samples: bool,
    pub curves: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: None,
            samples: true,
            curves: true,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule, CoreError> {
        Ok(match *self {
            ScheduleSpec::VpLinear {
                steps,
                beta_start,
                beta_end,
            } => Schedule::Vp(VpSchedule::linear(steps, beta_start, beta_end)?),
            ScheduleSpec::Karras {
                steps,
                sigma_min,
                sigma_max,
                rho,
            } => Schedule::Karras(KarrasSchedule::new(steps, sigma_min, sigma_max, rho)?),
        })
    }
}

impl OperatorSpec {
    pub fn build(&self, dim: usize) -> Result<Operator<f64>, ConfigError> {
        fn at(field: &'static str) -> impl Fn(CoreError) -> ConfigError {
            move |e| ConfigError::new(format!("operator.{field}"), e)
        }
        let grid = |rows: usize, cols: usize| {
            if rows * cols == dim {
                Ok(Grid::new(rows, cols))
            } else {
                Err(ConfigError::new(
                    "operator.rows",
                    format!("grid {rows}x{cols} does not cover dimension {dim}"),
                ))
            }
        };
        Ok(match self {
            OperatorSpec::Select { keep } => LinearOp::select(keep.clone(), dim)
                .map_err(at("keep"))?
                .into(),
            OperatorSpec::Inpaint { keep } => LinearOp::inpaint(keep.clone(), dim)
                .map_err(at("keep"))?
                .into(),
            OperatorSpec::Downsample { factor, rows, cols } => {
                LinearOp::downsample(*factor, grid(*rows, *cols)?)
                    .map_err(at("factor"))?
                    .into()
            }
            OperatorSpec::GaussianBlur {
                size,
                intensity,
                rows,
                cols,
            } => LinearOp::gaussian_blur(*size, *intensity, grid(*rows, *cols)?)
                .map_err(at("size"))?
                .into(),
            OperatorSpec::Dense { matrix } => {
                if matrix.is_empty() {
                    return Err(ConfigError::new(
                        "operator.matrix",
                        "needs at least one row",
                    ));
                }
                if let Some(i) = matrix.iter().position(|r| r.len() != dim) {
                    return Err(ConfigError::new(
                        format!("operator.matrix[{i}]"),
                        format!(
                            "row has {} entries, prior dimension is {dim}",
                            matrix[i].len()
                        ),
                    ));
                }
                LinearOp::Dense(DMatrix::from_fn(matrix.len(), dim, |i, j| matrix[i][j])).into()
            }
            OperatorSpec::Quadratic {
                out_dim,
                strength,
                seed,
            } => {
                if *out_dim == 0 {
                    return Err(ConfigError::new("operator.out_dim", "must be positive"));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                Operator::nonlinear(QuadraticMap::random(*out_dim, dim, *strength, &mut rng))
            }
        })
    }
}

impl LikelihoodSpec {
    pub fn build(&self) -> Likelihood<f64> {
        match *self {
            LikelihoodSpec::Gaussian { sigma_y } => Likelihood::Gaussian { sigma_y },
            LikelihoodSpec::NormExponential { zeta } => Likelihood::NormExponential { zeta },
        }
    }

    fn field(&self) -> &'static str {
        match self {
            LikelihoodSpec::Gaussian { .. } => "likelihood.sigma_y",
            LikelihoodSpec::NormExponential { .. } => "likelihood.zeta",
        }
    }
}

/// Core guidance errors read `guidance.<field>: <message>`.
fn guidance_error(e: CoreError) -> ConfigError {
    if let CoreError::Argument(msg) = &e {
        if let Some((path, rest)) = msg.split_once(": ") {
            if path.starts_with("guidance.") {
                return ConfigError::new(path, rest);
            }
        }
    }
    ConfigError::new("guidance", e)
}

impl RunSpec {
    /// Parses JSON; errors carry the path of the field that failed.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let path = if path == "." { String::new() } else { path };
            ConfigError::new(path, e.into_inner())
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Validates every field and assembles the numeric objects.
    pub fn build(&self) -> Result<Problem, ConfigError> {
        if self.n_chains == 0 {
            return Err(ConfigError::new("n_chains", "must be at least 1"));
        }
        let dim = self.prior.dim();
        let schedule = self
            .schedule
            .build()
            .map_err(|e| ConfigError::new("schedule", e))?;
        self.solver
            .check_schedule(&schedule)
            .map_err(|e| ConfigError::new("solver", e))?;
        let op = self.operator.build(dim)?;
        if self.y.len() != op.output_dim() {
            return Err(ConfigError::new(
                "y",
                format!(
                    "has {} entries, operator output has {}",
                    self.y.len(),
                    op.output_dim()
                ),
            ));
        }
        if let Some(i) = self.y.iter().position(|v| !v.is_finite()) {
            return Err(ConfigError::new(format!("y[{i}]"), "must be finite"));
        }
        let meas: Measurement = MeasurementModel::new(
            op,
            self.likelihood.build(),
            DVector::from_vec(self.y.clone()),
        )
        .map_err(|e| ConfigError::new(self.likelihood.field(), e))?;
        self.guidance
            .validate(schedule.steps())
            .map_err(guidance_error)?;
        let problem = Problem {
            prior: Arc::new(self.prior.clone()),
            schedule: Arc::new(schedule),
            solver: self.solver,
            meas,
            guidance: self.guidance.clone(),
            n_chains: self.n_chains,
            seed: self.seed,
        };
        problem
            .sampler(self.guidance.clone())
            .map_err(|e| ConfigError::new("guidance.method", e))?;
        Ok(problem)
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn sha256(&self) -> String {
        let mut canonical = self.clone();
        canonical.outputs.dir = None;
        let bytes = serde_json::to_vec(&canonical).expect("spec serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
