//! The fixed benchmark tasks shipped with the lab.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use mapguide_core::gmm::Covariance;
use mapguide_core::operators::Grid;
use mapguide_core::samplers::chain_rng;
use mapguide_core::{Config, Gmm, LinearOp, Method, Solver};
use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{LikelihoodSpec, OperatorSpec, RunSpec, ScheduleSpec};

/// Guidance step used whenever methods are compared "at matched zeta".
pub const DEFAULT_ZETA: f64 = 0.05;
/// The sweep grid, before task scaling.
pub const ZETA_GRID: [f64; 4] = [0.05, 0.3, 1.2, 4.8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Toy,
    Bimodal64,
    Blur256,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Toy, TaskKind::Bimodal64, TaskKind::Blur256];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Toy => "toy",
            TaskKind::Bimodal64 => "bimodal64",
            TaskKind::Blur256 => "blur256",
        }
    }

    pub fn spec(self) -> RunSpec {
        match self {
            TaskKind::Toy => toy(),
            TaskKind::Bimodal64 => bimodal64(),
            TaskKind::Blur256 => blur256(),
        }
    }

    /// Multiplier applied to [`ZETA_GRID`].
    pub fn zeta_scale(self) -> f64 {
        1.0
    }

    pub fn zeta_grid(self) -> Vec<f64> {
        ZETA_GRID.iter().map(|z| z * self.zeta_scale()).collect()
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown task `{s}` (expected toy, bimodal64, or blur256)"))
    }
}

fn iso_pair(a: Vec<f64>, b: Vec<f64>, var: f64) -> Gmm {
    Gmm::new(vec![
        (0.5, DVector::from_vec(a), Covariance::Iso(var)),
        (0.5, DVector::from_vec(b), Covariance::Iso(var)),
    ])
    .expect("valid task prior")
}

/// The 2-d toy: components at `(1, 1)` and `(-1, -1)`, variance `0.09`,
/// first coordinate observed at `0.5`, 100-step Karras grid with
/// Euler-ancestral, and the norm-exponential likelihood with temperature `0.05`.
pub fn toy() -> RunSpec {
    RunSpec {
        prior: iso_pair(vec![1.0, 1.0], vec![-1.0, -1.0], 0.09),
        schedule: ScheduleSpec::Karras {
            steps: 100,
            sigma_min: 0.002,
            sigma_max: 4.0,
            rho: 7.0,
        },
        solver: Solver::EulerAncestral,
        operator: OperatorSpec::Inpaint { keep: vec![0] },
        likelihood: LikelihoodSpec::NormExponential { zeta: 0.05 },
        y: vec![0.5, 0.0],
        guidance: Config::new(Method::Dps, DEFAULT_ZETA),
        n_chains: 200,
        seed: 0,
        outputs: Default::default(),
    }
}

/// The toy under the noisy Gaussian reading of the same measurement.
pub fn toy_gaussian(sigma_y: f64) -> RunSpec {
    RunSpec {
        likelihood: LikelihoodSpec::Gaussian { sigma_y },
        ..toy()
    }
}

/// Shift of every observed value that sets the exact posterior mode masses
/// to `(0.75, 0.25)`: the log mass ratio is `2.5 * sum(y) = ln 3`.
pub const BIMODAL_SHIFT: f64 = 0.013_732_653_608_351_372;

/// `d = 64`, isotropic std `0.3`, centers `+-1/8` in every coordinate (mode
/// distance 2), first 32 coordinates observed with `sigma_y = 0.1`, 500-step
/// linear VP schedule with DDPM.
pub fn bimodal64() -> RunSpec {
    let d = 64;
    let c = 1.0 / 8.0;
    let y = (0..32)
        .map(|i| if i % 2 == 0 { 0.5 } else { -0.5 } + BIMODAL_SHIFT)
        .collect();
    RunSpec {
        prior: iso_pair(vec![c; d], vec![-c; d], 0.09),
        schedule: ScheduleSpec::VpLinear {
            steps: 500,
            beta_start: 1e-4,
            beta_end: 0.02,
        },
        solver: Solver::Ddpm,
        operator: OperatorSpec::Select {
            keep: (0..32).collect(),
        },
        likelihood: LikelihoodSpec::Gaussian { sigma_y: 0.1 },
        y,
        guidance: Config::new(Method::Dps, DEFAULT_ZETA),
        n_chains: 100,
        seed: 0,
        outputs: Default::default(),
    }
}

pub const BLUR_SIDE: usize = 16;
pub const BLUR_KERNEL: usize = 7;
pub const BLUR_INTENSITY: f64 = 1.5;
pub const BLUR_SIGMA_Y: f64 = 0.05;
const BLUR_TRUTH_SEED: u64 = 2024;

/// Striped pattern with `period` pixels along rows (`vertical = false`) or columns.
fn stripes(side: usize, period: f64, vertical: bool) -> Vec<f64> {
    (0..side * side)
        .map(|i| {
            let (r, c) = (i / side, i % side);
            let u = if vertical { c } else { r } as f64;
            0.5 * (2.0 * PI * u / period).cos()
        })
        .collect()
}

/// 16x16 images: vertical vs horizontal stripes (period 8, amplitude 0.5),
/// isotropic std `0.3`; 7x7 circular Gaussian blur with std 1.5 and
/// `sigma_y = 0.05`; 100-step linear VP schedule with DDPM. `y` is the blurred
/// image of a fixed draw from the vertical-stripe component plus noise.
pub fn blur256() -> RunSpec {
    let side = BLUR_SIDE;
    let prior = iso_pair(stripes(side, 8.0, true), stripes(side, 8.0, false), 0.09);
    let op = LinearOp::gaussian_blur(BLUR_KERNEL, BLUR_INTENSITY, Grid::new(side, side))
        .expect("valid blur");
    let mut rng = chain_rng(BLUR_TRUTH_SEED, 0);
    let comp = &prior.components()[0];
    let z = DVector::from_fn(side * side, |_, _| StandardNormal.sample(&mut rng));
    let truth = comp.transform(&z);
    let clean = op.apply(&truth).expect("dimensions match");
    let y = clean
        .iter()
        .map(|v| {
            v + BLUR_SIGMA_Y * {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            }
        })
        .collect();
    RunSpec {
        prior,
        schedule: ScheduleSpec::VpLinear {
            steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
        },
        solver: Solver::Ddpm,
        operator: OperatorSpec::GaussianBlur {
            size: BLUR_KERNEL,
            intensity: BLUR_INTENSITY,
            rows: side,
            cols: side,
        },
        likelihood: LikelihoodSpec::Gaussian {
            sigma_y: BLUR_SIGMA_Y,
        },
        y,
        guidance: Config::new(Method::Dps, DEFAULT_ZETA),
        n_chains: 100,
        seed: 0,
        outputs: Default::default(),
    }
}
