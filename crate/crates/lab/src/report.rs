//! Report types and their CSV/JSON files.
//!
//! CSV floats use 17 significant digits (`{:.16e}`), enough for an exact
//! round trip; JSON floats use the shortest round-tripping form.

use std::fs;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::config::RunSpec;
use crate::diagnostics::{mean, median, ScoreMean};
use crate::error::{LabError, Result};

pub const REPORT_FILE: &str = "report.json";
pub const CURVES_FILE: &str = "curves.csv";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const SCATTER_FILE: &str = "scatter.csv";
pub const PROVENANCE_FILE: &str = "provenance.json";

pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Per-step series with rows `t = T, T-1, ..., 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub t: Vec<usize>,
    pub columns: Vec<Column>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub values: Vec<f64>,
}

impl Curves {
    pub fn new(steps: usize) -> Self {
        Self {
            t: (1..=steps).rev().collect(),
            columns: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, values: Vec<f64>) {
        assert_eq!(
            values.len(),
            self.t.len(),
            "curve length must equal the number of steps"
        );
        self.columns.push(Column {
            name: name.into(),
            values,
        });
    }

    pub fn extend(&mut self, other: Curves) {
        assert_eq!(self.t, other.t, "curves cover different steps");
        self.columns.extend(other.columns);
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.columns
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.values.as_slice())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        header.extend(self.columns.iter().map(|c| c.name.clone()));
        w.write_record(&header)?;
        for (i, t) in self.t.iter().enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(self.columns.iter().map(|c| fmt_float(c.values[i])));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub median: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        Self {
            median: median(values),
            mean: mean(values),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Terminal-sample statistics of one method, all recomputable from its samples.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub zeta: f64,
    pub n: usize,
    /// `||f(x_0) - y||` over chains.
    pub residual: Stats,
    /// Unnormalized `log p(x_0 | y)` over chains.
    pub log_posterior: Stats,
    pub mode_coverage: Vec<f64>,
    pub per_dim_std: Vec<f64>,
    pub mean_std: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score_mean: Option<ScoreMean>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_sha256: String,
    pub seed: u64,
    pub version: String,
}

impl Provenance {
    pub fn of(spec: &RunSpec) -> Self {
        Self {
            config_sha256: spec.sha256(),
            seed: spec.seed,
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// `chain,dim0,dim1,...`, one row per sample.
pub fn write_samples(path: &Path, samples: &[DVector<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = samples.first().map_or(0, |s| s.len());
    let mut header = vec!["chain".to_string()];
    header.extend((0..d).map(|j| format!("dim{j}")));
    w.write_record(&header)?;
    for (i, x) in samples.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(x.iter().map(|v| fmt_float(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<DVector<f64>>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let chain: usize = rec[0]
            .parse()
            .map_err(|_| LabError::Argument(format!("bad chain index in row {i}")))?;
        if chain != i {
            return Err(LabError::Argument(format!("row {i} holds chain {chain}")));
        }
        let vals = rec
            .iter()
            .skip(1)
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| LabError::Argument(format!("bad float `{f}` in row {i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(DVector::from_vec(vals));
    }
    Ok(out)
}

/// One terminal sample of one method, for scatter plots.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterPoint {
    pub method: String,
    pub chain: usize,
    pub x: DVector<f64>,
}

/// `method,chain,x1,x2,...`.
pub fn write_scatter(path: &Path, points: &[ScatterPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = points.first().map_or(0, |p| p.x.len());
    let mut header = vec!["method".to_string(), "chain".to_string()];
    header.extend((1..=d).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for p in points {
        let mut row = vec![p.method.clone(), p.chain.to_string()];
        row.extend(p.x.iter().map(|v| fmt_float(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Everything a command emits.
#[derive(Debug, Clone)]
pub struct Artifacts<R: Serialize> {
    pub report: R,
    pub curves: Curves,
    pub provenance: Provenance,
    pub samples: Option<Vec<DVector<f64>>>,
    pub scatter: Option<Vec<ScatterPoint>>,
}

impl<R: Serialize> Artifacts<R> {
    /// Writes `report.json`, `provenance.json`, and, when present and enabled,
    /// `curves.csv`, `samples.csv`, and `scatter.csv`.
    pub fn write(&self, dir: &Path, curves: bool, samples: bool) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_json(&dir.join(REPORT_FILE), &self.report)?;
        write_json(&dir.join(PROVENANCE_FILE), &self.provenance)?;
        if curves {
            self.curves.write_csv(&dir.join(CURVES_FILE))?;
        }
        if samples {
            if let Some(s) = &self.samples {
                write_samples(&dir.join(SAMPLES_FILE), s)?;
            }
        }
        if let Some(p) = &self.scatter {
            write_scatter(&dir.join(SCATTER_FILE), p)?;
        }
        Ok(())
    }
}
