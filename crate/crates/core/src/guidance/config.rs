use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// No guidance; the plain solver.
    Unconditional,
    Dps,
    Dsg,
    Dmap,
    Freedom,
    Resample,
    Psld,
    CseDps,
    CseDmap,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Unconditional => "unconditional",
            Method::Dps => "dps",
            Method::Dsg => "dsg",
            Method::Dmap => "dmap",
            Method::Freedom => "freedom",
            Method::Resample => "resample",
            Method::Psld => "psld",
            Method::CseDps => "cse_dps",
            Method::CseDmap => "cse_dmap",
        }
    }

    pub fn uses_cse(self) -> bool {
        matches!(self, Method::CseDps | Method::CseDmap)
    }

    /// Methods whose last action is a projection onto the transition shell.
    pub fn projects(self) -> bool {
        matches!(self, Method::Dsg | Method::Dmap | Method::CseDmap)
    }
}

/// Step size `zeta_t`: one constant, or one value per step (`values[t - 1]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    untagged,
    bound(serialize = "T: Serialize", deserialize = "T: DeserializeOwned")
)]
pub enum Zeta<T> {
    Constant(T),
    PerStep(Vec<T>),
}

impl<T: Real> Zeta<T> {
    pub fn at(&self, t: usize) -> T {
        match self {
            Zeta::Constant(z) => *z,
            Zeta::PerStep(v) => v[t - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    default,
    deny_unknown_fields,
    bound(serialize = "T: Serialize", deserialize = "T: DeserializeOwned")
)]
pub struct GuidanceConfig<T: Real> {
    pub method: Method,
    pub zeta: Zeta<T>,
    /// Inner gradient steps per transition (DMAP).
    pub k: usize,
    /// DSG strength in `[0, 1]`.
    pub dsg_mix: T,
    /// PSLD gluing weight.
    pub gamma: T,
    /// ReSample prior/measurement mixing.
    pub eta: T,
    pub resample_every: usize,
    pub resample_inner: usize,
    /// FreeDOM re-noising window `[c1, c2]`.
    pub travel_window: [usize; 2],
    pub travel_reps: usize,
    /// Weight of the unconditional score in the CSE blend.
    pub cse_lambda: T,
    /// Use `zeta_t / ||f(x0_hat) - y||` as the step.
    pub normalize_step: bool,
}

impl<T: Real> Default for GuidanceConfig<T> {
    fn default() -> Self {
        Self {
            method: Method::Dps,
            zeta: Zeta::Constant(T::lit(0.05)),
            k: 1,
            dsg_mix: T::one(),
            gamma: T::zero(),
            eta: T::one(),
            resample_every: 10,
            resample_inner: 20,
            travel_window: [100, 250],
            travel_reps: 2,
            cse_lambda: T::lit(0.5),
            normalize_step: false,
        }
    }
}

impl<T: Real> GuidanceConfig<T> {
    pub fn new(method: Method, zeta: T) -> Self {
        Self {
            method,
            zeta: Zeta::Constant(zeta),
            ..Self::default()
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn with_lambda(mut self, lambda: T) -> Self {
        self.cse_lambda = lambda;
        self
    }

    /// `zeta_t`.
    pub fn zeta_at(&self, t: usize) -> T {
        self.zeta.at(t)
    }

    /// Checks ranges against a schedule with `steps` reverse steps. Errors
    /// name the offending field.
    pub fn validate(&self, steps: usize) -> Result<()> {
        let bad =
            |field: &str, msg: String| Err(Error::Argument(format!("guidance.{field}: {msg}")));
        match &self.zeta {
            Zeta::Constant(z) if !(*z >= T::zero() && z.is_finite()) => {
                return bad("zeta", format!("must be finite and nonnegative, got {z}"))
            }
            Zeta::PerStep(v) if v.len() != steps => {
                return bad(
                    "zeta",
                    format!(
                        "per-step list has {} entries, schedule has {steps} steps",
                        v.len()
                    ),
                )
            }
            Zeta::PerStep(v) if v.iter().any(|z| !(*z >= T::zero() && z.is_finite())) => {
                return bad("zeta", "entries must be finite and nonnegative".into())
            }
            _ => {}
        }
        if self.k == 0 {
            return bad("k", "must be at least 1".into());
        }
        if !(self.dsg_mix >= T::zero() && self.dsg_mix <= T::one()) {
            return bad(
                "dsg_mix",
                format!("must lie in [0, 1], got {}", self.dsg_mix),
            );
        }
        if !(self.cse_lambda >= T::zero() && self.cse_lambda <= T::one()) {
            return bad(
                "cse_lambda",
                format!("must lie in [0, 1], got {}", self.cse_lambda),
            );
        }
        if !(self.gamma >= T::zero() && self.gamma.is_finite()) {
            return bad(
                "gamma",
                format!("must be finite and nonnegative, got {}", self.gamma),
            );
        }
        if !(self.eta >= T::zero()) {
            return bad("eta", format!("must be nonnegative, got {}", self.eta));
        }
        if self.method == Method::Resample && (self.resample_every == 0 || self.resample_inner == 0)
        {
            return bad(
                "resample_every",
                "resample_every and resample_inner must be at least 1".into(),
            );
        }
        if self.method == Method::Freedom {
            let [c1, c2] = self.travel_window;
            if c1 < 1 || c1 > c2 || c2 > steps {
                return bad(
                    "travel_window",
                    format!("[{c1}, {c2}] is not inside [1, {steps}]"),
                );
            }
            if self.travel_reps == 0 {
                return bad("travel_reps", "must be at least 1".into());
            }
        }
        Ok(())
    }
}
