use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{add_diagonal, standard_normal, symmetrize};
use crate::scalar::{log_sum_exp, Real};

/// Log-responsibilities below this are treated as exactly zero.
pub const RESPONSIBILITY_CUTOFF: f64 = -700.0;

/// Component covariance: a scalar variance times the identity, or a dense
/// symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariance<T: Real> {
    Iso(T),
    Dense(DMatrix<T>),
}

impl<T: Real> Covariance<T> {
    pub fn to_dense(&self, dim: usize) -> DMatrix<T> {
        match self {
            Covariance::Iso(v) => DMatrix::from_diagonal_element(dim, dim, *v),
            Covariance::Dense(m) => m.clone(),
        }
    }

    /// `Sigma * v`.
    pub fn mul_vec(&self, v: &DVector<T>) -> DVector<T> {
        match self {
            Covariance::Iso(s) => v * *s,
            Covariance::Dense(m) => m * v,
        }
    }

    /// `a^2 * Sigma + s2 * I`, keeping the isotropic representation when possible.
    pub fn scaled_plus_identity(&self, a2: T, s2: T) -> Covariance<T> {
        match self {
            Covariance::Iso(v) => Covariance::Iso(a2 * *v + s2),
            Covariance::Dense(m) => {
                let mut out = m * a2;
                add_diagonal(&mut out, s2);
                Covariance::Dense(out)
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Factor<T: Real> {
    Iso {
        var: T,
    },
    Dense {
        chol: Cholesky<T, Dyn>,
    },
    /// Positive semi-definite but not invertible. `root` satisfies
    /// `root * root^T = Sigma` and is used only for sampling.
    Singular {
        root: DMatrix<T>,
    },
}

/// One weighted Gaussian component with its cached factorization.
#[derive(Debug, Clone)]
pub struct Component<T: Real> {
    weight: T,
    log_weight: T,
    mean: DVector<T>,
    cov: Covariance<T>,
    factor: Factor<T>,
    log_det: T,
}

impl<T: Real> Component<T> {
    fn build(
        weight: T,
        mean: DVector<T>,
        cov: Covariance<T>,
        allow_singular: bool,
    ) -> Result<Self> {
        let dim = mean.len();
        let (factor, log_det) = match &cov {
            Covariance::Iso(v) => {
                if *v > T::zero() {
                    (Factor::Iso { var: *v }, T::lit(dim as f64) * v.ln())
                } else if *v == T::zero() && allow_singular {
                    (
                        Factor::Singular {
                            root: DMatrix::zeros(dim, dim),
                        },
                        T::neg_infinity(),
                    )
                } else {
                    return Err(Error::Argument(format!(
                        "isotropic variance must be positive, got {v}"
                    )));
                }
            }
            Covariance::Dense(m) => {
                check_dim(dim, m.nrows())?;
                check_dim(dim, m.ncols())?;
                let mut sym = m.clone();
                symmetrize(&mut sym);
                match Cholesky::new(sym.clone()) {
                    Some(chol)
                        if !allow_singular
                            || chol.l_dirty().diagonal().iter().all(|d| *d > T::zero()) =>
                    {
                        let ld = chol
                            .l_dirty()
                            .diagonal()
                            .iter()
                            .fold(T::zero(), |acc, d| acc + d.ln())
                            * T::lit(2.0);
                        (Factor::Dense { chol }, ld)
                    }
                    _ if allow_singular => (
                        Factor::Singular {
                            root: psd_root(&sym),
                        },
                        T::neg_infinity(),
                    ),
                    _ => {
                        return Err(Error::Argument(
                            "covariance is not positive definite (Cholesky failed)".into(),
                        ))
                    }
                }
            }
        };
        Ok(Self {
            weight,
            log_weight: weight.ln(),
            mean,
            cov,
            factor,
            log_det,
        })
    }

    fn singular(weight: T, mean: DVector<T>, cov: Covariance<T>) -> Self {
        let dim = mean.len();
        let root = match &cov {
            Covariance::Iso(v) => DMatrix::from_diagonal_element(dim, dim, v.max(T::zero()).sqrt()),
            Covariance::Dense(m) => {
                let mut sym = m.clone();
                symmetrize(&mut sym);
                psd_root(&sym)
            }
        };
        Self {
            weight,
            log_weight: weight.ln(),
            mean,
            cov,
            factor: Factor::Singular { root },
            log_det: T::neg_infinity(),
        }
    }

    pub fn weight(&self) -> T {
        self.weight
    }

    pub fn log_weight(&self) -> T {
        self.log_weight
    }

    pub fn mean(&self) -> &DVector<T> {
        &self.mean
    }

    pub fn covariance(&self) -> &Covariance<T> {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_singular(&self) -> bool {
        matches!(self.factor, Factor::Singular { .. })
    }

    /// `Sigma^{-1} v`, or `None` for a singular component.
    pub fn solve(&self, v: &DVector<T>) -> Option<DVector<T>> {
        match &self.factor {
            Factor::Iso { var } => Some(v / *var),
            Factor::Dense { chol } => Some(chol.solve(v)),
            Factor::Singular { .. } => None,
        }
    }

    /// Dense `Sigma^{-1}`, or `None` for a singular component.
    pub fn inverse(&self) -> Option<DMatrix<T>> {
        let d = self.dim();
        match &self.factor {
            Factor::Iso { var } => Some(DMatrix::from_diagonal_element(d, d, T::one() / *var)),
            Factor::Dense { chol } => Some(chol.inverse()),
            Factor::Singular { .. } => None,
        }
    }

    /// Squared Mahalanobis distance from the mean.
    pub fn mahalanobis_sq(&self, x: &DVector<T>) -> Option<T> {
        let diff = x - &self.mean;
        self.solve(&diff).map(|s| diff.dot(&s))
    }

    /// Gaussian log-density of this component (weight excluded).
    pub fn log_pdf(&self, x: &DVector<T>) -> Option<T> {
        let maha = self.mahalanobis_sq(x)?;
        let d = T::lit(self.dim() as f64);
        Some(-(d * (T::two_pi()).ln() + self.log_det + maha) * T::lit(0.5))
    }

    /// Maps a standard-normal draw `z` to a draw from this component.
    pub fn transform(&self, z: &DVector<T>) -> DVector<T> {
        match &self.factor {
            Factor::Iso { var } => &self.mean + z * var.sqrt(),
            Factor::Dense { chol } => &self.mean + chol.l_dirty().lower_triangle() * z,
            Factor::Singular { root } => &self.mean + root * z,
        }
    }

    pub fn log_det(&self) -> T {
        self.log_det
    }
}

fn psd_root<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    let eig = SymmetricEigen::new(m.clone());
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(T::zero()).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals)
}

/// Weighted mixture of Gaussian components sharing one dimension.
///
/// Used for the prior, every diffused marginal, and every closed-form
/// conditional. Immutable once built.
#[derive(Debug, Clone)]
pub struct GaussianMixture<T: Real> {
    dim: usize,
    components: Vec<Component<T>>,
}

/// Forward-process scaling `x_t = scale * x_0 + noise * eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionScaling<T: Real> {
    pub scale: T,
    pub noise: T,
}

impl<T: Real> DiffusionScaling<T> {
    pub fn new(scale: T, noise: T) -> Result<Self> {
        if !(scale >= T::zero())
            || !(noise >= T::zero())
            || !scale.is_finite()
            || !noise.is_finite()
        {
            return Err(Error::Argument(format!(
                "scaling must be finite and nonnegative, got ({scale}, {noise})"
            )));
        }
        Ok(Self { scale, noise })
    }

    pub fn identity() -> Self {
        Self {
            scale: T::one(),
            noise: T::zero(),
        }
    }

    /// Variance-preserving pair from a cumulative product `alpha_bar`.
    pub fn variance_preserving(alpha_bar: T) -> Self {
        Self {
            scale: alpha_bar.sqrt(),
            noise: (T::one() - alpha_bar).max(T::zero()).sqrt(),
        }
    }

    /// Variance-exploding pair `(1, sigma)`.
    pub fn variance_exploding(sigma: T) -> Self {
        Self {
            scale: T::one(),
            noise: sigma,
        }
    }
}

impl<T: Real> GaussianMixture<T> {
    /// Builds a mixture from `(weight, mean, covariance)` triples.
    ///
    /// Weights must be strictly positive and sum to one; every covariance must
    /// be positive definite.
    pub fn new(components: Vec<(T, DVector<T>, Covariance<T>)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Argument(
                "mixture needs at least one component".into(),
            ));
        }
        let dim = components[0].1.len();
        if dim == 0 {
            return Err(Error::Argument("mixture dimension must be positive".into()));
        }
        let mut total = T::zero();
        for (w, m, _) in &components {
            check_dim(dim, m.len())?;
            if !(*w > T::zero()) {
                return Err(Error::Argument(format!(
                    "component weights must be positive, got {w}"
                )));
            }
            total += *w;
        }
        let tol = T::lit(1e-12).max(T::default_epsilon() * T::lit(16.0 * components.len() as f64));
        if (total - T::one()).abs() > tol {
            return Err(Error::Argument(format!(
                "component weights must sum to 1, got {total}"
            )));
        }
        let components = components
            .into_iter()
            .map(|(w, m, c)| Component::build(w, m, c, false))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dim, components })
    }

    /// Single Gaussian `N(mean, cov)`.
    pub fn gaussian(mean: DVector<T>, cov: Covariance<T>) -> Result<Self> {
        Self::new(vec![(T::one(), mean, cov)])
    }

    /// Builds from unnormalized log-weights, renormalizing in log space.
    /// Components may be positive semi-definite.
    pub(crate) fn from_log_weights(
        parts: Vec<(T, DVector<T>, Covariance<T>)>,
        force_singular: bool,
    ) -> Result<Self> {
        let logs: Vec<T> = parts.iter().map(|p| p.0).collect();
        let lse = log_sum_exp(&logs);
        if !lse.is_finite() {
            return Err(Error::Domain("all component log-weights are -inf".into()));
        }
        let dim = parts[0].1.len();
        let mut components = Vec::with_capacity(parts.len());
        for (lw, m, c) in parts {
            let lw = lw - lse;
            // Drop components whose weight underflows; they carry no mass.
            if lw < T::lit(RESPONSIBILITY_CUTOFF) {
                continue;
            }
            let w = lw.exp();
            let comp = if force_singular {
                Component::singular(w, m, c)
            } else {
                Component::build(w, m, c, true)?
            };
            components.push(Component {
                log_weight: lw,
                ..comp
            });
        }
        Ok(Self { dim, components })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn components(&self) -> &[Component<T>] {
        &self.components
    }

    pub fn weights(&self) -> Vec<T> {
        self.components.iter().map(|c| c.weight).collect()
    }

    /// True when some component covariance is only positive semi-definite
    /// (e.g. after noiseless conditioning). Densities and scores are then
    /// undefined until the mixture is diffused with positive noise.
    pub fn is_degenerate(&self) -> bool {
        self.components.iter().any(Component::is_singular)
    }

    fn require_regular(&self) -> Result<()> {
        if self.is_degenerate() {
            Err(Error::Domain(
                "mixture has a singular (PSD) component; density is undefined".into(),
            ))
        } else {
            Ok(())
        }
    }

    /// `log w_k + log N(x; mu_k, Sigma_k)` for every component.
    pub fn joint_log_densities(&self, x: &DVector<T>) -> Result<Vec<T>> {
        check_dim(self.dim, x.len())?;
        self.require_regular()?;
        Ok(self
            .components
            .iter()
            .map(|c| c.log_weight + c.log_pdf(x).expect("regular component"))
            .collect())
    }

    /// `log sum_k w_k N(x; mu_k, Sigma_k)`.
    pub fn log_density(&self, x: &DVector<T>) -> Result<T> {
        Ok(log_sum_exp(&self.joint_log_densities(x)?))
    }

    /// Posterior component probabilities at `x`. Entries whose
    /// log-responsibility falls below the cutoff are exactly zero.
    pub fn responsibilities(&self, x: &DVector<T>) -> Result<Vec<T>> {
        let joint = self.joint_log_densities(x)?;
        Ok(normalize_log(&joint))
    }

    /// `grad_x log p(x) = sum_k r_k(x) Sigma_k^{-1} (mu_k - x)`.
    pub fn score(&self, x: &DVector<T>) -> Result<DVector<T>> {
        let resp = self.responsibilities(x)?;
        let mut out = DVector::zeros(self.dim);
        for (c, r) in self.components.iter().zip(resp) {
            if r > T::zero() {
                let g = c.solve(&(c.mean() - x)).expect("regular component");
                out.axpy(r, &g, T::one());
            }
        }
        Ok(out)
    }

    /// Draws one sample: component by weight, then a Gaussian draw.
    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<T> {
        let u: f64 = rng.random();
        let k = self.pick_component(u);
        let z = standard_normal(self.dim, rng);
        self.components[k].transform(&z)
    }

    /// `n` i.i.d. draws.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<DVector<T>> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    fn pick_component(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (k, c) in self.components.iter().enumerate() {
            acc += c.weight.as_f64();
            if u < acc {
                return k;
            }
        }
        self.components.len() - 1
    }

    /// Pushes the mixture through `x_t = a x_0 + sigma eps`: every component
    /// becomes `N(a mu_k, a^2 Sigma_k + sigma^2 I)` with its weight unchanged.
    pub fn diffuse(&self, scaling: DiffusionScaling<T>) -> GaussianMixture<T> {
        let a = scaling.scale;
        let a2 = a * a;
        let s2 = scaling.noise * scaling.noise;
        let components = self
            .components
            .iter()
            .map(|c| {
                let mean = c.mean() * a;
                let cov = c.cov.scaled_plus_identity(a2, s2);
                let built = if c.is_singular() && s2 == T::zero() {
                    Component::singular(c.weight, mean, cov)
                } else {
                    Component::build(c.weight, mean.clone(), cov.clone(), true)
                        .unwrap_or_else(|_| Component::singular(c.weight, mean, cov))
                };
                Component {
                    log_weight: c.log_weight,
                    ..built
                }
            })
            .collect();
        GaussianMixture {
            dim: self.dim,
            components,
        }
    }

    /// Index of the component nearest to `x` under each component's own
    /// Mahalanobis metric (Euclidean for singular components); ties go to
    /// the lower index.
    pub fn nearest_component(&self, x: &DVector<T>) -> usize {
        let mut best = 0;
        let mut best_d = T::infinity();
        for (k, c) in self.components.iter().enumerate() {
            let d = c
                .mahalanobis_sq(x)
                .unwrap_or_else(|| (x - c.mean()).norm_squared());
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }
}

/// Normalizes log-weights into probabilities, zeroing entries below the cutoff.
pub(crate) fn normalize_log<T: Real>(logs: &[T]) -> Vec<T> {
    let lse = log_sum_exp(logs);
    let cutoff = T::lit(RESPONSIBILITY_CUTOFF);
    let mut out: Vec<T> = logs
        .iter()
        .map(|&l| {
            let lr = l - lse;
            if lr < cutoff {
                T::zero()
            } else {
                lr.exp()
            }
        })
        .collect();
    let total = out.iter().fold(T::zero(), |a, &b| a + b);
    for v in &mut out {
        *v /= total;
    }
    out
}
