use nalgebra::{Cholesky, DVector};

use crate::error::{check_dim, Error, Result};
use crate::operators::Operator;
use crate::scalar::Real;

/// Likelihood family `p(y | x)` attached to a forward operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Likelihood<T: Real> {
    /// `y = f(x) + sigma_y * n`, `n ~ N(0, I)`. `sigma_y = 0` is noiseless.
    Gaussian { sigma_y: T },
    /// `p(y | x) ∝ exp(-zeta * ||f(x) - y||)`, left unnormalized.
    NormExponential { zeta: T },
}

/// Operator, likelihood, and observed `y`.
#[derive(Debug, Clone)]
pub struct MeasurementModel<T: Real> {
    operator: Operator<T>,
    likelihood: Likelihood<T>,
    y: DVector<T>,
}

impl<T: Real> MeasurementModel<T> {
    pub fn new(
        operator: impl Into<Operator<T>>,
        likelihood: Likelihood<T>,
        y: DVector<T>,
    ) -> Result<Self> {
        let operator = operator.into();
        check_dim(operator.output_dim(), y.len())?;
        match likelihood {
            Likelihood::Gaussian { sigma_y } => {
                if !(sigma_y >= T::zero()) {
                    return Err(Error::Argument(format!(
                        "sigma_y must be nonnegative, got {sigma_y}"
                    )));
                }
                if sigma_y == T::zero() {
                    let op = operator.as_linear().ok_or_else(|| {
                        Error::Precondition(
                            "noiseless Gaussian measurement requires a linear operator".into(),
                        )
                    })?;
                    let a = op.matrix();
                    if Cholesky::new(&a * a.transpose()).is_none() {
                        return Err(Error::Precondition(
                            "noiseless Gaussian measurement requires a full-row-rank operator"
                                .into(),
                        ));
                    }
                }
            }
            Likelihood::NormExponential { zeta } => {
                if !(zeta > T::zero()) {
                    return Err(Error::Argument(format!(
                        "norm-exponential zeta must be positive, got {zeta}"
                    )));
                }
            }
        }
        Ok(Self {
            operator,
            likelihood,
            y,
        })
    }

    pub fn operator(&self) -> &Operator<T> {
        &self.operator
    }

    pub fn likelihood(&self) -> Likelihood<T> {
        self.likelihood
    }

    pub fn y(&self) -> &DVector<T> {
        &self.y
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self.likelihood, Likelihood::Gaussian { .. })
    }

    /// `f(x) - y`.
    pub fn residual(&self, x: &DVector<T>) -> Result<DVector<T>> {
        Ok(self.operator.apply(x)? - &self.y)
    }

    /// `log p(y | x)`. Gaussian noise is normalized; the norm-exponential
    /// family is not. Noiseless Gaussian measurements have no density.
    pub fn log_likelihood(&self, x: &DVector<T>) -> Result<T> {
        let r = self.residual(x)?;
        match self.likelihood {
            Likelihood::Gaussian { sigma_y } => {
                if sigma_y == T::zero() {
                    return Err(Error::Domain(
                        "noiseless measurement has no likelihood density".into(),
                    ));
                }
                let m = T::lit(r.len() as f64);
                let var = sigma_y * sigma_y;
                Ok(-(m * (T::two_pi() * var).ln() + r.norm_squared() / var) * T::lit(0.5))
            }
            Likelihood::NormExponential { zeta } => Ok(-zeta * r.norm()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::LinearOp;

    #[test]
    fn noiseless_requires_full_row_rank() {
        let inpaint = LinearOp::<f64>::inpaint(vec![0], 2).unwrap();
        let err = MeasurementModel::new(
            inpaint.clone(),
            Likelihood::Gaussian { sigma_y: 0.0 },
            DVector::zeros(2),
        );
        assert!(matches!(err, Err(Error::Precondition(_))));
        assert!(MeasurementModel::new(
            inpaint,
            Likelihood::Gaussian { sigma_y: 0.1 },
            DVector::zeros(2)
        )
        .is_ok());
        let select = LinearOp::<f64>::select(vec![0], 2).unwrap();
        assert!(MeasurementModel::new(
            select,
            Likelihood::Gaussian { sigma_y: 0.0 },
            DVector::zeros(1)
        )
        .is_ok());
    }

    #[test]
    fn norm_exponential_log_likelihood() {
        let op = LinearOp::<f64>::inpaint(vec![0], 2).unwrap();
        let y = DVector::from_vec(vec![0.5, 0.0]);
        let m = MeasurementModel::new(op, Likelihood::NormExponential { zeta: 0.05 }, y).unwrap();
        let ll = m
            .log_likelihood(&DVector::from_vec(vec![1.0, 3.0]))
            .unwrap();
        assert!((ll + 0.025).abs() < 1e-15);
    }
}
