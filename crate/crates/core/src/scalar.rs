//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};

use num_traits::{FloatConst, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable by the mixture, schedule, and guidance code.
///
/// Implemented for `f32` and `f64`. Densities are always mixed in log space,
/// but the 40+ orders of magnitude spanned by component weights in small
/// noise regimes mean `f64` is the type to use for anything quantitative.
pub trait Real:
    nalgebra::RealField
    + Copy
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal into this scalar.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    fn neg_infinity() -> Self;

    fn infinity() -> Self;
}

impl Real for f64 {
    fn neg_infinity() -> Self {
        f64::NEG_INFINITY
    }
    fn infinity() -> Self {
        f64::INFINITY
    }
}

impl Real for f32 {
    fn neg_infinity() -> Self {
        f32::NEG_INFINITY
    }
    fn infinity() -> Self {
        f32::INFINITY
    }
}

/// Numerically stable `log(sum(exp(v)))`. Returns `-inf` for an empty slice
/// or when every entry is `-inf`.
pub fn log_sum_exp<T: Real>(values: &[T]) -> T {
    let max = values
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    if !max.is_finite() {
        return max;
    }
    let sum = values
        .iter()
        .fold(T::zero(), |acc, &v| acc + (v - max).exp());
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_handles_extremes() {
        assert_eq!(log_sum_exp::<f64>(&[]), f64::NEG_INFINITY);
        let v = [-1000.0, -1000.0];
        assert!((log_sum_exp(&v) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        let v = [0.0f64, -800.0];
        assert!((log_sum_exp(&v)).abs() < 1e-300);
    }
}
