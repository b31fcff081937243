//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::scalar::Real;

pub type Vector<T> = DVector<T>;
pub type Matrix<T> = DMatrix<T>;

/// Draws a vector of i.i.d. standard normal entries.
pub fn standard_normal<T: Real, R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<T> {
    DVector::from_fn(dim, |_, _| T::lit(rng.sample::<f64, _>(StandardNormal)))
}

/// Symmetrizes in place: `m <- (m + m^T) / 2`.
pub fn symmetrize<T: Real>(m: &mut DMatrix<T>) {
    let n = m.nrows();
    let half = T::lit(0.5);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (m[(i, j)] + m[(j, i)]) * half;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Adds `s` to every diagonal entry.
pub fn add_diagonal<T: Real>(m: &mut DMatrix<T>, s: T) {
    for i in 0..m.nrows().min(m.ncols()) {
        m[(i, i)] += s;
    }
}

/// Relative error `|a - b| / max(|a|, floor)` on Euclidean norms.
pub fn relative_error<T: Real>(a: &DVector<T>, b: &DVector<T>, floor: T) -> T {
    let denom = a.norm().max(floor);
    (a - b).norm() / denom
}

/// Central-difference gradient of a scalar function.
pub fn central_difference<T: Real, F: Fn(&DVector<T>) -> T>(
    f: F,
    x: &DVector<T>,
    h: T,
) -> DVector<T> {
    let mut probe = x.clone();
    DVector::from_fn(x.len(), |i, _| {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        (up - down) / (h + h)
    })
}

/// Central-difference Jacobian of a vector function; column `j` is `df/dx_j`.
pub fn central_difference_jacobian<T: Real, F: Fn(&DVector<T>) -> DVector<T>>(
    f: F,
    x: &DVector<T>,
    h: T,
) -> DMatrix<T> {
    let mut probe = x.clone();
    let mut cols = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        probe[j] = x[j] + h;
        let up = f(&probe);
        probe[j] = x[j] - h;
        let down = f(&probe);
        probe[j] = x[j];
        cols.push((up - down) / (h + h));
    }
    DMatrix::from_columns(&cols)
}
