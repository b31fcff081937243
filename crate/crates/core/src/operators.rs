//! Measurement operators `f(.)` acting on flattened state vectors.
//!
//! Linear operators keep a structured representation so that `apply` and
//! `transpose_apply` never materialize the matrix; [`LinearOp::matrix`]
//! builds it on demand for conditioning and tests.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::scalar::Real;

/// Row-major 2-D layout of a flattened vector. A 1-D signal is `rows = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn line(len: usize) -> Self {
        Self { rows: 1, cols: len }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LinearOp<T: Real> {
    /// Explicit `m x dim` matrix.
    Dense(DMatrix<T>),
    /// Keeps the listed coordinates, in order; output has `keep.len()` entries.
    Select { keep: Vec<usize>, dim: usize },
    /// Zeroes every coordinate not listed; output has `dim` entries.
    Inpaint { keep: Vec<usize>, dim: usize },
    /// Block averaging by `factor` on each grid axis longer than one.
    Downsample { factor: usize, grid: Grid },
    /// Circular convolution with a normalized kernel (odd extents).
    CircularBlur { kernel: DMatrix<T>, grid: Grid },
}

impl<T: Real> LinearOp<T> {
    pub fn select(keep: Vec<usize>, dim: usize) -> Result<Self> {
        validate_keep(&keep, dim)?;
        Ok(LinearOp::Select { keep, dim })
    }

    pub fn inpaint(keep: Vec<usize>, dim: usize) -> Result<Self> {
        validate_keep(&keep, dim)?;
        Ok(LinearOp::Inpaint { keep, dim })
    }

    pub fn downsample(factor: usize, grid: Grid) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Argument("downsample factor must be positive".into()));
        }
        let (fr, fc) = block_shape(factor, grid);
        if !grid.rows.is_multiple_of(fr) || !grid.cols.is_multiple_of(fc) {
            return Err(Error::Argument(format!(
                "grid {}x{} is not divisible by downsample factor {factor}",
                grid.rows, grid.cols
            )));
        }
        Ok(LinearOp::Downsample { factor, grid })
    }

    /// Gaussian blur with an odd `size` kernel and standard deviation
    /// `intensity` (in grid cells). A 1-D grid gets a 1-D kernel. An
    /// `intensity` of zero yields the identity kernel.
    pub fn gaussian_blur(size: usize, intensity: T, grid: Grid) -> Result<Self> {
        if size.is_multiple_of(2) {
            return Err(Error::Argument(format!(
                "blur kernel size must be odd, got {size}"
            )));
        }
        if intensity < T::zero() {
            return Err(Error::Argument("blur intensity must be nonnegative".into()));
        }
        let kr = if grid.rows == 1 { 1 } else { size };
        let kc = size;
        let (hr, hc) = ((kr / 2) as f64, (kc / 2) as f64);
        let s = intensity.as_f64();
        let mut kernel = DMatrix::from_fn(kr, kc, |i, j| {
            let (di, dj) = (i as f64 - hr, j as f64 - hc);
            if s == 0.0 {
                if di == 0.0 && dj == 0.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                (-(di * di + dj * dj) / (2.0 * s * s)).exp()
            }
        });
        let total: f64 = kernel.iter().sum();
        kernel /= total;
        Ok(LinearOp::CircularBlur {
            kernel: kernel.map(T::lit),
            grid,
        })
    }

    pub fn blur_with_kernel(kernel: DMatrix<T>, grid: Grid) -> Result<Self> {
        if kernel.nrows().is_multiple_of(2) || kernel.ncols().is_multiple_of(2) {
            return Err(Error::Argument("kernel extents must be odd".into()));
        }
        Ok(LinearOp::CircularBlur { kernel, grid })
    }

    pub fn input_dim(&self) -> usize {
        match self {
            LinearOp::Dense(m) => m.ncols(),
            LinearOp::Select { dim, .. } | LinearOp::Inpaint { dim, .. } => *dim,
            LinearOp::Downsample { grid, .. } | LinearOp::CircularBlur { grid, .. } => grid.len(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            LinearOp::Dense(m) => m.nrows(),
            LinearOp::Select { keep, .. } => keep.len(),
            LinearOp::Inpaint { dim, .. } => *dim,
            LinearOp::Downsample { factor, grid } => {
                let (fr, fc) = block_shape(*factor, *grid);
                (grid.rows / fr) * (grid.cols / fc)
            }
            LinearOp::CircularBlur { grid, .. } => grid.len(),
        }
    }

    /// `A x`.
    pub fn apply(&self, x: &DVector<T>) -> Result<DVector<T>> {
        check_dim(self.input_dim(), x.len())?;
        Ok(match self {
            LinearOp::Dense(m) => m * x,
            LinearOp::Select { keep, .. } => {
                DVector::from_iterator(keep.len(), keep.iter().map(|&i| x[i]))
            }
            LinearOp::Inpaint { keep, dim } => {
                let mut out = DVector::zeros(*dim);
                for &i in keep {
                    out[i] = x[i];
                }
                out
            }
            LinearOp::Downsample { factor, grid } => {
                let (fr, fc) = block_shape(*factor, *grid);
                let (or, oc) = (grid.rows / fr, grid.cols / fc);
                let inv = T::one() / T::lit((fr * fc) as f64);
                DVector::from_fn(or * oc, |o, _| {
                    let (br, bc) = (o / oc, o % oc);
                    let mut acc = T::zero();
                    for i in 0..fr {
                        for j in 0..fc {
                            acc += x[(br * fr + i) * grid.cols + bc * fc + j];
                        }
                    }
                    acc * inv
                })
            }
            LinearOp::CircularBlur { kernel, grid } => convolve(kernel, *grid, x, false),
        })
    }

    /// `A^T r`.
    pub fn transpose_apply(&self, r: &DVector<T>) -> Result<DVector<T>> {
        check_dim(self.output_dim(), r.len())?;
        Ok(match self {
            LinearOp::Dense(m) => m.tr_mul(r),
            LinearOp::Select { keep, dim } => {
                let mut out = DVector::zeros(*dim);
                for (k, &i) in keep.iter().enumerate() {
                    out[i] += r[k];
                }
                out
            }
            LinearOp::Inpaint { keep, dim } => {
                let mut out = DVector::zeros(*dim);
                for &i in keep {
                    out[i] = r[i];
                }
                out
            }
            LinearOp::Downsample { factor, grid } => {
                let (fr, fc) = block_shape(*factor, *grid);
                let oc = grid.cols / fc;
                let inv = T::one() / T::lit((fr * fc) as f64);
                DVector::from_fn(grid.len(), |p, _| {
                    let (row, col) = (p / grid.cols, p % grid.cols);
                    r[(row / fr) * oc + col / fc] * inv
                })
            }
            LinearOp::CircularBlur { kernel, grid } => convolve(kernel, *grid, r, true),
        })
    }

    /// Materializes `A` column by column.
    pub fn matrix(&self) -> DMatrix<T> {
        if let LinearOp::Dense(m) = self {
            return m.clone();
        }
        let (m, n) = (self.output_dim(), self.input_dim());
        let mut out = DMatrix::zeros(m, n);
        let mut e = DVector::zeros(n);
        for j in 0..n {
            e[j] = T::one();
            out.set_column(j, &self.apply(&e).expect("dimension checked"));
            e[j] = T::zero();
        }
        out
    }
}

fn validate_keep(keep: &[usize], dim: usize) -> Result<()> {
    let mut seen = vec![false; dim];
    for &i in keep {
        if i >= dim {
            return Err(Error::Argument(format!(
                "mask index {i} out of range for dimension {dim}"
            )));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::Argument(format!("mask index {i} repeated")));
        }
    }
    Ok(())
}

fn block_shape(factor: usize, grid: Grid) -> (usize, usize) {
    let fr = if grid.rows == 1 { 1 } else { factor };
    let fc = if grid.cols == 1 { 1 } else { factor };
    (fr, fc)
}

fn convolve<T: Real>(
    kernel: &DMatrix<T>,
    grid: Grid,
    x: &DVector<T>,
    transpose: bool,
) -> DVector<T> {
    let (kr, kc) = (kernel.nrows() as isize, kernel.ncols() as isize);
    let (hr, hc) = (kr / 2, kc / 2);
    let (rows, cols) = (grid.rows as isize, grid.cols as isize);
    DVector::from_fn(grid.len(), |p, _| {
        let (r, c) = (p as isize / cols, p as isize % cols);
        let mut acc = T::zero();
        for i in 0..kr {
            for j in 0..kc {
                let (sr, sc) = if transpose {
                    (r - (i - hr), c - (j - hc))
                } else {
                    (r + (i - hr), c + (j - hc))
                };
                let idx = sr.rem_euclid(rows) * cols + sc.rem_euclid(cols);
                acc += kernel[(i as usize, j as usize)] * x[idx as usize];
            }
        }
        acc
    })
}

/// Differentiable forward map with an analytic Jacobian.
pub trait ForwardModel<T: Real>: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn apply(&self, x: &DVector<T>) -> DVector<T>;
    fn jacobian(&self, x: &DVector<T>) -> DMatrix<T>;

    /// `J(x)^T r`. The default materializes the Jacobian.
    fn vjp(&self, x: &DVector<T>, r: &DVector<T>) -> DVector<T> {
        self.jacobian(x).tr_mul(r)
    }
}

/// `f(x) = A x + c (B x) .* (B x)`: a smooth nonlinear map whose Jacobian
/// `A + 2c diag(B x) B` is available in closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticMap<T: Real> {
    pub linear: DMatrix<T>,
    pub mixing: DMatrix<T>,
    pub strength: T,
}

impl<T: Real> QuadraticMap<T> {
    pub fn new(linear: DMatrix<T>, mixing: DMatrix<T>, strength: T) -> Result<Self> {
        check_dim(linear.nrows(), mixing.nrows())?;
        check_dim(linear.ncols(), mixing.ncols())?;
        Ok(Self {
            linear,
            mixing,
            strength,
        })
    }

    /// Gaussian random `A`, `B` with entries scaled by `1/sqrt(dim)`.
    pub fn random<R: Rng + ?Sized>(out_dim: usize, dim: usize, strength: T, rng: &mut R) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        let mut draw = |_, _| T::lit(rng.sample::<f64, _>(StandardNormal) * scale);
        let linear = DMatrix::from_fn(out_dim, dim, &mut draw);
        let mixing = DMatrix::from_fn(out_dim, dim, &mut draw);
        Self {
            linear,
            mixing,
            strength,
        }
    }
}

impl<T: Real> ForwardModel<T> for QuadraticMap<T> {
    fn input_dim(&self) -> usize {
        self.linear.ncols()
    }

    fn output_dim(&self) -> usize {
        self.linear.nrows()
    }

    fn apply(&self, x: &DVector<T>) -> DVector<T> {
        let bx = &self.mixing * x;
        &self.linear * x + bx.component_mul(&bx) * self.strength
    }

    fn jacobian(&self, x: &DVector<T>) -> DMatrix<T> {
        let bx = &self.mixing * x;
        let mut j = self.mixing.clone();
        for (i, mut row) in j.row_iter_mut().enumerate() {
            row *= T::lit(2.0) * self.strength * bx[i];
        }
        j + &self.linear
    }

    fn vjp(&self, x: &DVector<T>, r: &DVector<T>) -> DVector<T> {
        let bx = &self.mixing * x;
        let weighted = bx.component_mul(r) * (T::lit(2.0) * self.strength);
        self.linear.tr_mul(r) + self.mixing.tr_mul(&weighted)
    }
}

/// A measurement operator: linear (with exact transpose) or nonlinear.
#[derive(Clone)]
pub enum Operator<T: Real> {
    Linear(LinearOp<T>),
    Nonlinear(Arc<dyn ForwardModel<T>>),
}

impl<T: Real> fmt::Debug for Operator<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operator::Linear(op) => f.debug_tuple("Linear").field(op).finish(),
            Operator::Nonlinear(op) => {
                write!(f, "Nonlinear({} -> {})", op.input_dim(), op.output_dim())
            }
        }
    }
}

impl<T: Real> From<LinearOp<T>> for Operator<T> {
    fn from(op: LinearOp<T>) -> Self {
        Operator::Linear(op)
    }
}

impl<T: Real> Operator<T> {
    pub fn nonlinear(model: impl ForwardModel<T> + 'static) -> Self {
        Operator::Nonlinear(Arc::new(model))
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Operator::Linear(op) => op.input_dim(),
            Operator::Nonlinear(op) => op.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Operator::Linear(op) => op.output_dim(),
            Operator::Nonlinear(op) => op.output_dim(),
        }
    }

    pub fn as_linear(&self) -> Option<&LinearOp<T>> {
        match self {
            Operator::Linear(op) => Some(op),
            Operator::Nonlinear(_) => None,
        }
    }

    pub fn apply(&self, x: &DVector<T>) -> Result<DVector<T>> {
        match self {
            Operator::Linear(op) => op.apply(x),
            Operator::Nonlinear(op) => {
                check_dim(op.input_dim(), x.len())?;
                Ok(op.apply(x))
            }
        }
    }

    /// Jacobian at `x`; constant for linear operators.
    pub fn jacobian(&self, x: &DVector<T>) -> Result<DMatrix<T>> {
        check_dim(self.input_dim(), x.len())?;
        Ok(match self {
            Operator::Linear(op) => op.matrix(),
            Operator::Nonlinear(op) => op.jacobian(x),
        })
    }

    /// `J(x)^T r`.
    pub fn vjp(&self, x: &DVector<T>, r: &DVector<T>) -> Result<DVector<T>> {
        check_dim(self.input_dim(), x.len())?;
        check_dim(self.output_dim(), r.len())?;
        match self {
            Operator::Linear(op) => op.transpose_apply(r),
            Operator::Nonlinear(op) => Ok(op.vjp(x, r)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    #[test]
    fn mask_select_and_scatter() {
        let op = LinearOp::select(vec![0], 2).unwrap();
        assert_eq!(op.apply(&v(&[0.7, -0.2])).unwrap(), v(&[0.7]));
        assert_eq!(op.transpose_apply(&v(&[0.7])).unwrap(), v(&[0.7, 0.0]));
        assert!(LinearOp::<f64>::select(vec![0, 0], 2).is_err());
        assert!(LinearOp::<f64>::select(vec![2], 2).is_err());
    }

    #[test]
    fn mask_rows_are_distinct_basis_vectors() {
        let op = LinearOp::<f64>::select(vec![3, 0, 2], 5).unwrap();
        let a = op.matrix();
        for (r, &k) in [3usize, 0, 2].iter().enumerate() {
            for c in 0..5 {
                assert_eq!(a[(r, c)], if c == k { 1.0 } else { 0.0 });
            }
        }
        // A A^T = I on observed coordinates; A^T A is the projector onto them.
        let aat = &a * a.transpose();
        assert_eq!(aat, DMatrix::identity(3, 3));
        let ata = a.transpose() * &a;
        assert_eq!(ata, DMatrix::from_diagonal(&v(&[1.0, 0.0, 1.0, 1.0, 0.0])));
    }

    #[test]
    fn downsample_block_means() {
        let op = LinearOp::downsample(2, Grid::line(4)).unwrap();
        assert_eq!(op.apply(&v(&[1.0, 3.0, 5.0, 7.0])).unwrap(), v(&[2.0, 6.0]));
        assert_eq!(
            op.transpose_apply(&v(&[2.0, 6.0])).unwrap(),
            v(&[1.0, 1.0, 3.0, 3.0])
        );
        let op2 = LinearOp::<f64>::downsample(2, Grid::new(4, 4)).unwrap();
        assert_eq!(op2.output_dim(), 4);
        assert!(LinearOp::<f64>::downsample(3, Grid::new(4, 4)).is_err());
    }

    #[test]
    fn identity_kernel_blur_is_identity() {
        let grid = Grid::new(3, 4);
        let op = LinearOp::gaussian_blur(1, 2.0, grid).unwrap();
        let x = DVector::from_fn(12, |i, _| i as f64 * 0.3 - 1.0);
        assert_eq!(op.apply(&x).unwrap(), x);
        let op0 = LinearOp::gaussian_blur(5, 0.0, grid).unwrap();
        assert_eq!(op0.apply(&x).unwrap(), x);
    }

    #[test]
    fn blur_preserves_constants_and_wraps() {
        let grid = Grid::new(4, 4);
        let op = LinearOp::gaussian_blur(61, 3.0, grid).unwrap();
        let ones = DVector::from_element(16, 1.0);
        assert!((op.apply(&ones).unwrap() - &ones).amax() < 1e-12);
        assert!((op.transpose_apply(&ones).unwrap() - &ones).amax() < 1e-12);
    }

    #[test]
    fn quadratic_map_jacobian_at_zero_is_linear_part() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = QuadraticMap::<f64>::random(3, 4, 0.5, &mut rng);
        let op = Operator::nonlinear(q.clone());
        assert_eq!(op.jacobian(&DVector::zeros(4)).unwrap(), q.linear);
    }

    #[test]
    fn linear_jacobian_is_constant() {
        let op: Operator<f64> = LinearOp::downsample(2, Grid::new(4, 4)).unwrap().into();
        let j1 = op.jacobian(&DVector::zeros(16)).unwrap();
        let j2 = op.jacobian(&DVector::from_element(16, 3.0)).unwrap();
        assert_eq!(j1, j2);
    }

    #[test]
    fn quadratic_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = QuadraticMap::<f64>::random(5, 6, 0.3, &mut rng);
        for probe in 0..20 {
            let x = DVector::from_fn(6, |i, _| ((i + probe) as f64 * 0.37).sin());
            let j = q.jacobian(&x);
            let h = 1e-5;
            let mut fd = DMatrix::zeros(5, 6);
            for c in 0..6 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[c] += h;
                xm[c] -= h;
                fd.set_column(c, &((q.apply(&xp) - q.apply(&xm)) / (2.0 * h)));
            }
            assert!((&j - &fd).norm() / j.norm() < 1e-6);
            let r = DVector::from_fn(5, |i, _| (i as f64 + 0.5).cos());
            assert!((q.vjp(&x, &r) - j.tr_mul(&r)).norm() < 1e-12);
        }
    }

    fn all_linear_ops() -> Vec<LinearOp<f64>> {
        vec![
            LinearOp::Dense(DMatrix::from_fn(3, 6, |i, j| ((i * 7 + j) as f64).sin())),
            LinearOp::select(vec![5, 1, 2], 6).unwrap(),
            LinearOp::inpaint(vec![0, 4], 6).unwrap(),
            LinearOp::downsample(2, Grid::line(6)).unwrap(),
            LinearOp::gaussian_blur(3, 0.8, Grid::new(2, 3)).unwrap(),
            LinearOp::gaussian_blur(5, 1.5, Grid::line(6)).unwrap(),
        ]
    }

    proptest! {
        #[test]
        fn adjoint_identity(xs in proptest::collection::vec(-5.0f64..5.0, 6), rs in proptest::collection::vec(-5.0f64..5.0, 6)) {
            let x = DVector::from_vec(xs);
            for op in all_linear_ops() {
                let r = DVector::from_iterator(op.output_dim(), rs.iter().copied().cycle().take(op.output_dim()));
                let lhs = op.apply(&x).unwrap().dot(&r);
                let rhs = x.dot(&op.transpose_apply(&r).unwrap());
                let scale = lhs.abs().max(rhs.abs()).max(1.0);
                prop_assert!((lhs - rhs).abs() / scale < 1e-12);
                prop_assert!((op.matrix().tr_mul(&r) - op.transpose_apply(&r).unwrap()).norm() < 1e-12);
            }
        }
    }
}
