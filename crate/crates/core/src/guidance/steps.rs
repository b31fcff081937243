//! Stateless pieces of the guided updates.

use nalgebra::DVector;
use rand::Rng;

use crate::error::Result;
use crate::gmm::MeasurementModel;
use crate::linalg::standard_normal;
use crate::scalar::Real;

/// Distances below this count as "at the center".
pub const CENTER_FLOOR: f64 = 1e-12;

/// `mu + radius * (x - mu) / ||x - mu||`. When `x` sits on `mu` a random
/// direction from `rng` is used instead.
pub fn spherical_project<T: Real, R: Rng + ?Sized>(
    x: &DVector<T>,
    mu: &DVector<T>,
    radius: T,
    rng: &mut R,
) -> DVector<T> {
    let diff = x - mu;
    let n = diff.norm();
    let dir = if n < T::lit(CENTER_FLOOR) {
        let z: DVector<T> = standard_normal(x.len(), rng);
        let zn = z.norm();
        z / zn
    } else {
        diff / n
    };
    mu + dir * radius
}

/// Radius `sqrt(d) * sigma` of the transition shell.
pub fn shell_radius<T: Real>(dim: usize, sigma: T) -> T {
    T::lit(dim as f64).sqrt() * sigma
}

/// DSG update. `eps` is the ancestral noise `sigma * z` already drawn by the
/// solver; `grad` is the measurement gradient at `x_t`.
///
/// `u* = -sqrt(d) sigma grad / ||grad||`, `u = eps + mix (u* - eps)`,
/// result `mu + sqrt(d) sigma u / ||u||`.
pub fn dsg_update<T: Real, R: Rng + ?Sized>(
    mean: &DVector<T>,
    sigma: T,
    eps: &DVector<T>,
    grad: &DVector<T>,
    mix: T,
    rng: &mut R,
) -> DVector<T> {
    let radius = shell_radius(mean.len(), sigma);
    if radius == T::zero() {
        return mean.clone();
    }
    let gn = grad.norm();
    let u = if gn == T::zero() {
        eps.clone()
    } else {
        let star = grad * (-radius / gn);
        if mix == T::one() {
            star
        } else {
            eps + (star - eps) * mix
        }
    };
    spherical_project(&(mean + u), mean, radius, rng)
}

/// `x*`: `steps` gradient-descent iterations on `0.5 ||f(x) - y||^2` from `init`.
pub fn least_squares_descent<T: Real>(
    meas: &MeasurementModel<T>,
    init: &DVector<T>,
    lr: T,
    steps: usize,
) -> Result<DVector<T>> {
    let mut x = init.clone();
    for _ in 0..steps {
        let r = meas.residual(&x)?;
        let g = meas.operator().vjp(&x, &r)?;
        x -= g * lr;
    }
    Ok(x)
}

/// Stochastic resampling: `(eta a_prev x0_hat + s2 x*) / (eta + s2)` plus
/// Gaussian noise of variance `eta s2 / (eta + s2)`, `s2` the marginal
/// noise variance at `t`.
pub fn resample_update<T: Real, R: Rng + ?Sized>(
    x0_hat: &DVector<T>,
    x_star: &DVector<T>,
    a_prev: T,
    marginal_var: T,
    eta: T,
    rng: &mut R,
) -> DVector<T> {
    let z: DVector<T> = standard_normal(x0_hat.len(), rng);
    if !eta.is_finite() {
        return x0_hat * a_prev + z * marginal_var.sqrt();
    }
    let denom = eta + marginal_var;
    if denom == T::zero() {
        return x_star.clone();
    }
    let mean = (x0_hat * (eta * a_prev) + x_star * marginal_var) / denom;
    let var = eta * marginal_var / denom;
    mean + z * var.sqrt()
}
