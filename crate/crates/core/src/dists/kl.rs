//! Closed-form KL divergences against the model priors.

use super::{GaussianParams, LaplaceParams};
use crate::error::{Error, Result};
use crate::numkit::Matrix;

/// `f(y) = 1 - y + y ln y`, with the continuous limit `f(0) = 1`.
#[inline]
pub fn poisson_residual(y: f64) -> f64 {
    if y == 0.0 {
        1.0
    } else {
        1.0 - y + y * y.ln()
    }
}

/// Per-unit `KL(Pois(r ⊙ δr) ‖ Pois(r)) = r · f(δr)`.
///
/// `r` has one entry per column of `delta_rate` and is broadcast over rows.
pub fn kl_poisson(rates: &[f64], delta_rate: &Matrix) -> Result<Matrix> {
    check_broadcast("kl_poisson", rates, delta_rate)?;
    if let Some(r) = rates.iter().find(|r| !(**r > 0.0)) {
        return Err(Error::domain(format!(
            "prior rates must be positive, got {r}"
        )));
    }
    if let Some(y) = delta_rate.as_slice().iter().find(|y| !(**y >= 0.0)) {
        return Err(Error::domain(format!(
            "rate ratios must be nonnegative, got {y}"
        )));
    }
    let k = rates.len();
    let mut out = delta_rate.clone();
    for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
        *v = rates[i % k] * poisson_residual(*v);
    }
    Ok(out)
}

/// Second-order approximation `½ r ε²` of [`kl_poisson`] at `δr = 1 + ε`.
/// Diagnostic only; the training losses use the exact form.
pub fn kl_poisson_quadratic(rates: &[f64], eps: &Matrix) -> Result<Matrix> {
    check_broadcast("kl_poisson_quadratic", rates, eps)?;
    let k = rates.len();
    let mut out = eps.clone();
    for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
        *v = 0.5 * rates[i % k] * *v * *v;
    }
    Ok(out)
}

/// Per-unit `KL(N(μ, σ²) ‖ N(0, 1)) = ½(μ² + σ² - ln σ² - 1)`.
pub fn kl_gaussian_std(params: &GaussianParams) -> Matrix {
    params
        .mean
        .zip_map(&params.log_std, |mu, ls| {
            0.5 * (mu * mu + (2.0 * ls).exp() - 2.0 * ls - 1.0)
        })
        .expect("GaussianParams guarantees equal shapes")
}

/// Per-unit `KL(Laplace(μ, b) ‖ Laplace(0, 1)) = -ln b + b e^{-|μ|/b} + |μ| - 1`.
pub fn kl_laplace_std(params: &LaplaceParams) -> Matrix {
    params
        .loc
        .zip_map(&params.log_scale, |mu, lb| {
            let b = lb.exp();
            -lb + b * (-mu.abs() / b).exp() + mu.abs() - 1.0
        })
        .expect("LaplaceParams guarantees equal shapes")
}

fn check_broadcast(op: &'static str, v: &[f64], m: &Matrix) -> Result<()> {
    if v.len() != m.cols() {
        return Err(Error::Shape {
            op,
            left: (1, v.len()),
            right: m.shape(),
        });
    }
    Ok(())
}
