//! Gaussian and Laplace posteriors with location-scale reparameterization.

use crate::error::{Error, Result};
use crate::numkit::{Matrix, RngStream};

/// Diagonal Gaussian, parameterized by mean and log standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mean: Matrix,
    pub log_std: Matrix,
}

impl GaussianParams {
    pub fn new(mean: Matrix, log_std: Matrix) -> Result<Self> {
        mean.same_shape("GaussianParams", &log_std)?;
        Ok(Self { mean, log_std })
    }

    pub fn std(&self) -> Matrix {
        self.log_std.map(f64::exp)
    }

    pub fn variance(&self) -> Matrix {
        self.log_std.map(|l| (2.0 * l).exp())
    }
}

/// Factorized Laplace, parameterized by location and log scale.
#[derive(Clone, Debug, PartialEq)]
pub struct LaplaceParams {
    pub loc: Matrix,
    pub log_scale: Matrix,
}

impl LaplaceParams {
    pub fn new(loc: Matrix, log_scale: Matrix) -> Result<Self> {
        loc.same_shape("LaplaceParams", &log_scale)?;
        Ok(Self { loc, log_scale })
    }

    /// From an explicit scale; rejects `b ≤ 0`.
    pub fn from_scale(loc: Matrix, scale: Matrix) -> Result<Self> {
        if let Some(b) = scale.as_slice().iter().find(|b| !(**b > 0.0)) {
            return Err(Error::domain(format!(
                "Laplace scale must be positive, got {b}"
            )));
        }
        Self::new(loc, scale.map(f64::ln))
    }

    pub fn scale(&self) -> Matrix {
        self.log_scale.map(f64::exp)
    }

    /// `Var = 2b²`.
    pub fn variance(&self) -> Matrix {
        self.log_scale.map(|l| 2.0 * (2.0 * l).exp())
    }
}

/// A location-scale sample `z = loc + scale · ε` together with the
/// standardized noise `ε`, which is what the pathwise derivative needs:
/// `∂z/∂loc = 1`, `∂z/∂log scale = scale · ε`.
#[derive(Clone, Debug)]
pub struct LocationScaleSample {
    pub z: Matrix,
    pub noise: Matrix,
}

pub fn gaussian_rsample(params: &GaussianParams, rng: &mut RngStream) -> LocationScaleSample {
    let noise = Matrix::from_fn(params.mean.rows(), params.mean.cols(), |_, _| rng.normal());
    let z = Matrix::from_fn(params.mean.rows(), params.mean.cols(), |i, j| {
        params.mean.get(i, j) + params.log_std.get(i, j).exp() * noise.get(i, j)
    });
    LocationScaleSample { z, noise }
}

/// `z = μ - b · sign(u) · ln(1 - 2|u|)` with `u ~ U(-½, ½)`.
pub fn laplace_rsample(params: &LaplaceParams, rng: &mut RngStream) -> LocationScaleSample {
    let noise = Matrix::from_fn(params.loc.rows(), params.loc.cols(), |_, _| {
        let u = rng.uniform() - 0.5;
        // u = -0.5 has probability 2^-53 and would give an infinite draw
        let a = (2.0 * u.abs()).min(1.0 - f64::EPSILON);
        -u.signum() * (-a).ln_1p()
    });
    let z = Matrix::from_fn(params.loc.rows(), params.loc.cols(), |i, j| {
        params.loc.get(i, j) + params.log_scale.get(i, j).exp() * noise.get(i, j)
    });
    LocationScaleSample { z, noise }
}
