//! Dense linear algebra, seeded randomness and special functions.

mod matrix;
mod rng;
pub mod special;

pub use matrix::Matrix;
pub use rng::{counter_uniform, RngStream};
pub use special::{log_factorial, poisson_cdf, poisson_icdf_count, poisson_pmf, sigmoid};
