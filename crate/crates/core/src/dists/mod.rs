//! Distribution layer: exact and relaxed Poisson sampling, Gaussian and
//! Laplace reparameterization, and closed-form KL divergences.

mod continuous;
mod kl;
mod poisson;

pub use continuous::{
    gaussian_rsample, laplace_rsample, GaussianParams, LaplaceParams, LocationScaleSample,
};
pub use kl::{kl_gaussian_std, kl_laplace_std, kl_poisson, kl_poisson_quadratic, poisson_residual};
pub use poisson::{
    adaptive_n_exp, poisson_rsample, poisson_rsample_grad, poisson_sample_hard,
    poisson_sample_with_grad, RelaxedPoissonSample, N_EXP_COVERAGE,
};

#[cfg(test)]
mod tests {
    //! Monte-Carlo checks of the closed-form divergences: the mean of
    //! `log q(z) - log p(z)` over posterior draws must match within three
    //! standard errors.
    use super::*;
    use crate::numkit::{log_factorial, Matrix, RngStream};

    const N: usize = 1_000_000;

    fn mean_and_se(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (var / n).sqrt())
    }

    #[test]
    fn poisson_kl_matches_monte_carlo() {
        for &(r, dr) in &[(2.0, 0.3), (0.5, 4.0), (1.0, 1.7)] {
            let lambda = Matrix::filled(N, 1, r * dr);
            let mut rng = RngStream::new(21, 0);
            let n_exp = adaptive_n_exp(r * dr).unwrap();
            let z = poisson_sample_hard(&lambda, n_exp, &mut rng).unwrap();
            let log_ratio: Vec<f64> = z
                .as_slice()
                .iter()
                .map(|&k| {
                    let lq = k * (r * dr).ln() - r * dr - log_factorial(k as u64);
                    let lp = k * r.ln() - r - log_factorial(k as u64);
                    lq - lp
                })
                .collect();
            let (m, se) = mean_and_se(&log_ratio);
            let exact = kl_poisson(&[r], &Matrix::filled(1, 1, dr))
                .unwrap()
                .get(0, 0);
            assert!(
                (m - exact).abs() < 3.0 * se,
                "r={r} δr={dr}: mc {m} ± {se}, exact {exact}"
            );
        }
    }

    #[test]
    fn gaussian_kl_matches_monte_carlo() {
        let (mu, sigma): (f64, f64) = (0.8, 0.6);
        let params =
            GaussianParams::new(Matrix::filled(N, 1, mu), Matrix::filled(N, 1, sigma.ln()))
                .unwrap();
        let mut rng = RngStream::new(22, 0);
        let s = gaussian_rsample(&params, &mut rng);
        let log_ratio: Vec<f64> =
            s.z.as_slice()
                .iter()
                .map(|&z| {
                    let lq = -0.5 * ((z - mu) / sigma).powi(2) - sigma.ln();
                    let lp = -0.5 * z * z;
                    lq - lp
                })
                .collect();
        let (m, se) = mean_and_se(&log_ratio);
        let exact = kl_gaussian_std(
            &GaussianParams::new(Matrix::filled(1, 1, mu), Matrix::filled(1, 1, sigma.ln()))
                .unwrap(),
        )
        .get(0, 0);
        assert!((m - exact).abs() < 3.0 * se, "mc {m} ± {se}, exact {exact}");
    }

    #[test]
    fn laplace_kl_matches_monte_carlo() {
        for &(mu, b) in &[(1.0f64, 1.0f64), (-0.4, 0.3), (2.0, 1.8)] {
            let params =
                LaplaceParams::new(Matrix::filled(N, 1, mu), Matrix::filled(N, 1, b.ln())).unwrap();
            let mut rng = RngStream::new(23, 0);
            let s = laplace_rsample(&params, &mut rng);
            let log_ratio: Vec<f64> =
                s.z.as_slice()
                    .iter()
                    .map(|&z| (-(z - mu).abs() / b - b.ln()) - (-z.abs()))
                    .collect();
            let (m, se) = mean_and_se(&log_ratio);
            let exact = kl_laplace_std(
                &LaplaceParams::new(Matrix::filled(1, 1, mu), Matrix::filled(1, 1, b.ln()))
                    .unwrap(),
            )
            .get(0, 0);
            assert!(
                (m - exact).abs() < 3.0 * se,
                "μ={mu} b={b}: mc {m} ± {se}, exact {exact}"
            );
        }
    }
}
