use crate::error::{Error, Result};

/// `ln(n!)`. Exact products up to 20!, log-gamma beyond.
pub fn log_factorial(n: u64) -> f64 {
    if n <= 20 {
        let f: u64 = (1..=n).product();
        (f as f64).ln()
    } else {
        statrs::function::gamma::ln_gamma(n as f64 + 1.0)
    }
}

/// Poisson probability mass `λ^k e^{-λ} / k!`.
pub fn poisson_pmf(k: u64, lambda: f64) -> Result<f64> {
    check_rate(lambda)?;
    Ok(log_pmf(k, lambda).exp())
}

#[inline]
fn log_pmf(k: u64, lambda: f64) -> f64 {
    k as f64 * lambda.ln() - lambda - log_factorial(k)
}

fn check_rate(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::domain(format!(
            "Poisson rate must be positive and finite, got {lambda}"
        )));
    }
    Ok(())
}

/// `P(Z ≤ k)` for `Z ~ Poisson(λ)`.
pub fn poisson_cdf(k: u64, lambda: f64) -> Result<f64> {
    check_rate(lambda)?;
    let mut total = 0.0;
    for j in 0..=k {
        let term = log_pmf(j, lambda).exp();
        total += term;
        // past the mode the tail is geometric; stop once it cannot move the sum
        if j as f64 > lambda && term < total * 1e-18 {
            break;
        }
    }
    Ok(total.min(1.0))
}

/// Smallest `k` with `poisson_cdf(k, λ_max) ≥ p`.
pub fn poisson_icdf_count(lambda_max: f64, p: f64) -> Result<u64> {
    check_rate(lambda_max)?;
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain(format!(
            "target probability must lie in (0, 1), got {p}"
        )));
    }
    let mut total = 0.0;
    let mut k = 0u64;
    loop {
        total += log_pmf(k, lambda_max).exp();
        if total >= p {
            return Ok(k);
        }
        // float round-off can stall the sum just below p for p very close to 1
        if k as f64 > lambda_max + 50.0 * lambda_max.sqrt() + 50.0 {
            return Ok(k);
        }
        k += 1;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Sigmoid-weighted linear unit `x · σ(x)`.
#[inline]
pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn swish_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_factorial_values() {
        assert_eq!(log_factorial(0), 0.0);
        assert_eq!(log_factorial(1), 0.0);
        assert!((log_factorial(5) - 120f64.ln()).abs() < 1e-12);
        let direct: f64 = (1..=20).map(|i| (i as f64).ln()).sum();
        assert!((log_factorial(20) - direct).abs() / direct < 1e-12);
        // continuity across the table / log-gamma switch
        let d21: f64 = (1..=21).map(|i| (i as f64).ln()).sum();
        assert!((log_factorial(21) - d21).abs() / d21 < 1e-12);
        let d100: f64 = (1..=100).map(|i| (i as f64).ln()).sum();
        assert!((log_factorial(100) - d100).abs() / d100 < 1e-12);
    }

    #[test]
    fn cdf_hand_values() {
        assert!((poisson_cdf(0, 1.0).unwrap() - (-1f64).exp()).abs() < 1e-12);
        let expect = (-1f64).exp() * 2.5;
        assert!((poisson_cdf(2, 1.0).unwrap() - expect).abs() < 1e-12);
        assert!((poisson_cdf(10_000, 3.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cdf_domain_error() {
        assert!(poisson_cdf(3, 0.0).is_err());
        assert!(poisson_cdf(3, -1.0).is_err());
    }

    #[test]
    fn cdf_increments_are_pmf() {
        for &lambda in &[0.3, 1.0, 4.0, 17.5] {
            for k in 1..40u64 {
                let d = poisson_cdf(k, lambda).unwrap() - poisson_cdf(k - 1, lambda).unwrap();
                let pmf = (k as f64 * f64::ln(lambda) - lambda - log_factorial(k)).exp();
                assert!((d - pmf).abs() < 1e-12, "λ={lambda} k={k}");
            }
        }
    }

    #[test]
    fn icdf_small_rate() {
        assert_eq!(poisson_icdf_count(0.01, 0.5).unwrap(), 0);
    }

    #[test]
    fn icdf_matches_linear_scan() {
        for &lambda in &[0.2, 1.0, 4.0, 16.0, 60.0] {
            let p = 0.99999;
            let mut k = 0;
            while poisson_cdf(k, lambda).unwrap() < p {
                k += 1;
            }
            assert_eq!(poisson_icdf_count(lambda, p).unwrap(), k, "λ={lambda}");
        }
        assert!(
            poisson_icdf_count(4.0, 0.99999).unwrap() >= poisson_icdf_count(1.0, 0.99999).unwrap()
        );
    }

    #[test]
    fn icdf_domain_errors() {
        assert!(poisson_icdf_count(0.0, 0.5).is_err());
        assert!(poisson_icdf_count(1.0, 1.0).is_err());
        assert!(poisson_icdf_count(1.0, 0.0).is_err());
    }

    #[test]
    fn swish_grad_matches_finite_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (swish(x + h) - swish(x - h)) / (2.0 * h);
            assert!((fd - swish_grad(x)).abs() < 1e-8);
        }
    }
}
