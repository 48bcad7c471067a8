//! Poisson sampling by counting unit-window arrivals of an exponential
//! process, with a sigmoid-relaxed count for pathwise gradients.

use crate::error::{Error, Result};
use crate::numkit::{counter_uniform, poisson_icdf_count, sigmoid, Matrix, RngStream};

/// Coverage target for choosing the number of exponential draws.
pub const N_EXP_COVERAGE: f64 = 0.99999;

/// Sigmoid arguments beyond this magnitude contribute < 5e-18 and are skipped.
const SATURATION: f64 = 40.0;

/// Number of exponential draws for a batch whose largest rate is `lambda_max`:
/// the inverse Poisson CDF at [`N_EXP_COVERAGE`], plus one.
pub fn adaptive_n_exp(lambda_max: f64) -> Result<usize> {
    Ok(poisson_icdf_count(lambda_max, N_EXP_COVERAGE)? as usize + 1)
}

/// Output of [`poisson_rsample`].
#[derive(Clone, Debug)]
pub struct RelaxedPoissonSample {
    counts: Matrix,
    /// Arrival times laid out as `[draw][row][col]`.
    arrival_times: Option<Vec<f64>>,
    n_exp: usize,
    temperature: f64,
}

impl RelaxedPoissonSample {
    pub fn counts(&self) -> &Matrix {
        &self.counts
    }

    pub fn into_counts(self) -> Matrix {
        self.counts
    }

    pub fn n_exp(&self) -> usize {
        self.n_exp
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Cached arrival times, `n_exp × B × K` in draw-major order.
    pub fn arrival_times(&self) -> Option<&[f64]> {
        self.arrival_times.as_deref()
    }

    /// Inter-event times recovered from the cached arrival times.
    pub fn inter_event_times(&self) -> Option<Vec<f64>> {
        let times = self.arrival_times.as_ref()?;
        let plane = self.counts.len();
        let mut dt = times.clone();
        for j in (1..self.n_exp).rev() {
            for e in 0..plane {
                dt[j * plane + e] -= times[(j - 1) * plane + e];
            }
        }
        Some(dt)
    }

    /// Releases the arrival-time cache.
    pub fn drop_cache(&mut self) {
        self.arrival_times = None;
    }
}

fn check_rates(lambda: &Matrix) -> Result<()> {
    if let Some(bad) = lambda
        .as_slice()
        .iter()
        .find(|v| !(**v > 0.0 && v.is_finite()))
    {
        return Err(Error::domain(format!(
            "Poisson rates must be positive and finite, found {bad}"
        )));
    }
    Ok(())
}

fn check_args(lambda: &Matrix, n_exp: usize, temperature: f64) -> Result<()> {
    check_rates(lambda)?;
    if n_exp == 0 {
        return Err(Error::domain("n_exp must be at least 1"));
    }
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::domain(format!(
            "temperature must be nonnegative, got {temperature}"
        )));
    }
    Ok(())
}

/// Standard exponential draw `j` of element `e`.
#[inline]
fn unit_exponential(key: u64, e: usize, j: usize) -> f64 {
    -(-counter_uniform(key, e as u64, j as u64)).ln_1p()
}

/// Soft (or, at temperature 0, hard) indicator that an arrival at `time`
/// falls inside the unit window.
#[inline]
fn indicator(time: f64, temperature: f64) -> f64 {
    if temperature == 0.0 {
        if time <= 1.0 {
            1.0
        } else {
            0.0
        }
    } else {
        sigmoid((1.0 - time) / temperature)
    }
}

/// Reparameterized Poisson sample.
///
/// Inter-event times are `Δt = -ln(1-u)/λ` with uniforms taken from a
/// counter-based generator keyed once per call, so the same stream yields the
/// same uniforms for any `λ` (common random numbers). Arrival times are the
/// prefix sums over the `n_exp` draws; the count sums
/// `sigmoid((1 - time)/T)` over draws, or `1[time ≤ 1]` at `T = 0`.
/// The arrival times are cached for [`poisson_rsample_grad`].
pub fn poisson_rsample(
    lambda: &Matrix,
    n_exp: usize,
    temperature: f64,
    rng: &mut RngStream,
) -> Result<RelaxedPoissonSample> {
    check_args(lambda, n_exp, temperature)?;
    let key = rng.counter_key();
    let plane = lambda.len();
    let mut times = vec![0.0; n_exp * plane];
    let mut counts = Matrix::zeros(lambda.rows(), lambda.cols());
    for (e, (&rate, z)) in lambda
        .as_slice()
        .iter()
        .zip(counts.as_mut_slice())
        .enumerate()
    {
        let mut acc = 0.0;
        for j in 0..n_exp {
            acc += unit_exponential(key, e, j);
            let t = acc / rate;
            times[j * plane + e] = t;
            *z += indicator(t, temperature);
        }
    }
    Ok(RelaxedPoissonSample {
        counts,
        arrival_times: Some(times),
        n_exp,
        temperature,
    })
}

/// Pathwise derivative `∂z/∂λ` of a relaxed sample.
///
/// With arrival times `S_j = E_j/λ`, `∂S_j/∂λ = -S_j/λ`, hence
/// `∂z/∂λ = Σ_j σ'((1 - S_j)/T) · S_j/(T λ)`.
pub fn poisson_rsample_grad(sample: &RelaxedPoissonSample, lambda: &Matrix) -> Result<Matrix> {
    if sample.temperature == 0.0 {
        return Err(Error::Unsupported(
            "temperature-0 samples have no pathwise gradient".into(),
        ));
    }
    let times = sample
        .arrival_times
        .as_ref()
        .ok_or_else(|| Error::State("sample has no arrival-time cache".into()))?;
    sample.counts.same_shape("poisson_rsample_grad", lambda)?;
    let t = sample.temperature;
    let plane = lambda.len();
    let mut grad = Matrix::zeros(lambda.rows(), lambda.cols());
    for (e, (&rate, g)) in lambda
        .as_slice()
        .iter()
        .zip(grad.as_mut_slice())
        .enumerate()
    {
        for j in 0..sample.n_exp {
            let s = times[j * plane + e];
            let a = (1.0 - s) / t;
            if a.abs() < SATURATION {
                let sg = sigmoid(a);
                *g += sg * (1.0 - sg) * s / (t * rate);
            }
        }
    }
    Ok(grad)
}

/// Sample and pathwise derivative in one pass, without the arrival-time cache.
///
/// The forward count uses `forward_temperature` (0 gives integer counts) and
/// the derivative uses `backward_temperature > 0`; equal temperatures give
/// the relaxed estimator, a zero forward temperature gives the hard-forward
/// (surrogate-gradient) variant. Draws match [`poisson_rsample`] for the same
/// stream state.
pub fn poisson_sample_with_grad(
    lambda: &Matrix,
    n_exp: usize,
    forward_temperature: f64,
    backward_temperature: f64,
    rng: &mut RngStream,
) -> Result<(Matrix, Matrix)> {
    check_args(lambda, n_exp, forward_temperature)?;
    if !(backward_temperature > 0.0) {
        return Err(Error::Unsupported(
            "pathwise gradients need a positive backward temperature".into(),
        ));
    }
    let key = rng.counter_key();
    let tf = forward_temperature;
    let tb = backward_temperature;
    let horizon = 1.0 + SATURATION * tf.max(tb);
    let mut counts = Matrix::zeros(lambda.rows(), lambda.cols());
    let mut grad = Matrix::zeros(lambda.rows(), lambda.cols());
    for (e, ((&rate, z), g)) in lambda
        .as_slice()
        .iter()
        .zip(counts.as_mut_slice())
        .zip(grad.as_mut_slice())
        .enumerate()
    {
        let mut acc = 0.0;
        for j in 0..n_exp {
            acc += unit_exponential(key, e, j);
            let s = acc / rate;
            *z += indicator(s, tf);
            let a = (1.0 - s) / tb;
            if a.abs() < SATURATION {
                let sg = sigmoid(a);
                *g += sg * (1.0 - sg) * s / (tb * rate);
            }
            if s > horizon {
                // arrival times only grow; everything after is saturated at 0
                break;
            }
        }
    }
    Ok((counts, grad))
}

/// Integer Poisson counts (temperature 0) without caching.
pub fn poisson_sample_hard(lambda: &Matrix, n_exp: usize, rng: &mut RngStream) -> Result<Matrix> {
    check_args(lambda, n_exp, 0.0)?;
    let key = rng.counter_key();
    let mut counts = Matrix::zeros(lambda.rows(), lambda.cols());
    for (e, (&rate, z)) in lambda
        .as_slice()
        .iter()
        .zip(counts.as_mut_slice())
        .enumerate()
    {
        let mut acc = 0.0;
        for j in 0..n_exp {
            acc += unit_exponential(key, e, j);
            if acc / rate > 1.0 {
                break;
            }
            *z += 1.0;
        }
    }
    Ok(counts)
}
