use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Family, LinearVae, LOG_SCALE_FLOOR};
use crate::dists::{
    adaptive_n_exp, gaussian_rsample, laplace_rsample, poisson_sample_hard,
    poisson_sample_with_grad, GaussianParams, LaplaceParams,
};
use crate::error::{Error, Result};
use crate::numkit::{Matrix, RngStream};

/// Rows per work unit. Fixed so results do not depend on the thread count.
const CHUNK_ROWS: usize = 64;

/// Approximate posterior for a batch.
#[derive(Clone, Debug)]
pub enum Posterior {
    /// `λ = r ⊙ δr` with `δr = exp(log_delta)`.
    Poisson {
        log_delta: Matrix,
        rate: Matrix,
    },
    Gaussian(GaussianParams),
    Laplace(LaplaceParams),
}

impl Posterior {
    pub fn mean(&self) -> &Matrix {
        match self {
            Posterior::Poisson { rate, .. } => rate,
            Posterior::Gaussian(p) => &p.mean,
            Posterior::Laplace(p) => &p.loc,
        }
    }

    pub fn variance(&self) -> Matrix {
        match self {
            Posterior::Poisson { rate, .. } => rate.clone(),
            Posterior::Gaussian(p) => p.variance(),
            Posterior::Laplace(p) => p.variance(),
        }
    }

    /// Per-unit KL against the prior.
    fn kl(&self, prior_rates: Option<&[f64]>) -> Matrix {
        match self {
            Posterior::Poisson { log_delta, .. } => {
                let r = prior_rates.expect("Poisson posterior needs prior rates");
                let k = r.len();
                let mut out = log_delta.clone();
                for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
                    let a = *v;
                    let y = a.exp();
                    // r f(e^a) = r (1 - y + y a); avoids ln(exp(a))
                    *v = r[i % k] * (1.0 - y + y * a);
                }
                out
            }
            Posterior::Gaussian(p) => crate::dists::kl_gaussian_std(p),
            Posterior::Laplace(p) => crate::dists::kl_laplace_std(p),
        }
    }
}

/// Batch-averaged loss terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// `recon + β · kl` with the model's β.
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub per_latent_kl: Vec<f64>,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.recon.is_finite() && self.kl.is_finite()
    }

    /// Negative ELBO, i.e. the loss at β = 1.
    pub fn nelbo(&self) -> f64 {
        self.recon + self.kl
    }
}

/// How the reconstruction expectation and its gradient are computed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Estimator {
    /// Closed form for linear decoders.
    Exact,
    /// Reparameterized samples; Poisson latents use the relaxed sampler at
    /// `temperature > 0`. The temperature is ignored for continuous latents.
    MonteCarlo { n_samples: usize, temperature: f64 },
    /// Integer Poisson samples forward, `∂z/∂λ = 1` backward.
    StraightThrough { n_samples: usize },
    /// Integer Poisson samples forward, relaxed derivative at `temperature` backward.
    HardForward { n_samples: usize, temperature: f64 },
}

impl Estimator {
    fn is_stochastic(self) -> bool {
        !matches!(self, Estimator::Exact)
    }
}

/// Parameter gradients in [`LinearVae::tensors`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(model: &LinearVae) -> Self {
        Self {
            tensors: model
                .tensors()
                .iter()
                .map(|(_, t)| Matrix::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.as_slice().iter().copied())
            .collect()
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.frobenius_norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn dot(&self, other: &Gradients) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| {
                a.as_slice()
                    .iter()
                    .zip(b.as_slice())
                    .map(|(x, y)| x * y)
                    .sum::<f64>()
            })
            .sum()
    }

    pub fn cosine(&self, other: &Gradients) -> f64 {
        self.dot(other) / (self.norm() * other.norm())
    }

    pub fn axpy(&mut self, alpha: f64, other: &Gradients) -> Result<()> {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.map_inplace(|v| v * s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }
}

struct ChunkTerms {
    recon: f64,
    kl: f64,
    per_latent_kl: Vec<f64>,
    grads: Option<Vec<Matrix>>,
}

impl LinearVae {
    /// Posterior parameters for a batch.
    pub fn encode(&self, x: &Matrix) -> Result<Posterior> {
        self.check_input(x)?;
        let pass = self.encoder.forward(x)?;
        self.posterior_from_heads(pass.heads)
    }

    fn posterior_from_heads(&self, mut heads: Vec<Matrix>) -> Result<Posterior> {
        match self.spec.family {
            Family::Poisson => {
                let log_delta = heads.pop().unwrap();
                let r = self.prior_rates().unwrap();
                let k = r.len();
                let mut rate = log_delta.map(f64::exp);
                for (i, v) in rate.as_mut_slice().iter_mut().enumerate() {
                    *v *= r[i % k];
                }
                Ok(Posterior::Poisson { log_delta, rate })
            }
            Family::Gaussian => {
                let log_std = heads.pop().unwrap().map(|v| v.max(LOG_SCALE_FLOOR));
                Ok(Posterior::Gaussian(GaussianParams::new(
                    heads.pop().unwrap(),
                    log_std,
                )?))
            }
            Family::Laplace => {
                let log_scale = heads.pop().unwrap().map(|v| v.max(LOG_SCALE_FLOOR));
                Ok(Posterior::Laplace(LaplaceParams::new(
                    heads.pop().unwrap(),
                    log_scale,
                )?))
            }
        }
    }

    /// Closed-form loss.
    pub fn loss_exact(&self, x: &Matrix) -> Result<LossReport> {
        Ok(self
            .evaluate(x, Estimator::Exact, self.beta(), None, false)?
            .0)
    }

    /// Closed-form loss and its gradient.
    pub fn grad_exact(&self, x: &Matrix) -> Result<(LossReport, Gradients)> {
        self.loss_and_grad(x, Estimator::Exact, self.beta(), None)
    }

    /// Loss with the reconstruction term estimated from `n_samples` draws.
    pub fn loss_mc(
        &self,
        x: &Matrix,
        n_samples: usize,
        temperature: f64,
        rng: &mut RngStream,
    ) -> Result<LossReport> {
        let est = Estimator::MonteCarlo {
            n_samples,
            temperature,
        };
        Ok(self.evaluate(x, est, self.beta(), Some(rng), false)?.0)
    }

    /// Monte-Carlo loss with the pathwise gradient.
    pub fn grad_mc(
        &self,
        x: &Matrix,
        n_samples: usize,
        temperature: f64,
        rng: &mut RngStream,
    ) -> Result<(LossReport, Gradients)> {
        let est = Estimator::MonteCarlo {
            n_samples,
            temperature,
        };
        self.loss_and_grad(x, est, self.beta(), Some(rng))
    }

    /// Single-sample loss with integer Poisson samples.
    pub fn loss_st(&self, x: &Matrix, rng: &mut RngStream) -> Result<LossReport> {
        let est = Estimator::StraightThrough { n_samples: 1 };
        Ok(self.evaluate(x, est, self.beta(), Some(rng), false)?.0)
    }

    /// Straight-through loss and gradient.
    pub fn grad_st(&self, x: &Matrix, rng: &mut RngStream) -> Result<(LossReport, Gradients)> {
        self.loss_and_grad(
            x,
            Estimator::StraightThrough { n_samples: 1 },
            self.beta(),
            Some(rng),
        )
    }

    /// Loss and gradient for any estimator with KL weight `kl_weight`
    /// applied to the gradient. The report still uses the model's β.
    pub fn loss_and_grad(
        &self,
        x: &Matrix,
        est: Estimator,
        kl_weight: f64,
        rng: Option<&mut RngStream>,
    ) -> Result<(LossReport, Gradients)> {
        let (report, grads) = self.evaluate(x, est, kl_weight, rng, true)?;
        Ok((report, grads.expect("gradient requested")))
    }

    /// Core evaluation. Rows are processed in fixed-size chunks, possibly
    /// in parallel, and reduced in order.
    pub fn evaluate(
        &self,
        x: &Matrix,
        est: Estimator,
        kl_weight: f64,
        rng: Option<&mut RngStream>,
        with_grad: bool,
    ) -> Result<(LossReport, Option<Gradients>)> {
        self.check_input(x)?;
        self.check_estimator(est)?;
        if x.rows() == 0 {
            return Err(Error::domain("loss of an empty batch"));
        }
        let base = match (est.is_stochastic(), rng) {
            (false, _) => None,
            (true, Some(r)) => {
                let tag = r.counter_key();
                Some(r.derive(&[tag]))
            }
            (true, None) => {
                return Err(Error::State(
                    "sampling estimator needs a random stream".into(),
                ))
            }
        };
        let n = x.rows();
        let scale = 1.0 / n as f64;
        let n_chunks = n.div_ceil(CHUNK_ROWS);
        let run = |c: usize| {
            let lo = c * CHUNK_ROWS;
            let hi = (lo + CHUNK_ROWS).min(n);
            let xc = if n_chunks == 1 {
                x.clone()
            } else {
                x.row_range(lo, hi)
            };
            let rng = base.as_ref().map(|b| b.derive(&[c as u64]));
            self.chunk_terms(&xc, est, kl_weight, scale, rng, with_grad)
        };
        let parts: Vec<ChunkTerms> = if n_chunks == 1 {
            vec![run(0)?]
        } else {
            (0..n_chunks)
                .into_par_iter()
                .map(run)
                .collect::<Result<Vec<_>>>()?
        };

        let k = self.latent_dim();
        let mut recon = 0.0;
        let mut kl = 0.0;
        let mut per_latent_kl = vec![0.0; k];
        let mut grads: Option<Gradients> = None;
        for p in parts {
            recon += p.recon;
            kl += p.kl;
            for (a, b) in per_latent_kl.iter_mut().zip(&p.per_latent_kl) {
                *a += b;
            }
            if let Some(g) = p.grads {
                let g = Gradients { tensors: g };
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => acc.axpy(1.0, &g)?,
                }
            }
        }
        recon *= scale;
        kl *= scale;
        per_latent_kl.iter_mut().for_each(|v| *v *= scale);
        let report = LossReport {
            total: recon + self.beta() * kl,
            recon,
            kl,
            per_latent_kl,
        };
        Ok((report, grads))
    }

    fn check_estimator(&self, est: Estimator) -> Result<()> {
        let poisson = self.spec.family == Family::Poisson;
        match est {
            Estimator::Exact => Ok(()),
            Estimator::MonteCarlo {
                n_samples,
                temperature,
            } => {
                if n_samples == 0 {
                    return Err(Error::config(
                        "Monte-Carlo estimates need at least one sample",
                    ));
                }
                if poisson && !(temperature > 0.0) {
                    return Err(Error::config(format!(
                        "Monte-Carlo gradients for Poisson latents need a positive temperature, got {temperature}"
                    )));
                }
                Ok(())
            }
            Estimator::StraightThrough { n_samples } | Estimator::HardForward { n_samples, .. } => {
                if !poisson {
                    return Err(Error::config(format!(
                        "integer-sample estimators are defined for Poisson latents only, not {}",
                        self.spec.family.name()
                    )));
                }
                if n_samples == 0 {
                    return Err(Error::config("estimator needs at least one sample"));
                }
                if let Estimator::HardForward { temperature, .. } = est {
                    if !(temperature > 0.0) {
                        return Err(Error::config(
                            "hard-forward backward temperature must be positive",
                        ));
                    }
                }
                Ok(())
            }
        }
    }

    /// Sums (not means) of the loss terms over the chunk; gradients are
    /// already multiplied by `scale`.
    fn chunk_terms(
        &self,
        x: &Matrix,
        est: Estimator,
        kl_weight: f64,
        scale: f64,
        mut rng: Option<RngStream>,
        with_grad: bool,
    ) -> Result<ChunkTerms> {
        let family = self.spec.family;
        let pass = self.encoder.forward(x)?;
        let raw_scale_head = (family != Family::Poisson).then(|| pass.heads[1].clone());
        let post = self.posterior_from_heads(pass.heads.clone())?;
        let rates = self.prior_rates();
        let kl_units = post.kl(rates.as_deref());
        let per_latent_kl = kl_units.column_sums();
        let kl: f64 = per_latent_kl.iter().sum();

        let phi = &self.dictionary;
        let (b, k) = (x.rows(), self.latent_dim());
        let mean = post.mean();
        let mut d_mean = Matrix::zeros(b, k);
        let mut d_scale = Matrix::zeros(b, k);
        let mut d_phi = Matrix::zeros(phi.rows(), phi.cols());
        let mut recon = 0.0;

        match est {
            Estimator::Exact => {
                let var = post.variance();
                let resid = x.sub(&mean.matmul_nt(phi)?)?;
                let d = phi.column_sq_norms();
                recon = sum_sq(&resid)
                    + var
                        .as_slice()
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * d[i % k])
                        .sum::<f64>();
                if with_grad {
                    d_mean = resid.matmul(phi)?.scale(-2.0 * scale);
                    let mut d_var = Matrix::from_fn(b, k, |_, j| scale * d[j]);
                    match family {
                        Family::Poisson => d_mean.axpy(1.0, &d_var)?,
                        // ∂σ²/∂ln σ = 2σ², ∂(2b²)/∂ln b = 4b² = 2 var
                        Family::Gaussian | Family::Laplace => {
                            d_var = d_var.hadamard(&var)?;
                            d_scale = d_var.scale(2.0);
                        }
                    }
                    d_phi = resid.matmul_tn(mean)?.scale(-2.0 * scale);
                    let var_sums = var.column_sums();
                    for i in 0..phi.rows() {
                        for ((g, p), s) in
                            d_phi.row_mut(i).iter_mut().zip(phi.row(i)).zip(&var_sums)
                        {
                            *g += 2.0 * scale * p * s;
                        }
                    }
                }
            }
            _ => {
                let n_samples = match est {
                    Estimator::MonteCarlo { n_samples, .. }
                    | Estimator::StraightThrough { n_samples }
                    | Estimator::HardForward { n_samples, .. } => n_samples,
                    Estimator::Exact => unreachable!(),
                };
                let rng = rng.as_mut().expect("checked by evaluate");
                let inv_s = 1.0 / n_samples as f64;
                let n_exp = match &post {
                    Posterior::Poisson { rate, .. } => adaptive_n_exp(rate.max_abs())?,
                    _ => 0,
                };
                for _ in 0..n_samples {
                    // z and the derivative of z w.r.t. the mean (Poisson) or log scale
                    let (z, dz) = match (&post, est) {
                        (
                            Posterior::Poisson { rate, .. },
                            Estimator::MonteCarlo { temperature, .. },
                        ) => poisson_sample_with_grad(rate, n_exp, temperature, temperature, rng)?,
                        (
                            Posterior::Poisson { rate, .. },
                            Estimator::HardForward { temperature, .. },
                        ) => poisson_sample_with_grad(rate, n_exp, 0.0, temperature, rng)?,
                        (Posterior::Poisson { rate, .. }, _) => (
                            poisson_sample_hard(rate, n_exp, rng)?,
                            Matrix::filled(b, k, 1.0),
                        ),
                        (Posterior::Gaussian(p), _) => {
                            let s = gaussian_rsample(p, rng);
                            let dz = s.noise.hadamard(&p.std())?;
                            (s.z, dz)
                        }
                        (Posterior::Laplace(p), _) => {
                            let s = laplace_rsample(p, rng);
                            let dz = s.noise.hadamard(&p.scale())?;
                            (s.z, dz)
                        }
                    };
                    let resid = x.sub(&z.matmul_nt(phi)?)?;
                    recon += inv_s * sum_sq(&resid);
                    if with_grad {
                        let gz = resid.matmul(phi)?.scale(-2.0 * scale * inv_s);
                        d_phi.axpy(-2.0 * scale * inv_s, &resid.matmul_tn(&z)?)?;
                        match family {
                            Family::Poisson => d_mean.axpy(1.0, &gz.hadamard(&dz)?)?,
                            Family::Gaussian | Family::Laplace => {
                                d_scale.axpy(1.0, &gz.hadamard(&dz)?)?;
                                d_mean.axpy(1.0, &gz)?;
                            }
                        }
                    }
                }
            }
        }

        let grads = if with_grad {
            let w = kl_weight * scale;
            let (head_grads, d_log_rates) = match &post {
                Posterior::Poisson { log_delta, rate } => {
                    // λ = r e^a: ∂λ/∂a = ∂λ/∂ln r = λ; ∂KL/∂a = λ a; ∂KL/∂ln r = r f(δr)
                    let da = Matrix::from_fn(b, k, |i, j| {
                        let lam = rate.get(i, j);
                        d_mean.get(i, j) * lam + w * lam * log_delta.get(i, j)
                    });
                    let mut dl = vec![0.0; k];
                    for i in 0..b {
                        for (j, g) in dl.iter_mut().enumerate() {
                            *g += d_mean.get(i, j) * rate.get(i, j) + w * kl_units.get(i, j);
                        }
                    }
                    (vec![da], Some(Matrix::row_vector(&dl)))
                }
                Posterior::Gaussian(p) => {
                    let dmu = d_mean.zip_map(&p.mean, |g, mu| g + w * mu)?;
                    let var = p.variance();
                    let ds =
                        Matrix::from_fn(b, k, |i, j| d_scale.get(i, j) + w * (var.get(i, j) - 1.0));
                    (vec![dmu, ds], None)
                }
                Posterior::Laplace(p) => {
                    let sc = p.scale();
                    let dmu = Matrix::from_fn(b, k, |i, j| {
                        let mu = p.loc.get(i, j);
                        d_mean.get(i, j)
                            + w * mu.signum() * (1.0 - (-mu.abs() / sc.get(i, j)).exp())
                    });
                    let ds = Matrix::from_fn(b, k, |i, j| {
                        let r = p.loc.get(i, j).abs() / sc.get(i, j);
                        d_scale.get(i, j) + w * (-1.0 + sc.get(i, j) * (-r).exp() * (1.0 + r))
                    });
                    (vec![dmu, ds], None)
                }
            };
            let mut head_grads = head_grads;
            if let Some(raw) = &raw_scale_head {
                // the floor blocks gradients below it
                head_grads[1] =
                    head_grads[1].zip_map(raw, |g, r| if r < LOG_SCALE_FLOOR { 0.0 } else { g })?;
            }
            let mut out = self.encoder.backward(x, &pass, &head_grads)?;
            out.push(d_phi);
            if let Some(dl) = d_log_rates {
                out.push(dl);
            }
            Some(out)
        } else {
            None
        };

        Ok(ChunkTerms {
            recon,
            kl,
            per_latent_kl,
            grads,
        })
    }

    /// Batch-mean lin|lin Poisson loss written as a polynomial in `λ`:
    /// `λᵀΦᵀΦλ + λᵀ(diag(ΦᵀΦ) − β1) + λᵀ(βWx − 2Φᵀx) + βΣr + xᵀx`.
    pub fn expanded_lin_lin_loss(&self, x: &Matrix) -> Result<f64> {
        if self.spec.family != Family::Poisson || self.spec.encoder != super::EncoderKind::Linear {
            return Err(Error::Unsupported(
                "the expanded form applies to Poisson latents with a linear encoder".into(),
            ));
        }
        self.check_input(x)?;
        let beta = self.beta();
        let phi = &self.dictionary;
        let r = self.prior_rates().unwrap();
        let a = x.matmul_nt(self.encoder.head_weight(0))?;
        let k = r.len();
        let lambda = Matrix::from_fn(x.rows(), k, |i, j| r[j] * a.get(i, j).exp());
        let d = phi.column_sq_norms();
        let quad = lambda.matmul_nt(phi)?.row_sq_norms();
        let phit_x = x.matmul(phi)?;
        let xx = x.row_sq_norms();
        let sum_r: f64 = r.iter().sum();
        let mut total = 0.0;
        for i in 0..x.rows() {
            let mut lin = 0.0;
            for j in 0..k {
                let l = lambda.get(i, j);
                lin += l * (d[j] - beta) + l * (beta * a.get(i, j) - 2.0 * phit_x.get(i, j));
            }
            total += quad[i] + lin + beta * sum_r + xx[i];
        }
        Ok(total / x.rows() as f64)
    }

    /// Mean negative ELBO (β = 1) over `data`.
    pub fn elbo_report(&self, data: &Matrix) -> Result<f64> {
        Ok(self.loss_exact(data)?.nelbo())
    }

    /// Latent samples at temperature 0 (integer counts for Poisson).
    pub fn sample_latents(&self, x: &Matrix, rng: &mut RngStream) -> Result<Matrix> {
        match self.encode(x)? {
            Posterior::Poisson { rate, .. } => {
                poisson_sample_hard(&rate, adaptive_n_exp(rate.max_abs())?, rng)
            }
            Posterior::Gaussian(p) => Ok(gaussian_rsample(&p, rng).z),
            Posterior::Laplace(p) => Ok(laplace_rsample(&p, rng).z),
        }
    }
}

fn sum_sq(m: &Matrix) -> f64 {
    m.as_slice().iter().map(|v| v * v).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{EncoderKind, ModelSpec};

    fn model(family: Family, encoder: EncoderKind, m: usize, k: usize, seed: u64) -> LinearVae {
        let mut spec = ModelSpec::new(family, m, k);
        spec.encoder = encoder;
        spec.hidden_dim = 6;
        spec.beta = 0.7;
        let mut rng = RngStream::new(seed, 1);
        let mut vae = LinearVae::new(spec, &mut rng).unwrap();
        if family == Family::Poisson {
            let lr: Vec<f64> = (0..k).map(|_| rng.uniform_in(-1.0, 0.5)).collect();
            vae.set_log_prior_rates(&lr).unwrap();
        }
        vae
    }

    fn batch(b: usize, m: usize, seed: u64) -> Matrix {
        let mut rng = RngStream::new(seed, 2);
        Matrix::from_fn(b, m, |_, _| rng.uniform_in(-1.0, 1.0))
    }

    fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
        let diff = a.sub(b).unwrap().frobenius_norm();
        let scale = a.frobenius_norm().max(b.frobenius_norm());
        if scale == 0.0 {
            0.0
        } else {
            diff / scale
        }
    }

    fn finite_difference(vae: &LinearVae, x: &Matrix, h: f64) -> Vec<Matrix> {
        let n = vae.tensors().len();
        let mut out = Vec::new();
        for t in 0..n {
            let shape = vae.tensors()[t].1.shape();
            let mut g = Matrix::zeros(shape.0, shape.1);
            for e in 0..g.len() {
                let mut plus = vae.clone();
                plus.tensors_mut()[t].as_mut_slice()[e] += h;
                let mut minus = vae.clone();
                minus.tensors_mut()[t].as_mut_slice()[e] -= h;
                let lp = plus.loss_exact(x).unwrap().total;
                let lm = minus.loss_exact(x).unwrap().total;
                g.as_mut_slice()[e] = (lp - lm) / (2.0 * h);
            }
            out.push(g);
        }
        out
    }

    #[test]
    fn hand_example_scalar_poisson() {
        let mut vae = model(Family::Poisson, EncoderKind::Linear, 1, 1, 0);
        vae.zero_encoder();
        vae.set_dictionary(Matrix::filled(1, 1, 1.0)).unwrap();
        vae.set_log_prior_rates(&[2f64.ln()]).unwrap();
        let rep = vae.loss_exact(&Matrix::filled(1, 1, 3.0)).unwrap();
        assert!((rep.recon - 3.0).abs() < 1e-12);
        assert_eq!(rep.kl, 0.0);
    }

    #[test]
    fn zero_dictionary_gives_input_energy() {
        for family in [Family::Poisson, Family::Gaussian, Family::Laplace] {
            let mut vae = model(family, EncoderKind::Linear, 5, 7, 3);
            vae.set_dictionary(Matrix::zeros(5, 7)).unwrap();
            let x = batch(9, 5, 4);
            let energy: f64 = x.row_sq_norms().iter().sum::<f64>() / 9.0;
            assert!((vae.loss_exact(&x).unwrap().recon - energy).abs() < 1e-12);
        }
    }

    #[test]
    fn collapsed_encoder_has_zero_kl() {
        for family in [Family::Poisson, Family::Gaussian, Family::Laplace] {
            let mut vae = model(family, EncoderKind::Linear, 6, 4, 5);
            vae.zero_encoder();
            let rep = vae.loss_exact(&batch(10, 6, 6)).unwrap();
            assert_eq!(rep.kl, 0.0, "{family:?}");
        }
        // no bias: x = 0 gives δr = 1
        let vae = model(Family::Poisson, EncoderKind::Linear, 6, 4, 5);
        match vae.encode(&Matrix::zeros(3, 6)).unwrap() {
            Posterior::Poisson { log_delta, rate } => {
                assert!(log_delta.as_slice().iter().all(|v| *v == 0.0));
                assert!(rate.as_slice().iter().all(|v| *v > 0.0));
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn rates_positive_for_random_weights() {
        let vae = model(Family::Poisson, EncoderKind::Mlp1, 8, 12, 7);
        let post = vae.encode(&batch(20, 8, 8).scale(5.0)).unwrap();
        assert!(post.mean().as_slice().iter().all(|v| *v > 0.0));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let vae = model(Family::Gaussian, EncoderKind::Linear, 8, 3, 0);
        assert!(matches!(
            vae.loss_exact(&Matrix::zeros(2, 7)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn exact_gradients_match_finite_differences() {
        for (s, family) in [Family::Poisson, Family::Gaussian, Family::Laplace]
            .into_iter()
            .enumerate()
        {
            for encoder in [EncoderKind::Linear, EncoderKind::Mlp1] {
                let vae = model(family, encoder, 8, 12, 10 + s as u64);
                let x = batch(4, 8, 20 + s as u64);
                let (_, g) = vae.grad_exact(&x).unwrap();
                let fd = finite_difference(&vae, &x, 1e-5);
                for (t, (a, n)) in g.tensors.iter().zip(&fd).enumerate() {
                    let e = rel_err(a, n);
                    assert!(e < 1e-5, "{family:?} {encoder:?} tensor {t}: {e}");
                }
            }
        }
    }

    #[test]
    fn expanded_form_matches_exact_loss() {
        for seed in 0..10 {
            let vae = model(Family::Poisson, EncoderKind::Linear, 8, 12, seed);
            let x = batch(5, 8, 100 + seed);
            let a = vae.expanded_lin_lin_loss(&x).unwrap();
            let b = vae.loss_exact(&x).unwrap().total;
            assert!((a - b).abs() < 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        }
        let g = model(Family::Gaussian, EncoderKind::Linear, 8, 12, 0);
        assert!(g.expanded_lin_lin_loss(&batch(2, 8, 0)).is_err());
    }

    #[test]
    fn kl_is_sum_of_per_latent_terms() {
        for family in [Family::Poisson, Family::Gaussian, Family::Laplace] {
            let rep = model(family, EncoderKind::Linear, 8, 12, 2)
                .loss_exact(&batch(7, 8, 3))
                .unwrap();
            let s: f64 = rep.per_latent_kl.iter().sum();
            assert!((rep.kl - s).abs() < 1e-10);
            assert!((rep.total - (rep.recon + 0.7 * rep.kl)).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_stationary_at_prior() {
        let mut vae = model(Family::Poisson, EncoderKind::Linear, 8, 12, 4);
        vae.zero_encoder();
        vae.set_dictionary(Matrix::zeros(8, 12)).unwrap();
        let (_, g) = vae.grad_exact(&batch(6, 8, 5)).unwrap();
        assert_eq!(g.tensors[0].max_abs(), 0.0);
    }

    #[test]
    fn log_rate_gradient_of_kl() {
        let mut vae = model(Family::Poisson, EncoderKind::Linear, 8, 12, 4);
        vae.set_dictionary(Matrix::zeros(8, 12)).unwrap();
        let x = batch(6, 8, 5);
        let (rep, g) = vae.grad_exact(&x).unwrap();
        let dl = g.tensors.last().unwrap();
        for j in 0..12 {
            assert!((dl.get(0, j) - vae.beta() * rep.per_latent_kl[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn chunked_evaluation_matches_single_pass() {
        let vae = model(Family::Laplace, EncoderKind::Mlp1, 8, 12, 6);
        let x = batch(200, 8, 7);
        let (whole, gw) = vae.grad_exact(&x).unwrap();
        let mut acc = Gradients::zeros_like(&vae);
        let mut recon = 0.0;
        for i in 0..200 {
            let (r, g) = vae.grad_exact(&x.row_range(i, i + 1)).unwrap();
            acc.axpy(1.0 / 200.0, &g).unwrap();
            recon += r.recon / 200.0;
        }
        assert!((whole.recon - recon).abs() < 1e-10);
        for (a, b) in gw.tensors.iter().zip(&acc.tensors) {
            assert!(rel_err(a, b) < 1e-12);
        }
    }

    #[test]
    fn sampled_recon_matches_closed_form() {
        let x = batch(3, 8, 9);
        for family in [Family::Poisson, Family::Gaussian, Family::Laplace] {
            let vae = model(family, EncoderKind::Linear, 8, 12, 8);
            let exact = vae.loss_exact(&x).unwrap();
            let est = match family {
                Family::Poisson => Estimator::StraightThrough { n_samples: 10_000 },
                _ => Estimator::MonteCarlo {
                    n_samples: 10_000,
                    temperature: 0.0,
                },
            };
            let mut rng = RngStream::new(3, 3);
            let (mc, _) = vae
                .evaluate(&x, est, vae.beta(), Some(&mut rng), false)
                .unwrap();
            assert!(
                (mc.recon / exact.recon - 1.0).abs() < 0.01,
                "{family:?}: {} vs {}",
                mc.recon,
                exact.recon
            );
            assert_eq!(mc.kl, exact.kl);
        }
    }

    #[test]
    fn vanishing_scale_makes_mc_deterministic() {
        let mut vae = model(Family::Gaussian, EncoderKind::Linear, 4, 3, 1);
        let x = Matrix::filled(5, 4, 1.0);
        // push the log-std head to the floor
        vae.encoder.tensors_mut()[1].map_inplace(|_| -100.0);
        let exact = vae.loss_exact(&x).unwrap();
        let mc = vae.loss_mc(&x, 1, 0.0, &mut RngStream::new(0, 0)).unwrap();
        assert!((mc.recon - exact.recon).abs() < 1e-3 * exact.recon.max(1.0));
    }

    #[test]
    fn identical_seeds_identical_reports() {
        let vae = model(Family::Poisson, EncoderKind::Linear, 8, 12, 1);
        let x = batch(130, 8, 2);
        let a = vae.grad_mc(&x, 2, 0.3, &mut RngStream::new(5, 5)).unwrap();
        let b = vae.grad_mc(&x, 2, 0.3, &mut RngStream::new(5, 5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn estimator_configuration_errors() {
        let p = model(Family::Poisson, EncoderKind::Linear, 4, 3, 0);
        let g = model(Family::Gaussian, EncoderKind::Linear, 4, 3, 0);
        let x = batch(2, 4, 0);
        let mut rng = RngStream::new(0, 0);
        assert!(matches!(
            p.loss_mc(&x, 1, 0.0, &mut rng),
            Err(Error::Config(_))
        ));
        assert!(matches!(g.loss_st(&x, &mut rng), Err(Error::Config(_))));
        assert!(matches!(
            p.loss_mc(&x, 0, 0.5, &mut rng),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            p.evaluate(
                &x,
                Estimator::MonteCarlo {
                    n_samples: 1,
                    temperature: 0.5
                },
                1.0,
                None,
                false
            ),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn straight_through_forward_equals_zero_temperature_samples() {
        let vae = model(Family::Poisson, EncoderKind::Linear, 8, 12, 3);
        let x = batch(4, 8, 4);
        let st = vae.loss_st(&x, &mut RngStream::new(9, 9)).unwrap();
        let hf = vae
            .evaluate(
                &x,
                Estimator::HardForward {
                    n_samples: 1,
                    temperature: 0.5,
                },
                vae.beta(),
                Some(&mut RngStream::new(9, 9)),
                false,
            )
            .unwrap()
            .0;
        assert_eq!(st, hf);
    }

    #[test]
    fn straight_through_dictionary_gradient_is_exact_given_samples() {
        let vae = model(Family::Poisson, EncoderKind::Linear, 8, 12, 3);
        let x = batch(4, 8, 4);
        let (_, g) = vae.grad_st(&x, &mut RngStream::new(1, 1)).unwrap();
        let t = vae.tensors().len() - 2;
        let h = 1e-5;
        let mut fd = Matrix::zeros(8, 12);
        for e in 0..fd.len() {
            let mut plus = vae.clone();
            plus.tensors_mut()[t].as_mut_slice()[e] += h;
            let mut minus = vae.clone();
            minus.tensors_mut()[t].as_mut_slice()[e] -= h;
            let lp = plus.loss_st(&x, &mut RngStream::new(1, 1)).unwrap().total;
            let lm = minus.loss_st(&x, &mut RngStream::new(1, 1)).unwrap().total;
            fd.as_mut_slice()[e] = (lp - lm) / (2.0 * h);
        }
        assert!(rel_err(&g.tensors[t], &fd) < 1e-6);
    }

    #[test]
    fn continuous_pathwise_gradient_is_unbiased() {
        for family in [Family::Gaussian, Family::Laplace] {
            let vae = model(family, EncoderKind::Linear, 8, 12, 2);
            let x = batch(4, 8, 3);
            let (_, exact) = vae.grad_exact(&x).unwrap();
            let (_, mc) = vae
                .grad_mc(&x, 5_000, 0.0, &mut RngStream::new(4, 4))
                .unwrap();
            assert!(
                mc.cosine(&exact) > 0.99,
                "{family:?}: {}",
                mc.cosine(&exact)
            );
        }
    }

    #[test]
    fn from_tensors_round_trip() {
        let vae = model(Family::Laplace, EncoderKind::Mlp1, 8, 5, 1);
        let tensors = vae.tensors().into_iter().map(|(_, t)| t.clone()).collect();
        let back = LinearVae::from_tensors(vae.spec().clone(), tensors).unwrap();
        assert_eq!(back, vae);
        assert!(LinearVae::from_tensors(vae.spec().clone(), vec![Matrix::zeros(1, 1)]).is_err());
    }
}
