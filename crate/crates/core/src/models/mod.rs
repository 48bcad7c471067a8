//! Linear-decoder VAEs with Poisson, Gaussian or Laplace latents.
//!
//! Every model decodes with a dictionary `Φ` (M×K). The reconstruction term
//! of the loss is the squared error summed over pixels; because the decoder
//! is linear its expectation under the posterior is available in closed
//! form, which is what the exact (EX) path evaluates. The Monte-Carlo (MC)
//! and straight-through (ST) paths draw latent samples instead.

mod encoder;
mod loss;

use serde::{Deserialize, Serialize};

pub use encoder::{Encoder, EncoderKind, EncoderPass};
pub use loss::{Estimator, Gradients, LossReport, Posterior};

use crate::error::{Error, Result};
use crate::numkit::{Matrix, RngStream};

/// Floor applied to log-scale heads of the continuous families.
pub const LOG_SCALE_FLOOR: f64 = -10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Poisson,
    Gaussian,
    Laplace,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Poisson => "poisson",
            Family::Gaussian => "gaussian",
            Family::Laplace => "laplace",
        }
    }

    /// Number of encoder output heads.
    pub fn n_heads(self) -> usize {
        match self {
            Family::Poisson => 1,
            Family::Gaussian | Family::Laplace => 2,
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "poisson" | "p" => Ok(Family::Poisson),
            "gaussian" | "g" => Ok(Family::Gaussian),
            "laplace" | "l" => Ok(Family::Laplace),
            _ => Err(Error::config(format!("unknown family '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GradMode {
    #[serde(rename = "ex")]
    Exact,
    #[serde(rename = "mc")]
    MonteCarlo,
    #[serde(rename = "st")]
    StraightThrough,
}

impl GradMode {
    pub fn name(self) -> &'static str {
        match self {
            GradMode::Exact => "ex",
            GradMode::MonteCarlo => "mc",
            GradMode::StraightThrough => "st",
        }
    }
}

impl std::str::FromStr for GradMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ex" | "exact" => Ok(GradMode::Exact),
            "mc" | "montecarlo" | "monte-carlo" => Ok(GradMode::MonteCarlo),
            "st" | "straight-through" => Ok(GradMode::StraightThrough),
            _ => Err(Error::config(format!("unknown gradient mode '{s}'"))),
        }
    }
}

/// Architecture and objective of a [`LinearVae`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub encoder: EncoderKind,
    pub input_dim: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub beta: f64,
    pub grad_mode: GradMode,
}

impl ModelSpec {
    pub fn new(family: Family, input_dim: usize, latent_dim: usize) -> Self {
        Self {
            family,
            encoder: EncoderKind::Linear,
            input_dim,
            latent_dim,
            hidden_dim: 512,
            beta: 1.0,
            grad_mode: GradMode::Exact,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent_dim == 0 {
            return Err(Error::config(
                "input and latent dimensions must be positive",
            ));
        }
        if self.encoder == EncoderKind::Mlp1 && self.hidden_dim == 0 {
            return Err(Error::config("mlp1 encoder needs a positive hidden width"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if self.grad_mode == GradMode::StraightThrough && self.family != Family::Poisson {
            return Err(Error::config(
                "straight-through gradients are defined for Poisson latents only",
            ));
        }
        Ok(())
    }
}

/// A VAE with a linear decoder `x̂ = Φz`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearVae {
    spec: ModelSpec,
    encoder: Encoder,
    dictionary: Matrix,
    /// `ln r`, 1×K; Poisson only.
    log_prior_rates: Option<Matrix>,
}

impl LinearVae {
    pub fn new(spec: ModelSpec, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        let encoder = Encoder::new(
            spec.encoder,
            spec.input_dim,
            spec.latent_dim,
            spec.hidden_dim,
            spec.family.n_heads(),
            rng,
        );
        let dictionary = random_unit_columns(spec.input_dim, spec.latent_dim, rng);
        let log_prior_rates =
            (spec.family == Family::Poisson).then(|| Matrix::zeros(1, spec.latent_dim));
        Ok(Self {
            spec,
            encoder,
            dictionary,
            log_prior_rates,
        })
    }

    /// Rebuilds a model from tensors in [`LinearVae::tensors`] order.
    pub fn from_tensors(spec: ModelSpec, tensors: Vec<Matrix>) -> Result<Self> {
        spec.validate()?;
        let template = Self::new(spec.clone(), &mut RngStream::new(0, 0))?;
        let expected: Vec<(usize, usize)> =
            template.tensors().iter().map(|(_, t)| t.shape()).collect();
        let got: Vec<(usize, usize)> = tensors.iter().map(Matrix::shape).collect();
        if expected != got {
            return Err(Error::data(format!(
                "tensor shapes {got:?} do not match the model specification {expected:?}"
            )));
        }
        let n_enc = template.encoder.n_tensors();
        let mut rest = tensors;
        let tail = rest.split_off(n_enc);
        let encoder = Encoder::from_tensors(spec.encoder, spec.family.n_heads(), rest);
        let mut tail = tail.into_iter();
        let dictionary = tail.next().unwrap();
        let log_prior_rates = tail.next();
        Ok(Self {
            spec,
            encoder,
            dictionary,
            log_prior_rates,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn family(&self) -> Family {
        self.spec.family
    }

    pub fn beta(&self) -> f64 {
        self.spec.beta
    }

    pub fn set_beta(&mut self, beta: f64) -> Result<()> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::config(format!("beta must be positive, got {beta}")));
        }
        self.spec.beta = beta;
        Ok(())
    }

    pub fn grad_mode(&self) -> GradMode {
        self.spec.grad_mode
    }

    pub fn set_grad_mode(&mut self, mode: GradMode) -> Result<()> {
        let mut spec = self.spec.clone();
        spec.grad_mode = mode;
        spec.validate()?;
        self.spec = spec;
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn dictionary(&self) -> &Matrix {
        &self.dictionary
    }

    pub fn set_dictionary(&mut self, phi: Matrix) -> Result<()> {
        self.dictionary.same_shape("set_dictionary", &phi)?;
        self.dictionary = phi;
        Ok(())
    }

    /// Prior rates `r = exp(ln r)`; `None` for the continuous families.
    pub fn prior_rates(&self) -> Option<Vec<f64>> {
        self.log_prior_rates
            .as_ref()
            .map(|l| l.as_slice().iter().map(|v| v.exp()).collect())
    }

    pub fn set_log_prior_rates(&mut self, log_rates: &[f64]) -> Result<()> {
        match &mut self.log_prior_rates {
            None => Err(Error::Unsupported(format!(
                "{} latents have a fixed standard prior",
                self.spec.family.name()
            ))),
            Some(l) if l.cols() != log_rates.len() => Err(Error::Shape {
                op: "set_log_prior_rates",
                left: l.shape(),
                right: (1, log_rates.len()),
            }),
            Some(l) => {
                l.as_mut_slice().copy_from_slice(log_rates);
                Ok(())
            }
        }
    }

    /// Sets every encoder tensor to zero.
    pub fn zero_encoder(&mut self) {
        for t in self.encoder.tensors_mut() {
            t.map_inplace(|_| 0.0);
        }
    }

    /// Named parameter tensors: encoder, then `Φ`, then `ln r` (Poisson).
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.encoder.tensors();
        out.push(("dictionary".to_string(), &self.dictionary));
        if let Some(l) = &self.log_prior_rates {
            out.push(("log_prior_rates".to_string(), l));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.encoder.tensors_mut();
        out.push(&mut self.dictionary);
        if let Some(l) = &mut self.log_prior_rates {
            out.push(l);
        }
        out
    }

    pub fn n_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.spec.input_dim {
            return Err(Error::Shape {
                op: "encode",
                left: x.shape(),
                right: (x.rows(), self.spec.input_dim),
            });
        }
        Ok(())
    }
}

/// `rows × cols` matrix with independent Gaussian columns scaled to unit norm.
pub fn random_unit_columns(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
    let mut m = Matrix::from_fn(rows, cols, |_, _| rng.normal());
    normalize_columns(&mut m);
    m
}

/// Scales each nonzero column to unit Euclidean norm.
pub fn normalize_columns(m: &mut Matrix) {
    let norms = m.column_norms();
    let cols = m.cols();
    for (i, v) in m.as_mut_slice().iter_mut().enumerate() {
        let n = norms[i % cols];
        if n > 0.0 {
            *v /= n;
        }
    }
}
