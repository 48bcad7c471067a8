//! Sparse-coding baselines: ISTA and LCA inference, dictionary learning,
//! and LCA inference on a fixed (e.g. VAE-learned) dictionary.
//!
//! Both solvers minimize `½‖x − Φz‖² + β‖z‖₁` per sample.

mod dictionary;
mod solvers;

use serde::{Deserialize, Serialize};

pub use dictionary::{
    dict_learn, lca_on_fixed_dictionary, match_atoms, DictLearnOutcome, Dictionary, RatePoint,
};
pub use solvers::{
    ista_infer, ista_infer_traced, largest_eigenvalue, lca_infer, sc_objective, shrink,
    InferenceTrace,
};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Ista,
    Lca,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Threshold {
    Hard,
    Soft,
}

/// `β` raised from `start` by `step` every `interval` epochs, capped at `end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaSchedule {
    pub start: f64,
    pub end: f64,
    pub step: f64,
    #[serde(default = "default_interval")]
    pub interval: usize,
}

fn default_interval() -> usize {
    5
}

impl BetaSchedule {
    pub fn new(start: f64, end: f64, step: f64) -> Self {
        Self {
            start,
            end,
            step,
            interval: 5,
        }
    }

    pub fn beta_at(&self, epoch: usize) -> f64 {
        let raises = (epoch / self.interval.max(1)) as f64;
        (self.start + self.step * raises).min(self.end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SparseCodeConfig {
    pub solver: Solver,
    pub beta: f64,
    pub n_iters: usize,
    /// Inference step size; `None` uses `1/L` with `L` the largest eigenvalue of `ΦᵀΦ`.
    pub step: Option<f64>,
    pub nonnegative: bool,
    /// LCA activation function.
    pub threshold: Threshold,
    /// Overrides `beta` during dictionary learning.
    pub schedule: Option<BetaSchedule>,
    /// Dictionary learning rate.
    pub lr: f64,
    /// Early exit when the relative change of `z` falls below this.
    pub tol: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for SparseCodeConfig {
    fn default() -> Self {
        Self {
            solver: Solver::Ista,
            beta: 0.1,
            n_iters: 100,
            step: None,
            nonnegative: true,
            threshold: Threshold::Hard,
            schedule: None,
            lr: 1e-2,
            tol: 1e-6,
            epochs: 100,
            batch_size: 256,
        }
    }
}

impl SparseCodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config(format!(
                "beta must be nonnegative, got {}",
                self.beta
            )));
        }
        if let Some(s) = self.step {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::config(format!(
                    "step size must be positive, got {s}"
                )));
            }
        }
        if let Some(s) = &self.schedule {
            if !(s.start >= 0.0 && s.start <= s.end && s.step >= 0.0) {
                return Err(Error::config(format!(
                    "beta schedule needs 0 <= start <= end and step >= 0, got {}:{}:{}",
                    s.start, s.end, s.step
                )));
            }
        }
        if self.n_iters == 0 || self.batch_size == 0 {
            return Err(Error::config("n_iters and batch_size must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }

    pub fn beta_at(&self, epoch: usize) -> f64 {
        self.schedule.map_or(self.beta, |s| s.beta_at(epoch))
    }
}

/// The hyperparameter grid: six β schedules × three learning rates ×
/// three iteration limits.
pub fn default_grid(solver: Solver) -> Vec<SparseCodeConfig> {
    let schedules = [
        BetaSchedule::new(0.05, 0.7, 0.1),
        BetaSchedule::new(0.01, 0.1, 0.01),
        BetaSchedule::new(0.1, 1.0, 0.1),
        BetaSchedule::new(0.05, 0.7, 0.05),
        BetaSchedule::new(0.05, 0.5, 0.05),
        BetaSchedule::new(0.1, 0.1, 0.0),
    ];
    let mut out = Vec::new();
    for s in schedules {
        for lr in [1e-1, 1e-2, 1e-3] {
            for n_iters in [100, 500, 900] {
                out.push(SparseCodeConfig {
                    solver,
                    beta: s.end,
                    schedule: Some(s),
                    lr,
                    n_iters,
                    ..SparseCodeConfig::default()
                });
            }
        }
    }
    out
}
