//! Run configuration: TOML (or JSON) describing data, model, schedules,
//! seeds and outputs. Every field is validated before any compute.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::PatchOptions;
use crate::error::{Error, Result};
use crate::models::{EncoderKind, Family, GradMode, ModelSpec};
use crate::sparsecode::SparseCodeConfig;
use crate::train::Schedules;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// IDX files in `dir`; validation is the test split.
    Mnist,
    /// Whitened patches cropped from the MNIST images.
    Patches,
    /// PVLB caches written by `prep`.
    Cache,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthOptions {
    pub input_dim: usize,
    pub atoms: usize,
    pub active: usize,
    pub samples: usize,
    pub noise: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            input_dim: 64,
            atoms: 100,
            active: 3,
            samples: 50_000,
            noise: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Seeds patch cropping and synthetic sampling; independent of model seeds.
    pub seed: u64,
    /// MNIST directory; defaults to `$PVAE_DATA_DIR/mnist`.
    pub dir: Option<PathBuf>,
    pub train_cache: Option<PathBuf>,
    pub val_cache: Option<PathBuf>,
    /// Keep only the first `n_train` training rows.
    pub n_train: Option<usize>,
    /// Keep only the first `n_val` validation rows (validation patch count for `patches`).
    pub n_val: Option<usize>,
    pub patches: PatchOptions,
    pub synth: SynthOptions,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Mnist,
            seed: 0,
            dir: None,
            train_cache: None,
            val_cache: None,
            n_train: None,
            n_val: None,
            patches: PatchOptions::default(),
            synth: SynthOptions::default(),
        }
    }
}

impl DataConfig {
    pub fn mnist_dir(&self) -> PathBuf {
        self.dir
            .clone()
            .unwrap_or_else(|| crate::data::data_root().join("mnist"))
    }

    pub fn validate(&self) -> Result<()> {
        if self.source == DataSource::Cache
            && (self.train_cache.is_none() || self.val_cache.is_none())
        {
            return Err(Error::config(
                "data.source = \"cache\" needs data.train_cache and data.val_cache",
            ));
        }
        if self.n_train == Some(0) || self.n_val == Some(0) {
            return Err(Error::config(
                "data.n_train and data.n_val must be positive when set",
            ));
        }
        if self.source == DataSource::Patches
            && (self.patches.patch == 0 || self.patches.count == 0)
        {
            return Err(Error::config("data.patches needs positive patch and count"));
        }
        if self.source == DataSource::Synthetic {
            let s = &self.synth;
            if s.input_dim == 0 || s.atoms == 0 || s.active > s.atoms || !(s.noise >= 0.0) {
                return Err(Error::config(
                    "data.synth needs input_dim, atoms > 0, active <= atoms and noise >= 0",
                ));
            }
            if s.samples <= self.n_val.unwrap_or(0) {
                return Err(Error::config("data.synth.samples must exceed data.n_val"));
            }
        }
        Ok(())
    }
}

/// Model hyperparameters; the input width comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub family: Family,
    pub encoder: EncoderKind,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub beta: f64,
    pub grad_mode: GradMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            family: Family::Poisson,
            encoder: EncoderKind::Linear,
            latent_dim: 512,
            hidden_dim: 512,
            beta: 1.0,
            grad_mode: GradMode::Exact,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, input_dim: usize) -> ModelSpec {
        ModelSpec {
            family: self.family,
            encoder: self.encoder,
            input_dim,
            latent_dim: self.latent_dim,
            hidden_dim: self.hidden_dim,
            beta: self.beta,
            grad_mode: self.grad_mode,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub knn_k: usize,
    pub knn_sizes: Vec<usize>,
    /// Size of each of the two validation halves used for KNN.
    pub knn_pool: usize,
    pub logistic_l2: f64,
    pub logistic_iters: usize,
    /// Training rows used to fit shattering classifiers; `None` uses all.
    pub shatter_train: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            knn_k: 5,
            knn_sizes: vec![200, 1000, 5000],
            knn_pool: 5000,
            logistic_l2: 1e-4,
            logistic_iters: 50,
            shatter_train: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub schedule: Schedules,
    pub eval: EvalConfig,
    /// Sparse-coding baseline settings.
    pub sparse: SparseCodeConfig,
    pub seeds: Vec<u64>,
    /// Gradient modes compared by `compare-grads`.
    pub modes: Vec<GradMode>,
    /// β values visited by `sweep`.
    pub betas: Vec<f64>,
    pub out: PathBuf,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            schedule: Schedules::default(),
            eval: EvalConfig::default(),
            sparse: SparseCodeConfig::default(),
            seeds: vec![0],
            modes: vec![GradMode::Exact, GradMode::MonteCarlo],
            betas: Vec::new(),
            out: PathBuf::from("runs"),
            jobs: 1,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        };
        parsed.map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn render(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.schedule.validate()?;
        self.model.spec(1).validate()?;
        self.sparse.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must list at least one seed"));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Error::config("seeds must be distinct"));
        }
        for &m in &self.modes {
            let mut spec = self.model.spec(1);
            spec.grad_mode = m;
            spec.validate()?;
        }
        if let Some(b) = self.betas.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
            return Err(Error::config(format!("betas must be positive, got {b}")));
        }
        if self.jobs == 0 {
            return Err(Error::config("jobs must be at least 1"));
        }
        let e = &self.eval;
        if e.knn_k == 0 || e.knn_pool == 0 || e.knn_sizes.iter().any(|&n| n == 0 || n > e.knn_pool)
        {
            return Err(Error::config(
                "eval.knn_sizes must lie in 1..=knn_pool and knn_k must be positive",
            ));
        }
        if !(e.logistic_l2 >= 0.0) || e.logistic_iters == 0 {
            return Err(Error::config(
                "eval.logistic_l2 must be >= 0 and logistic_iters positive",
            ));
        }
        Ok(())
    }
}
