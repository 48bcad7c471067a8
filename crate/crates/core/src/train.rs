//! Optimization: AdaMax, cosine learning rate, KL and temperature
//! annealing, and the minibatch training loop.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::{model_container, model_from_container, Container, ContainerKind};
use crate::error::{Error, Result};
use crate::models::{Estimator, Family, GradMode, Gradients, LinearVae};
use crate::numkit::{Matrix, RngStream};

pub const ADAMAX_BETA1: f64 = 0.9;
pub const ADAMAX_BETA2: f64 = 0.999;
pub const ADAMAX_EPS: f64 = 1e-8;

/// Stream id of the training lineage within a seed.
const TRAIN_STREAM: u64 = 0x0074_7261_696e;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemperatureShape {
    Linear,
    Exponential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedules {
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub t_start: f64,
    pub t_final: f64,
    pub t_shape: TemperatureShape,
    /// Fraction of training over which the temperature is annealed.
    pub t_anneal: f64,
    /// Fraction of training over which the KL weight ramps from 0 to β.
    pub kl_ramp: f64,
    /// From this epoch on, relaxed Poisson samples are replaced by integer
    /// samples in the forward pass.
    pub hard_forward_after: Option<usize>,
    pub mc_samples: usize,
}

impl Default for Schedules {
    fn default() -> Self {
        Self {
            lr0: 0.005,
            epochs: 50,
            batch_size: 256,
            t_start: 1.0,
            t_final: 0.05,
            t_shape: TemperatureShape::Linear,
            t_anneal: 0.5,
            kl_ramp: 0.5,
            hard_forward_after: None,
            mc_samples: 1,
        }
    }
}

impl Schedules {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.t_final > 0.0 && self.t_start >= self.t_final && self.t_start.is_finite()) {
            return Err(Error::config(format!(
                "temperatures need t_start >= t_final > 0, got {} and {}",
                self.t_start, self.t_final
            )));
        }
        for (name, v) in [("t_anneal", self.t_anneal), ("kl_ramp", self.kl_ramp)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.mc_samples == 0 {
            return Err(Error::config("mc_samples must be at least 1"));
        }
        Ok(())
    }
}

/// `lr₀ · ½(1 + cos(π · epoch / total))`; `epoch` may be fractional.
pub fn cosine_lr(epoch: f64, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let p = (epoch / total as f64).clamp(0.0, 1.0);
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Annealed temperature; constant at `t_final` after the annealing window.
pub fn temperature_at(epoch: f64, s: &Schedules) -> f64 {
    let span = s.epochs as f64 * s.t_anneal;
    let p = if span > 0.0 {
        (epoch / span).clamp(0.0, 1.0)
    } else {
        1.0
    };
    match s.t_shape {
        TemperatureShape::Linear => s.t_start + (s.t_final - s.t_start) * p,
        TemperatureShape::Exponential => s.t_start * (s.t_final / s.t_start).powf(p),
    }
}

/// Forward-pass temperature: 0 once the hard-forward switch is active.
pub fn forward_temperature(epoch: f64, s: &Schedules) -> f64 {
    match s.hard_forward_after {
        Some(e) if epoch >= e as f64 => 0.0,
        _ => temperature_at(epoch, s),
    }
}

/// KL weight `β · min(1, epoch / ramp)`.
pub fn kl_weight(epoch: f64, beta: f64, s: &Schedules) -> f64 {
    let span = s.epochs as f64 * s.kl_ramp;
    if span <= 0.0 {
        beta
    } else {
        beta * (epoch / span).clamp(0.0, 1.0)
    }
}

/// AdaMax moments for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaMaxState {
    pub m: Vec<Matrix>,
    pub u: Vec<Matrix>,
    pub t: u64,
}

impl AdaMaxState {
    pub fn new(model: &LinearVae) -> Self {
        let zeros: Vec<Matrix> = model
            .tensors()
            .iter()
            .map(|(_, t)| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            u: zeros,
            t: 0,
        }
    }
}

/// One AdaMax update of `params` in place.
pub fn adamax_step(
    state: &mut AdaMaxState,
    params: Vec<&mut Matrix>,
    grads: &Gradients,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.tensors.len() || params.len() != state.m.len() {
        return Err(Error::State(format!(
            "optimizer holds {} tensors, got {} parameters and {} gradients",
            state.m.len(),
            params.len(),
            grads.tensors.len()
        )));
    }
    state.t += 1;
    let step = lr / (1.0 - ADAMAX_BETA1.powi(state.t.min(i32::MAX as u64) as i32));
    for (((p, g), m), u) in params
        .into_iter()
        .zip(&grads.tensors)
        .zip(&mut state.m)
        .zip(&mut state.u)
    {
        p.same_shape("adamax_step", g)?;
        for (((pv, gv), mv), uv) in p
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(m.as_mut_slice())
            .zip(u.as_mut_slice())
        {
            *mv = ADAMAX_BETA1 * *mv + (1.0 - ADAMAX_BETA1) * gv;
            *uv = (ADAMAX_BETA2 * *uv).max(gv.abs());
            *pv -= step * *mv / (*uv + ADAMAX_EPS);
        }
    }
    Ok(())
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub temperature: f64,
    pub beta_eff: f64,
    pub train_loss: f64,
    pub val_nelbo: f64,
    pub val_mse: f64,
    pub val_kl: f64,
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub seed: u64,
    pub model: LinearVae,
    pub optimizer: AdaMaxState,
    /// Completed epochs.
    pub epoch: usize,
    pub best_model: LinearVae,
    pub best_epoch: usize,
    pub best_val_nelbo: f64,
    pub initial_val_nelbo: f64,
    pub log: Vec<EpochMetrics>,
}

impl TrainState {
    /// Fresh state; evaluates the initial model on `val`.
    pub fn new(model: LinearVae, val: &Matrix, seed: u64) -> Result<Self> {
        let init = match model.elbo_report(val) {
            Ok(v) => v,
            Err(Error::Domain(detail)) => {
                return Err(Error::NonFinite {
                    epoch: 0,
                    step: 0,
                    detail: format!("initial validation: {detail}"),
                    snapshot: Some(Box::new(model)),
                })
            }
            Err(e) => return Err(e),
        };
        Ok(Self {
            seed,
            optimizer: AdaMaxState::new(&model),
            best_model: model.clone(),
            model,
            epoch: 0,
            best_epoch: 0,
            best_val_nelbo: init,
            initial_val_nelbo: init,
            log: Vec::new(),
        })
    }

    pub fn to_container(&self) -> Container {
        let mut c = model_container(&self.model, Value::Null);
        c.kind = ContainerKind::TrainState;
        for (i, (m, u)) in self.optimizer.m.iter().zip(&self.optimizer.u).enumerate() {
            c.tensors.push((format!("opt.m.{i}"), m.clone()));
            c.tensors.push((format!("opt.u.{i}"), u.clone()));
        }
        for (name, t) in self.best_model.tensors() {
            c.tensors.push((format!("best.{name}"), t.clone()));
        }
        // floats travel as tensors so they survive bit-exactly
        let scalars = [
            self.best_val_nelbo,
            self.initial_val_nelbo,
            self.seed as f64,
            self.optimizer.t as f64,
        ];
        c.tensors
            .push(("scalars".into(), Matrix::row_vector(&scalars)));
        let log: Vec<f64> = self
            .log
            .iter()
            .flat_map(|e| {
                [
                    e.epoch as f64,
                    e.lr,
                    e.temperature,
                    e.beta_eff,
                    e.train_loss,
                    e.val_nelbo,
                    e.val_mse,
                    e.val_kl,
                ]
            })
            .collect();
        c.tensors.push((
            "log".into(),
            Matrix::new(self.log.len(), 8, log).expect("8 columns"),
        ));
        c.meta = json!({
            "seed": self.seed,
            "epoch": self.epoch,
            "best_epoch": self.best_epoch,
            "adamax_t": self.optimizer.t,
        });
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != ContainerKind::TrainState {
            return Err(Error::data("checkpoint does not hold a training state"));
        }
        let model = model_from_container(c)?;
        let mut best = c.clone();
        best.tensors = c
            .tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix("best.").map(|s| (s.to_string(), t.clone())))
            .collect();
        let best_model = model_from_container(&best)?;
        let n = model.tensors().len();
        let get = |name: String| {
            c.tensor(&name)
                .cloned()
                .ok_or_else(|| Error::data(format!("training state lacks '{name}'")))
        };
        let m = (0..n)
            .map(|i| get(format!("opt.m.{i}")))
            .collect::<Result<Vec<_>>>()?;
        let u = (0..n)
            .map(|i| get(format!("opt.u.{i}")))
            .collect::<Result<Vec<_>>>()?;
        let meta_u64 = |key: &str| {
            c.meta[key]
                .as_u64()
                .ok_or_else(|| Error::data(format!("training state lacks '{key}'")))
        };
        let scalars = get("scalars".into())?;
        let log = get("log".into())?;
        let log = (0..log.rows())
            .map(|i| {
                let r = log.row(i);
                EpochMetrics {
                    epoch: r[0] as usize,
                    lr: r[1],
                    temperature: r[2],
                    beta_eff: r[3],
                    train_loss: r[4],
                    val_nelbo: r[5],
                    val_mse: r[6],
                    val_kl: r[7],
                }
            })
            .collect();
        Ok(Self {
            seed: meta_u64("seed")?,
            model,
            optimizer: AdaMaxState {
                m,
                u,
                t: meta_u64("adamax_t")?,
            },
            epoch: meta_u64("epoch")? as usize,
            best_model,
            best_epoch: meta_u64("best_epoch")? as usize,
            best_val_nelbo: scalars.get(0, 0),
            initial_val_nelbo: scalars.get(0, 1),
            log,
        })
    }
}

/// Estimator used for a training step.
pub fn training_estimator(model: &LinearVae, epoch: f64, s: &Schedules) -> Estimator {
    match model.grad_mode() {
        GradMode::Exact => Estimator::Exact,
        GradMode::StraightThrough => Estimator::StraightThrough {
            n_samples: s.mc_samples,
        },
        GradMode::MonteCarlo => {
            let t = temperature_at(epoch, s);
            if model.family() == Family::Poisson && forward_temperature(epoch, s) == 0.0 {
                Estimator::HardForward {
                    n_samples: s.mc_samples,
                    temperature: t,
                }
            } else {
                Estimator::MonteCarlo {
                    n_samples: s.mc_samples,
                    temperature: t,
                }
            }
        }
    }
}

/// Trains `model` from scratch; see [`train_from_state`].
pub fn train(
    model: LinearVae,
    train_x: &Matrix,
    val_x: &Matrix,
    s: &Schedules,
    seed: u64,
) -> Result<TrainState> {
    let state = TrainState::new(model, val_x, seed)?;
    train_from_state(state, train_x, val_x, s, |_| Ok(()))
}

/// Runs the remaining epochs of `state`. `on_epoch` sees the state after
/// every completed epoch (for checkpointing and logging).
pub fn train_from_state(
    mut state: TrainState,
    train_x: &Matrix,
    val_x: &Matrix,
    s: &Schedules,
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    s.validate()?;
    if train_x.rows() == 0 {
        return Err(Error::data("empty training split"));
    }
    let n = train_x.rows();
    let steps = n.div_ceil(s.batch_size);
    let lineage = RngStream::new(state.seed, TRAIN_STREAM);
    let beta = state.model.beta();
    while state.epoch < s.epochs {
        let epoch = state.epoch;
        let order = lineage.derive(&[epoch as u64, u64::MAX]).permutation(n);
        let mut loss_sum = 0.0;
        for step in 0..steps {
            let t = epoch as f64 + step as f64 / steps as f64;
            let idx = &order[step * s.batch_size..((step + 1) * s.batch_size).min(n)];
            let xb = train_x.select_rows(idx);
            let est = training_estimator(&state.model, t, s);
            let w = kl_weight(t, beta, s);
            let mut rng = lineage.derive(&[epoch as u64, step as u64]);
            let outcome = state.model.loss_and_grad(&xb, est, w, Some(&mut rng));
            let (report, grads) = match outcome {
                Ok(v) => v,
                Err(Error::Domain(detail)) => return Err(non_finite(&state, epoch, step, detail)),
                Err(e) => return Err(e),
            };
            if !report.is_finite() || !grads.is_finite() {
                let detail = format!(
                    "recon {} kl {} with {} gradient",
                    report.recon,
                    report.kl,
                    if grads.is_finite() {
                        "finite"
                    } else {
                        "non-finite"
                    }
                );
                return Err(non_finite(&state, epoch, step, detail));
            }
            loss_sum += report.recon + w * report.kl;
            let lr = cosine_lr(t, s.epochs, s.lr0);
            adamax_step(&mut state.optimizer, state.model.tensors_mut(), &grads, lr)?;
        }
        let val = state.model.loss_exact(val_x)?;
        if !val.is_finite() {
            return Err(non_finite(&state, epoch, steps, "validation loss".into()));
        }
        let e = epoch as f64;
        state.log.push(EpochMetrics {
            epoch: epoch + 1,
            lr: cosine_lr(e, s.epochs, s.lr0),
            temperature: match state.model.grad_mode() {
                GradMode::MonteCarlo if state.model.family() == Family::Poisson => {
                    forward_temperature(e, s)
                }
                _ => 0.0,
            },
            beta_eff: kl_weight(e, beta, s),
            train_loss: loss_sum / steps as f64,
            val_nelbo: val.nelbo(),
            val_mse: val.recon,
            val_kl: val.kl,
        });
        state.epoch += 1;
        if val.nelbo() < state.best_val_nelbo {
            state.best_val_nelbo = val.nelbo();
            state.best_model = state.model.clone();
            state.best_epoch = state.epoch;
        }
        on_epoch(&state)?;
    }
    Ok(state)
}

fn non_finite(state: &TrainState, epoch: usize, step: usize, detail: String) -> Error {
    Error::NonFinite {
        epoch,
        step,
        detail,
        snapshot: Some(Box::new(state.model.clone())),
    }
}
