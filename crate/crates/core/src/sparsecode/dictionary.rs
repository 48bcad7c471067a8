use serde::Serialize;

use super::solvers::{ista_infer, lca_infer, sc_objective};
use super::{Solver, SparseCodeConfig};
use crate::error::{Error, Result};
use crate::metrics::lifetime_sparsity;
use crate::models::random_unit_columns;
use crate::numkit::{Matrix, RngStream};

/// A dictionary `Φ` (`M×K`) with cached column norms.
#[derive(Clone, Debug, PartialEq)]
pub struct Dictionary {
    phi: Matrix,
    norms: Vec<f64>,
}

impl Dictionary {
    pub fn new(phi: Matrix) -> Result<Self> {
        if phi.is_empty() {
            return Err(Error::domain("dictionary is empty"));
        }
        if !phi.is_finite() {
            return Err(Error::domain("dictionary has non-finite entries"));
        }
        let norms = phi.column_norms();
        Ok(Self { phi, norms })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.phi
    }

    pub fn into_matrix(self) -> Matrix {
        self.phi
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn input_dim(&self) -> usize {
        self.phi.rows()
    }

    pub fn n_atoms(&self) -> usize {
        self.phi.cols()
    }

    /// Scales every column to unit norm; zero columns are redrawn at random.
    pub fn renormalize(&mut self, rng: &mut RngStream) {
        let m = self.phi.rows();
        for (j, n) in self.phi.column_norms().into_iter().enumerate() {
            let col: Vec<f64> = if n > 0.0 && n.is_finite() {
                self.phi.col(j).iter().map(|v| v / n).collect()
            } else {
                random_unit_columns(m, 1, rng).into_vec()
            };
            self.phi.set_col(j, &col);
        }
        self.norms = self.phi.column_norms();
    }

    pub fn infer(&self, x: &Matrix, cfg: &SparseCodeConfig) -> Result<Matrix> {
        match cfg.solver {
            Solver::Ista => ista_infer(x, &self.phi, cfg),
            Solver::Lca => lca_infer(x, &self.phi, cfg),
        }
    }

    /// Mean per-sample objective at `beta` after inference with `cfg`.
    pub fn mean_objective(&self, x: &Matrix, cfg: &SparseCodeConfig) -> Result<f64> {
        let z = self.infer(x, cfg)?;
        let obj = sc_objective(x, &self.phi, &z, cfg.beta)?;
        Ok(obj.iter().sum::<f64>() / obj.len().max(1) as f64)
    }
}

#[derive(Clone, Debug)]
pub struct DictLearnOutcome {
    pub dictionary: Dictionary,
    /// Mean per-sample objective over each epoch's batches.
    pub epoch_objective: Vec<f64>,
    pub epoch_beta: Vec<f64>,
}

/// Alternates sparse inference with a gradient step on `Φ` over minibatches
/// of the rows of `data`, renormalizing columns after each step.
pub fn dict_learn(
    data: &Matrix,
    k: usize,
    cfg: &SparseCodeConfig,
    rng: &mut RngStream,
) -> Result<DictLearnOutcome> {
    cfg.validate()?;
    let (n, m) = data.shape();
    if n == 0 || k == 0 {
        return Err(Error::config(
            "dictionary learning needs data and at least one atom",
        ));
    }
    let mut dict = Dictionary::new(random_unit_columns(m, k, rng))?;
    let mut epoch_objective = Vec::with_capacity(cfg.epochs);
    let mut epoch_beta = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let beta = cfg.beta_at(epoch);
        let step_cfg = SparseCodeConfig {
            beta,
            ..cfg.clone()
        };
        let order = rng.permutation(n);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let x = data.select_rows(idx);
            let z = dict.infer(&x, &step_cfg)?;
            let resid = x.sub(&z.matmul_nt(&dict.phi)?)?;
            let l1: f64 = z.as_slice().iter().map(|v| v.abs()).sum();
            total += 0.5 * resid.as_slice().iter().map(|v| v * v).sum::<f64>() + beta * l1;
            let grad = resid.matmul_tn(&z)?;
            dict.phi.axpy(cfg.lr / idx.len() as f64, &grad)?;
            dict.renormalize(rng);
        }
        epoch_objective.push(total / n as f64);
        epoch_beta.push(beta);
    }
    Ok(DictLearnOutcome {
        dictionary: dict,
        epoch_objective,
        epoch_beta,
    })
}

/// For each true atom, the `|cosine|` with the learned atom assigned to it by
/// greedy maximum-correlation matching.
pub fn match_atoms(truth: &Matrix, learned: &Matrix) -> Result<Vec<f64>> {
    if truth.rows() != learned.rows() {
        return Err(Error::Shape {
            op: "match_atoms",
            left: truth.shape(),
            right: learned.shape(),
        });
    }
    let tn = truth.column_norms();
    let ln = learned.column_norms();
    let dots = truth.matmul_tn(learned)?;
    let mut pairs = Vec::with_capacity(dots.len());
    for i in 0..truth.cols() {
        for j in 0..learned.cols() {
            let d = tn[i] * ln[j];
            let c = if d > 0.0 {
                (dots.get(i, j) / d).abs()
            } else {
                0.0
            };
            pairs.push((c, i, j));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut best = vec![0.0; truth.cols()];
    let mut used_t = vec![false; truth.cols()];
    let mut used_l = vec![false; learned.cols()];
    for (c, i, j) in pairs {
        if !used_t[i] && !used_l[j] {
            used_t[i] = true;
            used_l[j] = true;
            best[i] = c;
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RatePoint {
    pub beta: f64,
    /// Mean per-sample squared reconstruction error `‖x − Φz‖²`.
    pub mse: f64,
    pub sparsity: f64,
}

/// LCA inference on a fixed dictionary for each `β` in `betas`.
pub fn lca_on_fixed_dictionary(
    phi: &Matrix,
    data: &Matrix,
    betas: &[f64],
    cfg: &SparseCodeConfig,
) -> Result<Vec<RatePoint>> {
    betas
        .iter()
        .map(|&beta| {
            let c = SparseCodeConfig {
                beta,
                solver: Solver::Lca,
                ..cfg.clone()
            };
            c.validate()?;
            let z = lca_infer(data, phi, &c)?;
            let resid = data.sub(&z.matmul_nt(phi)?)?;
            let mse = resid.as_slice().iter().map(|v| v * v).sum::<f64>() / data.rows() as f64;
            let s = lifetime_sparsity(&z)?;
            Ok(RatePoint {
                beta,
                mse,
                sparsity: s.iter().sum::<f64>() / s.len() as f64,
            })
        })
        .collect()
}
