use rayon::prelude::*;

use super::{SparseCodeConfig, Threshold};
use crate::error::{Error, Result};
use crate::numkit::{Matrix, RngStream};

/// Rows per independently solved block.
const INFER_CHUNK: usize = 256;
/// Consecutive objective increases tolerated before reporting divergence.
const DIVERGENCE_RUN: usize = 10;
/// Default step is this fraction of `1/L`, absorbing power-iteration error.
const STEP_SAFETY: f64 = 1.0 - 1e-9;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InferenceTrace {
    /// Summed objective of the iterate entering each iteration, plus the final one.
    pub objectives: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Largest eigenvalue of `ΦᵀΦ` by power iteration.
pub fn largest_eigenvalue(phi: &Matrix) -> Result<f64> {
    let k = phi.cols();
    if k == 0 {
        return Err(Error::domain("dictionary has no atoms"));
    }
    let mut rng = RngStream::new(0x5eed, 0);
    let mut v = Matrix::from_fn(1, k, |_, _| rng.uniform() + 0.5);
    let mut lambda = 0.0;
    for _ in 0..1000 {
        let norm = v.frobenius_norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        v = v.scale(1.0 / norm);
        let w = v.matmul_nt(phi)?.matmul(phi)?;
        let next: f64 = v
            .as_slice()
            .iter()
            .zip(w.as_slice())
            .map(|(a, b)| a * b)
            .sum();
        let done = (next - lambda).abs() <= 1e-12 * next.abs();
        lambda = next;
        v = w;
        if done {
            break;
        }
    }
    Ok(lambda)
}

fn step_size(phi: &Matrix, cfg: &SparseCodeConfig) -> Result<f64> {
    match cfg.step {
        Some(s) => Ok(s),
        None => {
            let l = largest_eigenvalue(phi)?;
            Ok(if l > 0.0 { STEP_SAFETY / l } else { 1.0 })
        }
    }
}

/// Soft threshold at `t`.
pub fn shrink(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

fn threshold(u: f64, beta: f64, kind: Threshold, nonnegative: bool) -> f64 {
    let a = match kind {
        Threshold::Soft => shrink(u, beta),
        Threshold::Hard => {
            if u.abs() > beta {
                u
            } else {
                0.0
            }
        }
    };
    if nonnegative {
        a.max(0.0)
    } else {
        a
    }
}

/// Per-row `½‖x − Φz‖² + β‖z‖₁`.
pub fn sc_objective(x: &Matrix, phi: &Matrix, z: &Matrix, beta: f64) -> Result<Vec<f64>> {
    let resid = x.sub(&z.matmul_nt(phi)?)?;
    Ok((0..x.rows())
        .map(|i| {
            let r: f64 = resid.row(i).iter().map(|v| v * v).sum();
            let l1: f64 = z.row(i).iter().map(|v| v.abs()).sum();
            0.5 * r + beta * l1
        })
        .collect())
}

fn batch_objective(resid: &Matrix, z: &Matrix, beta: f64) -> f64 {
    let r: f64 = resid.as_slice().iter().map(|v| v * v).sum();
    let l1: f64 = z.as_slice().iter().map(|v| v.abs()).sum();
    0.5 * r + beta * l1
}

/// Energy the LCA dynamics descend: the ℓ1 objective for the soft threshold,
/// an ℓ0 cost of `β²/2` per active unit for the hard threshold.
fn lca_energy(resid: &Matrix, a: &Matrix, beta: f64, kind: Threshold) -> f64 {
    match kind {
        Threshold::Soft => batch_objective(resid, a, beta),
        Threshold::Hard => {
            let r: f64 = resid.as_slice().iter().map(|v| v * v).sum();
            let l0 = a.as_slice().iter().filter(|v| **v != 0.0).count() as f64;
            0.5 * r + 0.5 * beta * beta * l0
        }
    }
}

fn check_shapes(x: &Matrix, phi: &Matrix) -> Result<()> {
    if x.cols() != phi.rows() {
        return Err(Error::Shape {
            op: "sparse inference",
            left: x.shape(),
            right: phi.shape(),
        });
    }
    Ok(())
}

struct Watch {
    last: f64,
    increases: usize,
}

impl Watch {
    fn new() -> Self {
        Self {
            last: f64::INFINITY,
            increases: 0,
        }
    }

    fn observe(&mut self, obj: f64) -> Result<()> {
        if !obj.is_finite() {
            return Err(Error::Divergence(self.increases + 1));
        }
        if obj > self.last + 1e-12 * self.last.abs().max(1.0) {
            self.increases += 1;
            if self.increases >= DIVERGENCE_RUN {
                return Err(Error::Divergence(self.increases));
            }
        } else {
            self.increases = 0;
        }
        self.last = obj;
        Ok(())
    }
}

fn relative_change(old: &Matrix, new: &Matrix) -> f64 {
    let diff: f64 = old
        .as_slice()
        .iter()
        .zip(new.as_slice())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = new.frobenius_norm();
    if diff == 0.0 {
        0.0
    } else {
        diff / norm.max(f64::MIN_POSITIVE)
    }
}

fn ista_block(
    x: &Matrix,
    phi: &Matrix,
    cfg: &SparseCodeConfig,
    eta: f64,
    trace: bool,
) -> Result<(Matrix, InferenceTrace)> {
    let mut z = Matrix::zeros(x.rows(), phi.cols());
    let mut watch = Watch::new();
    let mut out = InferenceTrace::default();
    for it in 0..cfg.n_iters {
        let resid = x.sub(&z.matmul_nt(phi)?)?;
        let obj = batch_objective(&resid, &z, cfg.beta);
        watch.observe(obj)?;
        if trace {
            out.objectives.push(obj);
        }
        let mut next = resid.matmul(phi)?;
        for (n, zv) in next.as_mut_slice().iter_mut().zip(z.as_slice()) {
            let v = shrink(zv + eta * *n, eta * cfg.beta);
            *n = if cfg.nonnegative { v.max(0.0) } else { v };
        }
        let change = relative_change(&z, &next);
        z = next;
        out.iterations = it + 1;
        if change < cfg.tol {
            out.converged = true;
            break;
        }
    }
    if trace {
        let resid = x.sub(&z.matmul_nt(phi)?)?;
        out.objectives.push(batch_objective(&resid, &z, cfg.beta));
    }
    Ok((z, out))
}

fn lca_block(x: &Matrix, phi: &Matrix, cfg: &SparseCodeConfig, eta: f64) -> Result<Matrix> {
    let (b, k) = (x.rows(), phi.cols());
    let mut u = Matrix::zeros(b, k);
    let mut a = Matrix::zeros(b, k);
    let mut watch = Watch::new();
    for _ in 0..cfg.n_iters {
        let resid = x.sub(&a.matmul_nt(phi)?)?;
        watch.observe(lca_energy(&resid, &a, cfg.beta, cfg.threshold))?;
        // Φᵀx − (ΦᵀΦ − I)a = Φᵀ(x − Φa) + a
        let drive = resid.matmul(phi)?;
        let mut next = u.clone();
        for ((n, d), av) in next
            .as_mut_slice()
            .iter_mut()
            .zip(drive.as_slice())
            .zip(a.as_slice())
        {
            *n += eta * (d + av - *n);
        }
        let change = relative_change(&u, &next);
        u = next;
        a = u.map(|v| threshold(v, cfg.beta, cfg.threshold, cfg.nonnegative));
        if change < cfg.tol {
            break;
        }
    }
    Ok(a)
}

fn run_chunked(
    x: &Matrix,
    k: usize,
    f: impl Fn(&Matrix) -> Result<Matrix> + Sync,
) -> Result<Matrix> {
    let starts: Vec<usize> = (0..x.rows()).step_by(INFER_CHUNK).collect();
    let blocks = starts
        .par_iter()
        .map(|&s| f(&x.row_range(s, (s + INFER_CHUNK).min(x.rows()))))
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(x.rows() * k);
    for blk in blocks {
        data.extend_from_slice(blk.as_slice());
    }
    Matrix::new(x.rows(), k, data)
}

/// ISTA codes for the rows of `x` (`N×M`) under `phi` (`M×K`).
pub fn ista_infer(x: &Matrix, phi: &Matrix, cfg: &SparseCodeConfig) -> Result<Matrix> {
    check_shapes(x, phi)?;
    let eta = step_size(phi, cfg)?;
    run_chunked(x, phi.cols(), |blk| {
        ista_block(blk, phi, cfg, eta, false).map(|r| r.0)
    })
}

/// ISTA on `x` as a single block, recording the objective at every iteration.
pub fn ista_infer_traced(
    x: &Matrix,
    phi: &Matrix,
    cfg: &SparseCodeConfig,
) -> Result<(Matrix, InferenceTrace)> {
    check_shapes(x, phi)?;
    let eta = step_size(phi, cfg)?;
    ista_block(x, phi, cfg, eta, true)
}

/// LCA activations for the rows of `x`; the step size is `η/τ`.
pub fn lca_infer(x: &Matrix, phi: &Matrix, cfg: &SparseCodeConfig) -> Result<Matrix> {
    check_shapes(x, phi)?;
    let eta = step_size(phi, cfg)?.min(1.0);
    run_chunked(x, phi.cols(), |blk| lca_block(blk, phi, cfg, eta))
}
