//! Representation-quality measurements.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::models::{Family, LinearVae, Posterior};
use crate::numkit::{Matrix, RngStream};

pub const N_CLASSES: usize = 10;
const HIST_BINS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    /// `log δr` of a Poisson posterior.
    LogDeltaRate,
    PosteriorMean,
    /// Latent samples (zero temperature for Poisson).
    Samples,
}

impl FeatureKind {
    /// `log δr` for Poisson models, the posterior mean otherwise.
    pub fn default_for(family: Family) -> Self {
        match family {
            Family::Poisson => FeatureKind::LogDeltaRate,
            _ => FeatureKind::PosteriorMean,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationSet {
    pub features: Matrix,
    pub labels: Vec<u8>,
    pub kind: FeatureKind,
}

impl RepresentationSet {
    pub fn new(features: Matrix, labels: Vec<u8>, kind: FeatureKind) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::data(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if !features.is_finite() {
            return Err(Error::domain("representation has non-finite features"));
        }
        Ok(Self {
            features,
            labels,
            kind,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            kind: self.kind,
        }
    }

    pub fn row_range(&self, start: usize, end: usize) -> Self {
        Self {
            features: self.features.row_range(start, end),
            labels: self.labels[start..end].to_vec(),
            kind: self.kind,
        }
    }
}

/// Encodes `x` and extracts features of the requested kind.
pub fn extract_representations(
    model: &LinearVae,
    x: &Matrix,
    labels: &[u8],
    kind: FeatureKind,
    rng: &mut RngStream,
) -> Result<RepresentationSet> {
    let features = match kind {
        FeatureKind::Samples => model.sample_latents(x, rng)?,
        FeatureKind::PosteriorMean => model.encode(x)?.mean().clone(),
        FeatureKind::LogDeltaRate => match model.encode(x)? {
            Posterior::Poisson { log_delta, .. } => log_delta,
            _ => {
                return Err(Error::Unsupported(format!(
                    "log-rate features need a Poisson model, got {}",
                    model.family().name()
                )))
            }
        },
    };
    RepresentationSet::new(features, labels.to_vec(), kind)
}

/// Per-column selectivity `(1 − (Σz)²/(NΣz²)) / (1 − 1/N)`; silent columns score 1.
pub fn lifetime_sparsity(responses: &Matrix) -> Result<Vec<f64>> {
    let n = responses.rows();
    if n < 2 {
        return Err(Error::domain(format!(
            "lifetime sparsity needs at least 2 responses, got {n}"
        )));
    }
    let sums = responses.column_sums();
    let sq = responses.column_sq_norms();
    let nf = n as f64;
    Ok(sums
        .iter()
        .zip(&sq)
        .map(|(&s, &q)| {
            if q == 0.0 {
                1.0
            } else {
                ((1.0 - s * s / (nf * q)) / (1.0 - 1.0 / nf)).clamp(0.0, 1.0)
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ActiveLatents {
    pub fraction: f64,
    /// KL value at the upper edge of the separating gap; 0 without a gap.
    pub threshold: f64,
}

/// Active fraction from a log₁₀ histogram of per-latent KL values: the widest
/// run of empty bins between occupied ones separates dead from active latents.
pub fn dead_neuron_fraction(kl: &[f64]) -> Result<ActiveLatents> {
    if kl.len() < 2 {
        return Err(Error::domain(
            "active-latent analysis needs at least 2 latents",
        ));
    }
    if kl.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite KL value"));
    }
    let logs: Vec<Option<f64>> = kl.iter().map(|&v| (v > 0.0).then(|| v.log10())).collect();
    let (lo, hi) = logs
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let no_gap = ActiveLatents {
        fraction: 1.0,
        threshold: 0.0,
    };
    if !(hi > lo) {
        return Ok(no_gap);
    }
    let width = (hi - lo) / HIST_BINS as f64;
    let bin_of = |l: Option<f64>| match l {
        None => 0,
        Some(v) => (((v - lo) / width) as usize).min(HIST_BINS - 1),
    };
    let bins: Vec<usize> = logs.iter().map(|&l| bin_of(l)).collect();
    let mut counts = [0usize; HIST_BINS];
    for &b in &bins {
        counts[b] += 1;
    }
    let mut best: Option<(usize, usize)> = None;
    let mut run_start = None;
    for (i, &c) in counts.iter().enumerate() {
        match (c, run_start) {
            (0, None) => run_start = Some(i),
            (0, Some(_)) => {}
            (_, Some(s)) => {
                // runs touching bin 0 cannot occur: bin 0 holds the minimum
                let len = i - s;
                if best.is_none_or(|(bs, be)| len > be - bs) {
                    best = Some((s, i));
                }
                run_start = None;
            }
            (_, None) => {}
        }
    }
    let Some((_, end)) = best else {
        return Ok(no_gap);
    };
    let active = bins.iter().filter(|&&b| b >= end).count();
    Ok(ActiveLatents {
        fraction: active as f64 / kl.len() as f64,
        threshold: 10f64.powf(lo + end as f64 * width),
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Majority vote over the `k` nearest labeled points; tied labels go to
/// whichever tied label is held by the nearer neighbour.
pub fn knn_predict(labeled: &RepresentationSet, queries: &Matrix, k: usize) -> Result<Vec<u8>> {
    if k == 0 || labeled.is_empty() {
        return Err(Error::config("k-NN needs k >= 1 and labeled data"));
    }
    if queries.cols() != labeled.features.cols() {
        return Err(Error::Shape {
            op: "knn_predict",
            left: labeled.features.shape(),
            right: queries.shape(),
        });
    }
    let k = k.min(labeled.len());
    Ok((0..queries.rows())
        .into_par_iter()
        .map(|q| {
            let row = queries.row(q);
            let mut d: Vec<(f64, usize)> = (0..labeled.len())
                .map(|i| (sq_dist(row, labeled.features.row(i)), i))
                .collect();
            d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let nearest = &mut d[..k];
            nearest.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut votes = [0usize; 256];
            for &(_, i) in nearest.iter() {
                votes[labeled.labels[i] as usize] += 1;
            }
            let top = *votes.iter().max().unwrap();
            nearest
                .iter()
                .map(|&(_, i)| labeled.labels[i])
                .find(|&l| votes[l as usize] == top)
                .unwrap()
        })
        .collect())
}

/// Accuracy on `test` of a `k`-NN classifier fit to `n_labeled` points drawn
/// without replacement from `train`.
pub fn knn_accuracy(
    train: &RepresentationSet,
    test: &RepresentationSet,
    k: usize,
    n_labeled: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    if n_labeled > train.len() || n_labeled == 0 {
        return Err(Error::config(format!(
            "cannot label {n_labeled} of {} training points",
            train.len()
        )));
    }
    if test.is_empty() {
        return Err(Error::data("empty test set"));
    }
    let idx = rng.sample_without_replacement(train.len(), n_labeled);
    let pred = knn_predict(&train.subset(&idx), &test.features, k)?;
    let hits = pred
        .iter()
        .zip(&test.labels)
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / test.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogisticFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub train_accuracy: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl LogisticFit {
    pub fn predict(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>() + self.bias > 0.0
    }

    pub fn accuracy(&self, x: &Matrix, y: &[bool]) -> f64 {
        let hits = (0..x.rows())
            .filter(|&i| self.predict(x.row(i)) == y[i])
            .count();
        hits as f64 / y.len().max(1) as f64
    }
}

fn log1p_exp(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

/// Mean logistic loss plus `½ l2 ‖w‖²` (bias unpenalized), minimized by
/// damped Newton steps until the gradient norm is at most 1e-6.
pub fn logistic_regression_fit(
    x: &Matrix,
    y: &[bool],
    l2: f64,
    max_iters: usize,
) -> Result<LogisticFit> {
    let (n, d) = x.shape();
    if y.len() != n {
        return Err(Error::data(format!("{n} rows but {} targets", y.len())));
    }
    let pos = y.iter().filter(|v| **v).count();
    if pos == 0 || pos == n {
        return Err(Error::domain(
            "logistic regression needs both classes present",
        ));
    }
    if !(l2 >= 0.0) {
        return Err(Error::config(format!(
            "l2 weight must be nonnegative, got {l2}"
        )));
    }
    let p = d + 1;
    let design = DMatrix::from_fn(n, p, |i, j| if j < d { x.get(i, j) } else { 1.0 });
    let target = DVector::from_fn(n, |i, _| if y[i] { 1.0 } else { 0.0 });
    let objective = |w: &DVector<f64>| -> f64 {
        let z = &design * w;
        let nll: f64 = z
            .iter()
            .zip(target.iter())
            .map(|(&zi, &t)| log1p_exp(zi) - t * zi)
            .sum::<f64>()
            / n as f64;
        nll + 0.5 * l2 * w.rows(0, d).norm_squared()
    };
    let mut w = DVector::zeros(p);
    let mut f = objective(&w);
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    for it in 0..max_iters {
        let z = &design * &w;
        let prob = z.map(|v| 1.0 / (1.0 + (-v).exp()));
        let mut grad = design.tr_mul(&(&prob - &target)) / n as f64;
        for j in 0..d {
            grad[j] += l2 * w[j];
        }
        grad_norm = grad.norm();
        if grad_norm <= 1e-6 {
            break;
        }
        iterations = it + 1;
        let s = prob.map(|v| (v * (1.0 - v)).max(1e-12));
        let weighted = DMatrix::from_fn(n, p, |i, j| design[(i, j)] * s[i]);
        let mut hess = design.tr_mul(&weighted) / n as f64;
        for j in 0..p {
            hess[(j, j)] += if j < d { l2 } else { 0.0 } + 1e-10;
        }
        let dir = match hess.clone().cholesky() {
            Some(c) => c.solve(&grad),
            None => hess.lu().solve(&grad).unwrap_or_else(|| grad.clone()),
        };
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let cand = &w - &dir * t;
            let fc = objective(&cand);
            if fc <= f - 1e-4 * t * grad.dot(&dir) {
                w = cand;
                f = fc;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    let fit = LogisticFit {
        weights: w.rows(0, d).iter().copied().collect(),
        bias: w[d],
        train_accuracy: 0.0,
        iterations,
        grad_norm,
    };
    let train_accuracy = fit.accuracy(x, y);
    Ok(LogisticFit {
        train_accuracy,
        ..fit
    })
}

/// All size-5 subsets of the ten classes, as bit masks.
pub fn balanced_dichotomies() -> Vec<u16> {
    (0u16..1 << N_CLASSES)
        .filter(|m| m.count_ones() as usize == N_CLASSES / 2)
        .collect()
}

fn standardize(train: &Matrix, other: &Matrix) -> (Matrix, Matrix) {
    let n = train.rows() as f64;
    let mean: Vec<f64> = train.column_sums().iter().map(|s| s / n).collect();
    let sd: Vec<f64> = train
        .column_sq_norms()
        .iter()
        .zip(&mean)
        .map(|(q, m)| {
            let v = (q / n - m * m).max(0.0).sqrt();
            if v > 1e-12 {
                v
            } else {
                1.0
            }
        })
        .collect();
    let f =
        |x: &Matrix| Matrix::from_fn(x.rows(), x.cols(), |i, j| (x.get(i, j) - mean[j]) / sd[j]);
    (f(train), f(other))
}

fn check_classes(set: &RepresentationSet, what: &str) -> Result<()> {
    let mut seen = [false; N_CLASSES];
    for &l in &set.labels {
        match seen.get_mut(l as usize) {
            Some(s) => *s = true,
            None => {
                return Err(Error::domain(format!(
                    "{what}: label {l} outside 0..{N_CLASSES}"
                )))
            }
        }
    }
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(Error::domain(format!("{what}: class {c} missing")));
    }
    Ok(())
}

/// Mean validation accuracy of logistic classifiers over all 252 balanced
/// class dichotomies. Features are standardized with training statistics.
pub fn shattering_dim(
    train: &RepresentationSet,
    val: &RepresentationSet,
    l2: f64,
    max_iters: usize,
) -> Result<f64> {
    check_classes(train, "training representations")?;
    if val.is_empty() {
        return Err(Error::data("empty validation representations"));
    }
    let (xt, xv) = standardize(&train.features, &val.features);
    let masks = balanced_dichotomies();
    let accs = masks
        .par_iter()
        .map(|&mask| {
            let side = |l: u8| mask >> l & 1 == 1;
            let yt: Vec<bool> = train.labels.iter().map(|&l| side(l)).collect();
            let yv: Vec<bool> = val.labels.iter().map(|&l| side(l)).collect();
            Ok(logistic_regression_fit(&xt, &yt, l2, max_iters)?.accuracy(&xv, &yv))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DropRow {
    pub method: String,
    pub drops: Vec<f64>,
    pub mean: f64,
    /// Half-width of the 95% Student-t interval; `None` for a single seed.
    pub ci95: Option<f64>,
}

/// Percent drop of every loss relative to the best loss over all methods and seeds.
pub fn percent_drop(losses: &[(String, Vec<f64>)]) -> Result<Vec<DropRow>> {
    if losses.iter().any(|(_, l)| l.is_empty()) {
        return Err(Error::config("every method needs at least one seed"));
    }
    let best = losses
        .iter()
        .flat_map(|(_, l)| l.iter().copied())
        .fold(f64::INFINITY, f64::min);
    if !(best.is_finite() && best != 0.0) {
        return Err(Error::domain(format!(
            "best loss {best} cannot anchor a percent drop"
        )));
    }
    losses
        .iter()
        .map(|(method, l)| {
            let drops: Vec<f64> = l.iter().map(|v| 100.0 * (v - best) / best.abs()).collect();
            let n = drops.len() as f64;
            let mean = drops.iter().sum::<f64>() / n;
            let ci95 = if drops.len() < 2 {
                None
            } else {
                let var = drops.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
                let t = StudentsT::new(0.0, 1.0, n - 1.0)
                    .map_err(|e| Error::domain(e.to_string()))?
                    .inverse_cdf(0.975);
                Some(t * (var / n).sqrt())
            };
            Ok(DropRow {
                method: method.clone(),
                drops,
                mean,
                ci95,
            })
        })
        .collect()
}
