//! Experiment drivers shared by the command-line front end and the
//! acceptance suite: data loading, per-seed training with checkpoints,
//! gradient-mode comparison, β sweeps and representation metrics.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::{save_model, Container};
use crate::config::{DataConfig, DataSource, EvalConfig, RunConfig};
use crate::data::{
    extract_whitened_patches, import_patch_archive, load_mnist_dir, synth_sparse_dataset,
    DatasetSplit, PatchOptions, PatchReport, MNIST_SIDE,
};
use crate::error::{Error, Result};
use crate::metrics::{
    dead_neuron_fraction, extract_representations, knn_accuracy, lifetime_sparsity, percent_drop,
    shattering_dim, DropRow, FeatureKind,
};
use crate::models::{GradMode, LinearVae, ModelSpec};
use crate::numkit::{Matrix, RngStream};
use crate::sparsecode::{dict_learn, DictLearnOutcome, SparseCodeConfig};
use crate::train::{train_from_state, Schedules, TrainState};

const INIT_STREAM: u64 = 0x696e_6974;
const DATA_STREAM: u64 = 0x6461_7461;
const EVAL_STREAM: u64 = 0x6576_616c;

pub const STATE_FILE: &str = "state.pvck";
pub const MODEL_FILE: &str = "model.pvck";
pub const ABORT_FILE: &str = "abort.pvck";
pub const LOG_FILE: &str = "log.csv";

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub patch_report: Option<PatchReport>,
}

fn trim(split: DatasetSplit, n: Option<usize>) -> DatasetSplit {
    match n {
        Some(n) if n < split.len() => split.head(n),
        _ => split,
    }
}

/// Loads the training and validation splits described by `data`.
pub fn load_splits(data: &DataConfig) -> Result<Splits> {
    data.validate()?;
    let mut rng = RngStream::new(data.seed, DATA_STREAM);
    let (train, val, patch_report) = match data.source {
        DataSource::Mnist => {
            let (t, v) = load_mnist_dir(&data.mnist_dir())?;
            (t, v, None)
        }
        DataSource::Cache => {
            let t = import_patch_archive(data.train_cache.as_deref().expect("validated"))?;
            let v = import_patch_archive(data.val_cache.as_deref().expect("validated"))?;
            (t, v, None)
        }
        DataSource::Patches => {
            let (images_t, images_v) = load_mnist_dir(&data.mnist_dir())?;
            let opts = &data.patches;
            let mut rt = rng.derive(&[0]);
            let (t, transform, report) =
                extract_whitened_patches(&images_t, MNIST_SIDE, MNIST_SIDE, opts, None, &mut rt)?;
            let val_opts = PatchOptions {
                count: data.n_val.unwrap_or(opts.count / 5).max(1),
                ..opts.clone()
            };
            let mut rv = rng.derive(&[1]);
            let (v, _, _) = extract_whitened_patches(
                &images_v,
                MNIST_SIDE,
                MNIST_SIDE,
                &val_opts,
                Some(&transform),
                &mut rv,
            )?;
            (t, v, Some(report))
        }
        DataSource::Synthetic => {
            let s = &data.synth;
            let (all, _) =
                synth_sparse_dataset(s.input_dim, s.atoms, s.active, s.samples, s.noise, &mut rng)?;
            let n_val = data.n_val.unwrap_or(s.samples / 10).max(1);
            let cut = s.samples - n_val;
            let idx: Vec<usize> = (0..s.samples).collect();
            (all.subset(&idx[..cut]), all.subset(&idx[cut..]), None)
        }
    };
    if train.dim() != val.dim() {
        return Err(Error::data(format!(
            "training samples have {} features but validation samples have {}",
            train.dim(),
            val.dim()
        )));
    }
    Ok(Splits {
        train: trim(train, data.n_train),
        val: trim(
            val,
            if data.source == DataSource::Patches {
                None
            } else {
                data.n_val
            },
        ),
        patch_report,
    })
}

/// Freshly initialized model for `seed`.
pub fn init_model(spec: ModelSpec, seed: u64) -> Result<LinearVae> {
    LinearVae::new(spec, &mut RngStream::new(seed, INIT_STREAM))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub run: String,
    pub family: String,
    pub encoder: String,
    pub mode: String,
    pub latent_dim: usize,
    pub beta: f64,
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub initial_val_nelbo: f64,
    pub best_val_nelbo: f64,
    pub val_mse: f64,
    pub val_kl: f64,
}

fn summarize(run: &str, state: &TrainState, val: &Matrix) -> Result<RunSummary> {
    let spec = state.best_model.spec();
    let report = state.best_model.loss_exact(val)?;
    Ok(RunSummary {
        run: run.to_string(),
        family: spec.family.name().into(),
        encoder: format!("{:?}", spec.encoder).to_lowercase(),
        mode: spec.grad_mode.name().into(),
        latent_dim: spec.latent_dim,
        beta: spec.beta,
        seed: state.seed,
        epochs: state.epoch,
        best_epoch: state.best_epoch,
        initial_val_nelbo: state.initial_val_nelbo,
        best_val_nelbo: state.best_val_nelbo,
        val_mse: report.recon,
        val_kl: report.kl,
    })
}

/// Writes `rows` as CSV with a header row.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::data(format!("{}: {other:?}", path.display())),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// One training run. With `dir`, the state is checkpointed after every
/// epoch, the best model and epoch log are written, and `resume` continues
/// from an existing state checkpoint.
pub fn train_seed(
    run: &str,
    spec: ModelSpec,
    splits: &Splits,
    schedule: &Schedules,
    seed: u64,
    dir: Option<&Path>,
    resume: bool,
) -> Result<(TrainState, RunSummary)> {
    spec.validate()?;
    let (tx, vx) = (splits.train.samples(), splits.val.samples());
    if spec.input_dim != tx.cols() {
        return Err(Error::data(format!(
            "model expects {} inputs but the data has {}",
            spec.input_dim,
            tx.cols()
        )));
    }
    if let Some(d) = dir {
        create_dir(d)?;
    }
    let state = match dir.map(|d| d.join(STATE_FILE)) {
        Some(p) if resume && p.exists() => {
            let s = TrainState::from_container(&Container::read(&p)?)?;
            if s.model.spec() != &spec || s.seed != seed {
                return Err(Error::State(format!(
                    "{} was written for a different model or seed",
                    p.display()
                )));
            }
            s
        }
        _ => TrainState::new(init_model(spec, seed)?, vx, seed)?,
    };
    let outcome = train_from_state(state, tx, vx, schedule, |s| match dir {
        Some(d) => {
            s.to_container().write(&d.join(STATE_FILE))?;
            write_csv(&d.join(LOG_FILE), &s.log)
        }
        None => Ok(()),
    });
    let state = match outcome {
        Ok(s) => s,
        Err(Error::NonFinite {
            epoch,
            step,
            detail,
            snapshot,
        }) => {
            if let (Some(d), Some(m)) = (dir, snapshot.as_deref()) {
                save_model(&d.join(ABORT_FILE), m)?;
            }
            return Err(Error::NonFinite {
                epoch,
                step,
                detail,
                snapshot,
            });
        }
        Err(e) => return Err(e),
    };
    if let Some(d) = dir {
        save_model(&d.join(MODEL_FILE), &state.best_model)?;
        write_csv(&d.join(LOG_FILE), &state.log)?;
    }
    let summary = summarize(run, &state, vx)?;
    Ok((state, summary))
}

/// A training job: run label, model spec, seed, output directory.
#[derive(Clone, Debug)]
pub struct Job {
    pub run: String,
    pub spec: ModelSpec,
    pub seed: u64,
    pub dir: Option<PathBuf>,
}

/// Runs `jobs` with at most `parallel` running concurrently; results keep job order.
pub fn run_jobs(
    jobs: &[Job],
    splits: &Splits,
    schedule: &Schedules,
    parallel: usize,
    resume: bool,
) -> Result<Vec<(TrainState, RunSummary)>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|e| Error::State(e.to_string()))?;
    pool.install(|| {
        jobs.par_iter()
            .map(|j| {
                train_seed(
                    &j.run,
                    j.spec.clone(),
                    splits,
                    schedule,
                    j.seed,
                    j.dir.as_deref(),
                    resume,
                )
            })
            .collect()
    })
}

fn job_dir(out: Option<&Path>, run: &str, seed: u64) -> Option<PathBuf> {
    out.map(|o| o.join(run).join(format!("seed{seed}")))
}

/// Trains the configured model once per seed.
pub fn train_config(
    cfg: &RunConfig,
    splits: &Splits,
    out: Option<&Path>,
    resume: bool,
) -> Result<Vec<(TrainState, RunSummary)>> {
    let spec = cfg.model.spec(splits.train.dim());
    let run = format!("{}-{}", spec.family.name(), spec.grad_mode.name());
    let jobs: Vec<Job> = cfg
        .seeds
        .iter()
        .map(|&seed| Job {
            run: run.clone(),
            spec: spec.clone(),
            seed,
            dir: job_dir(out, &run, seed),
        })
        .collect();
    run_jobs(&jobs, splits, &cfg.schedule, cfg.jobs, resume)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradComparison {
    pub runs: Vec<RunSummary>,
    pub drops: Vec<DropRow>,
}

/// Trains every (mode, seed) pair and tabulates percent drops of the best
/// validation NELBO.
pub fn compare_grads(
    cfg: &RunConfig,
    splits: &Splits,
    out: Option<&Path>,
) -> Result<GradComparison> {
    if cfg.modes.is_empty() {
        return Err(Error::config("modes must list at least one gradient mode"));
    }
    let mut jobs = Vec::new();
    for &mode in &cfg.modes {
        let mut spec = cfg.model.spec(splits.train.dim());
        spec.grad_mode = mode;
        let run = format!("{}-{}", spec.family.name(), mode.name());
        for &seed in &cfg.seeds {
            jobs.push(Job {
                run: run.clone(),
                spec: spec.clone(),
                seed,
                dir: job_dir(out, &run, seed),
            });
        }
    }
    let runs: Vec<RunSummary> = run_jobs(&jobs, splits, &cfg.schedule, cfg.jobs, false)?
        .into_iter()
        .map(|r| r.1)
        .collect();
    let losses: Vec<(String, Vec<f64>)> = cfg
        .modes
        .iter()
        .map(|m: &GradMode| {
            let l = runs
                .iter()
                .filter(|r| r.mode == m.name())
                .map(|r| r.best_val_nelbo)
                .collect();
            (m.name().to_string(), l)
        })
        .collect();
    Ok(GradComparison {
        drops: percent_drop(&losses)?,
        runs,
    })
}

/// Zero-temperature latent responses of `model` on `x`.
pub fn latent_responses(model: &LinearVae, x: &Matrix, seed: u64) -> Result<Matrix> {
    model.sample_latents(x, &mut RngStream::new(seed, EVAL_STREAM))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub beta: f64,
    pub seed: u64,
    pub nelbo: f64,
    pub mse: f64,
    pub sparsity: f64,
    pub active: f64,
}

/// Trains one model per (β, seed) and measures reconstruction error and
/// mean lifetime sparsity on the validation split.
pub fn beta_sweep(cfg: &RunConfig, splits: &Splits, out: Option<&Path>) -> Result<Vec<SweepPoint>> {
    if cfg.betas.is_empty() {
        return Err(Error::config(
            "betas must list at least one value for a sweep",
        ));
    }
    let mut jobs = Vec::new();
    for &beta in &cfg.betas {
        let mut spec = cfg.model.spec(splits.train.dim());
        spec.beta = beta;
        let run = format!("{}-beta{beta}", spec.family.name());
        for &seed in &cfg.seeds {
            jobs.push(Job {
                run: run.clone(),
                spec: spec.clone(),
                seed,
                dir: job_dir(out, &run, seed),
            });
        }
    }
    let vx = splits.val.samples();
    run_jobs(&jobs, splits, &cfg.schedule, cfg.jobs, false)?
        .into_iter()
        .map(|(state, summary)| {
            let model = &state.best_model;
            let report = model.loss_exact(vx)?;
            let s = lifetime_sparsity(&latent_responses(model, vx, summary.seed)?)?;
            Ok(SweepPoint {
                beta: model.beta(),
                seed: summary.seed,
                nelbo: report.nelbo(),
                mse: report.recon,
                sparsity: s.iter().sum::<f64>() / s.len() as f64,
                active: dead_neuron_fraction(&report.per_latent_kl)?.fraction,
            })
        })
        .collect()
}

/// Seed-averaged sweep points, one per β in first-seen order.
pub fn average_sweep(points: &[SweepPoint]) -> Vec<SweepPoint> {
    let mut betas: Vec<f64> = Vec::new();
    for p in points {
        if !betas.contains(&p.beta) {
            betas.push(p.beta);
        }
    }
    betas
        .into_iter()
        .map(|b| {
            let sel: Vec<&SweepPoint> = points.iter().filter(|p| p.beta == b).collect();
            let n = sel.len() as f64;
            let avg = |f: fn(&SweepPoint) -> f64| sel.iter().map(|p| f(p)).sum::<f64>() / n;
            SweepPoint {
                beta: b,
                seed: u64::MAX,
                nelbo: avg(|p| p.nelbo),
                mse: avg(|p| p.mse),
                sparsity: avg(|p| p.sparsity),
                active: avg(|p| p.active),
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Nelbo,
    Mse,
    Kl,
    Sparsity,
    Active,
    Knn,
    Shatter,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "nelbo" => Metric::Nelbo,
            "mse" => Metric::Mse,
            "kl" => Metric::Kl,
            "sparsity" => Metric::Sparsity,
            "active" => Metric::Active,
            "knn" => Metric::Knn,
            "shatter" => Metric::Shatter,
            other => {
                return Err(Error::config(format!(
                    "unknown metric '{other}' (expected nelbo, mse, kl, sparsity, active, knn, shatter)"
                )))
            }
        })
    }
}

/// Parses a comma-separated metric list.
pub fn parse_metrics(list: &str) -> Result<Vec<Metric>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
}

fn labels_of<'a>(split: &'a DatasetSplit, what: &str) -> Result<&'a [u8]> {
    split
        .labels()
        .ok_or_else(|| Error::data(format!("{what} split has no labels")))
}

/// KNN accuracy for each labeled-set size: the validation split is cut into
/// a labeled pool and a disjoint test half.
pub fn knn_grid(
    model: &LinearVae,
    val: &DatasetSplit,
    eval: &EvalConfig,
    kind: FeatureKind,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    let labels = labels_of(val, "validation")?;
    let pool = eval.knn_pool.min(val.len() / 2);
    if pool == 0 {
        return Err(Error::data("validation split too small for KNN"));
    }
    let mut rng = RngStream::new(seed, EVAL_STREAM).derive(&[1]);
    let reps = extract_representations(model, val.samples(), labels, kind, &mut rng)?;
    let (labeled, test) = (reps.row_range(0, pool), reps.row_range(pool, 2 * pool));
    eval.knn_sizes
        .iter()
        .map(|&n| {
            if n > pool {
                return Err(Error::data(format!(
                    "KNN size {n} exceeds the labeled pool of {pool}"
                )));
            }
            let mut r = rng.derive(&[n as u64]);
            Ok((n, knn_accuracy(&labeled, &test, eval.knn_k, n, &mut r)?))
        })
        .collect()
}

/// Shattering dimensionality with classifiers fit on training representations.
pub fn shatter(
    model: &LinearVae,
    splits: &Splits,
    eval: &EvalConfig,
    kind: FeatureKind,
    seed: u64,
) -> Result<f64> {
    let train = match eval.shatter_train {
        Some(n) if n < splits.train.len() => splits.train.head(n),
        _ => splits.train.clone(),
    };
    let mut rng = RngStream::new(seed, EVAL_STREAM).derive(&[2]);
    let tr = extract_representations(
        model,
        train.samples(),
        labels_of(&train, "training")?,
        kind,
        &mut rng,
    )?;
    let va = extract_representations(
        model,
        splits.val.samples(),
        labels_of(&splits.val, "validation")?,
        kind,
        &mut rng,
    )?;
    shattering_dim(&tr, &va, eval.logistic_l2, eval.logistic_iters)
}

/// Evaluates `model` on the validation split; KNN contributes one row per size.
pub fn evaluate_metrics(
    model: &LinearVae,
    splits: &Splits,
    metrics: &[Metric],
    eval: &EvalConfig,
    seed: u64,
) -> Result<Vec<MetricRow>> {
    let vx = splits.val.samples();
    if vx.cols() != model.input_dim() {
        return Err(Error::data(format!(
            "checkpoint expects {} inputs but the dataset has {}",
            model.input_dim(),
            vx.cols()
        )));
    }
    let report = model.loss_exact(vx)?;
    let kind = FeatureKind::default_for(model.family());
    let mut rows = Vec::new();
    let mut push = |metric: &str, value: f64| {
        rows.push(MetricRow {
            metric: metric.to_string(),
            value,
        })
    };
    for &m in metrics {
        match m {
            Metric::Nelbo => push("nelbo", report.nelbo()),
            Metric::Mse => push("mse", report.recon),
            Metric::Kl => push("kl", report.kl),
            Metric::Sparsity => {
                let s = lifetime_sparsity(&latent_responses(model, vx, seed)?)?;
                push("sparsity", s.iter().sum::<f64>() / s.len() as f64);
            }
            Metric::Active => push(
                "active",
                dead_neuron_fraction(&report.per_latent_kl)?.fraction,
            ),
            Metric::Knn => {
                for (n, acc) in knn_grid(model, &splits.val, eval, kind, seed)? {
                    push(&format!("knn@{n}"), acc);
                }
            }
            Metric::Shatter => push("shatter", shatter(model, splits, eval, kind, seed)?),
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct SelectedCoder {
    pub config: SparseCodeConfig,
    pub outcome: DictLearnOutcome,
    pub val_objective: f64,
}

/// Learns a dictionary for every grid point and keeps the one with the
/// lowest validation objective (evaluated at the schedule's final β).
pub fn select_sparse_coder(
    train: &Matrix,
    val: &Matrix,
    k: usize,
    grid: &[SparseCodeConfig],
    seed: u64,
) -> Result<SelectedCoder> {
    let mut best: Option<SelectedCoder> = None;
    for (i, cfg) in grid.iter().enumerate() {
        let mut rng = RngStream::new(seed, INIT_STREAM).derive(&[i as u64]);
        let outcome = dict_learn(train, k, cfg, &mut rng)?;
        let final_beta = cfg.beta_at(cfg.epochs.saturating_sub(1));
        let eval_cfg = SparseCodeConfig {
            beta: final_beta,
            ..cfg.clone()
        };
        let val_objective = outcome.dictionary.mean_objective(val, &eval_cfg)?;
        if best
            .as_ref()
            .is_none_or(|b| val_objective < b.val_objective)
        {
            best = Some(SelectedCoder {
                config: eval_cfg,
                outcome,
                val_objective,
            });
        }
    }
    best.ok_or_else(|| Error::config("empty hyperparameter grid"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SynthOptions;
    use crate::models::Family;

    fn synth_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data.source = DataSource::Synthetic;
        cfg.data.synth = SynthOptions {
            input_dim: 12,
            atoms: 8,
            active: 2,
            samples: 600,
            noise: 0.05,
        };
        cfg.data.n_val = Some(100);
        cfg.model.latent_dim = 8;
        cfg.schedule.epochs = 3;
        cfg.schedule.batch_size = 50;
        cfg.schedule.lr0 = 0.01;
        cfg.seeds = vec![0, 1];
        cfg
    }

    #[test]
    fn synthetic_splits_are_disjoint_and_sized() {
        let s = load_splits(&synth_cfg().data).unwrap();
        assert_eq!((s.train.len(), s.val.len()), (500, 100));
        assert_eq!(s.train.dim(), 12);
        let again = load_splits(&synth_cfg().data).unwrap();
        assert_eq!(s.train, again.train);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = synth_cfg();
        let splits = load_splits(&cfg.data).unwrap();
        let spec = cfg.model.spec(12);
        let (full, _) =
            train_seed("r", spec.clone(), &splits, &cfg.schedule, 3, None, false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("run");
        std::fs::create_dir_all(&d).unwrap();
        let start = TrainState::new(
            init_model(spec.clone(), 3).unwrap(),
            splits.val.samples(),
            3,
        )
        .unwrap();
        let interrupted = train_from_state(
            start,
            splits.train.samples(),
            splits.val.samples(),
            &cfg.schedule,
            |s| {
                s.to_container().write(&d.join(STATE_FILE))?;
                if s.epoch == 2 {
                    Err(Error::State("interrupted".into()))
                } else {
                    Ok(())
                }
            },
        );
        assert!(interrupted.is_err());
        let (resumed, summary) =
            train_seed("r", spec, &splits, &cfg.schedule, 3, Some(&d), true).unwrap();
        assert_eq!(resumed.model, full.model);
        assert_eq!(resumed.log, full.log);
        assert_eq!(summary.epochs, 3);
        assert!(d.join(MODEL_FILE).exists() && d.join(LOG_FILE).exists());
    }

    #[test]
    fn compare_grads_single_mode_has_zero_best() {
        let mut cfg = synth_cfg();
        cfg.modes = vec![GradMode::Exact];
        cfg.seeds = vec![0];
        let splits = load_splits(&cfg.data).unwrap();
        let c = compare_grads(&cfg, &splits, None).unwrap();
        assert_eq!(c.drops[0].drops, vec![0.0]);
        assert_eq!(c.runs.len(), 1);
    }

    #[test]
    fn parallel_jobs_match_serial() {
        let mut cfg = synth_cfg();
        let splits = load_splits(&cfg.data).unwrap();
        let serial = train_config(&cfg, &splits, None, false).unwrap();
        cfg.jobs = 2;
        let parallel = train_config(&cfg, &splits, None, false).unwrap();
        for (a, b) in serial.iter().zip(&parallel) {
            assert_eq!(a.1, b.1);
        }
    }

    #[test]
    fn metric_list_parsing_and_rows() {
        assert_eq!(
            parse_metrics("sparsity,active").unwrap(),
            vec![Metric::Sparsity, Metric::Active]
        );
        assert!(parse_metrics("sparsity,bogus").is_err());
        let cfg = synth_cfg();
        let splits = load_splits(&cfg.data).unwrap();
        let model = init_model(cfg.model.spec(12), 0).unwrap();
        let rows = evaluate_metrics(
            &model,
            &splits,
            &[Metric::Sparsity, Metric::Active],
            &cfg.eval,
            0,
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        let mut g = cfg.model.spec(12);
        g.family = Family::Gaussian;
        g.input_dim = 5;
        let wrong = init_model(g, 0).unwrap();
        assert!(evaluate_metrics(&wrong, &splits, &[Metric::Nelbo], &cfg.eval, 0).is_err());
    }

    #[test]
    fn sweep_averages_per_beta() {
        let pts = vec![
            SweepPoint {
                beta: 1.0,
                seed: 0,
                nelbo: 1.0,
                mse: 2.0,
                sparsity: 0.2,
                active: 1.0,
            },
            SweepPoint {
                beta: 1.0,
                seed: 1,
                nelbo: 3.0,
                mse: 4.0,
                sparsity: 0.4,
                active: 0.5,
            },
            SweepPoint {
                beta: 2.0,
                seed: 0,
                nelbo: 5.0,
                mse: 6.0,
                sparsity: 0.6,
                active: 0.0,
            },
        ];
        let avg = average_sweep(&pts);
        assert_eq!(avg.len(), 2);
        assert_eq!((avg[0].mse, avg[0].active), (3.0, 0.75));
        assert!((avg[0].sparsity - 0.3).abs() < 1e-15);
    }
}
