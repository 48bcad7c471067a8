use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use pvae::checkpoint::{load_dictionary, model_from_container, save_dictionary, Container};
use pvae::config::RunConfig;
use pvae::data::export_split;
use pvae::experiment::{
    average_sweep, beta_sweep, compare_grads as run_comparison, evaluate_metrics, load_splits,
    parse_metrics, select_sparse_coder, train_config, write_csv, Splits,
};
use pvae::metrics::DropRow;
use pvae::models::GradMode;
use pvae::sparsecode::{default_grid, lca_on_fixed_dictionary, Solver};
use pvae::{Error, Result};

use crate::tiles::{render_grid, tile_order, tile_shape, write_image};
use crate::{Common, SolverArg};

/// Loads the configuration (or defaults) and applies command-line overrides.
fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = &common.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(j) = common.jobs {
        cfg.jobs = j;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_out(dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    Ok(dir.to_path_buf())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn prep(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let Splits {
        train,
        val,
        patch_report,
    } = load_splits(&cfg.data)?;
    let out = create_out(&cfg.out)?;
    let train_sum = export_split(&train, &out.join("train.pvlb"))?;
    let val_sum = export_split(&val, &out.join("val.pvlb"))?;
    let report = json!({
        "source": train.meta.source,
        "preprocessing": train.meta.preprocessing,
        "dim": train.dim(),
        "train": { "count": train.len(), "checksum": format!("{train_sum:016x}") },
        "val": { "count": val.len(), "checksum": format!("{val_sum:016x}") },
        "patches": patch_report,
    });
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    write_text(&out.join("prep_report.json"), &text)?;
    println!("{text}");
    Ok(())
}

pub fn train(common: &Common, resume: bool) -> Result<()> {
    let cfg = load_config(common)?;
    let splits = load_splits(&cfg.data)?;
    let out = create_out(&cfg.out)?;
    let summaries: Vec<_> = train_config(&cfg, &splits, Some(&out), resume)?
        .into_iter()
        .map(|r| r.1)
        .collect();
    write_csv(&out.join("summary.csv"), &summaries)?;
    for s in &summaries {
        println!(
            "{} seed {}: best val NELBO {:.4} at epoch {} (initial {:.4})",
            s.run, s.seed, s.best_val_nelbo, s.best_epoch, s.initial_val_nelbo
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct DropCsvRow<'a> {
    method: &'a str,
    mean: f64,
    ci95: Option<f64>,
    drops: String,
}

/// Percent-drop table with aligned columns.
fn drop_table(rows: &[DropRow]) -> String {
    let width = rows
        .iter()
        .map(|r| r.method.len())
        .max()
        .unwrap_or(0)
        .max(6);
    let mut text = format!(
        "{:<width$}  {:>8}  {:>8}  drops\n",
        "method", "mean", "ci95"
    );
    for r in rows {
        let ci = r
            .ci95
            .map_or_else(|| "-".to_string(), |c| format!("{c:.3}"));
        let drops: Vec<String> = r.drops.iter().map(|d| format!("{d:.3}")).collect();
        text.push_str(&format!(
            "{:<width$}  {:>8.3}  {:>8}  {}\n",
            r.method,
            r.mean,
            ci,
            drops.join(" ")
        ));
    }
    text
}

pub fn compare_grads(common: &Common, modes: Option<Vec<String>>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(m) = modes {
        cfg.modes = m
            .iter()
            .map(|s| s.parse::<GradMode>())
            .collect::<Result<_>>()?;
        cfg.validate()?;
    }
    let splits = load_splits(&cfg.data)?;
    let out = create_out(&cfg.out)?;
    let cmp = run_comparison(&cfg, &splits, Some(&out))?;
    write_csv(&out.join("runs.csv"), &cmp.runs)?;
    let rows: Vec<DropCsvRow> = cmp
        .drops
        .iter()
        .map(|r| DropCsvRow {
            method: &r.method,
            mean: r.mean,
            ci95: r.ci95,
            drops: r
                .drops
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(";"),
        })
        .collect();
    write_csv(&out.join("drops.csv"), &rows)?;
    let table = drop_table(&cmp.drops);
    write_text(&out.join("drops.txt"), &table)?;
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct EvalRow<'a> {
    run: &'a str,
    seed: u64,
    metric: String,
    value: f64,
}

/// Run label of a checkpoint: the run and seed directories when present.
fn run_label(path: &Path) -> String {
    let parts: Vec<String> = path
        .parent()
        .into_iter()
        .flat_map(|p| p.iter().rev().take(2))
        .map(|s| s.to_string_lossy().into_owned())
        .collect();
    match parts.as_slice() {
        [seed, run] => format!("{run}/{seed}"),
        [one] => one.clone(),
        _ => path
            .file_stem()
            .map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
    }
}

pub fn eval(common: &Common, checkpoint: &Path, metrics: &str) -> Result<()> {
    let cfg = load_config(common)?;
    let metrics = parse_metrics(metrics)?;
    let model = model_from_container(&Container::read(checkpoint)?)?;
    let splits = load_splits(&cfg.data)?;
    let run = run_label(checkpoint);
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        for r in evaluate_metrics(&model, &splits, &metrics, &cfg.eval, seed)? {
            rows.push(EvalRow {
                run: &run,
                seed,
                metric: r.metric,
                value: r.value,
            });
        }
    }
    let out = create_out(&cfg.out)?;
    write_csv(&out.join("eval.csv"), &rows)?;
    for r in &rows {
        println!("{},{},{},{}", r.run, r.seed, r.metric, r.value);
    }
    Ok(())
}

#[derive(Serialize)]
struct ObjectiveRow {
    epoch: usize,
    beta: f64,
    objective: f64,
}

pub fn sc_train(common: &Common, k: usize, solver: Option<SolverArg>, grid: bool) -> Result<()> {
    let cfg = load_config(common)?;
    let mut sparse = cfg.sparse.clone();
    if let Some(s) = solver {
        sparse.solver = match s {
            SolverArg::Ista => Solver::Ista,
            SolverArg::Lca => Solver::Lca,
        };
    }
    let candidates = if grid {
        default_grid(sparse.solver)
    } else {
        vec![sparse]
    };
    let splits = load_splits(&cfg.data)?;
    let selected = select_sparse_coder(
        splits.train.samples(),
        splits.val.samples(),
        k,
        &candidates,
        cfg.seeds[0],
    )?;
    let out = create_out(&cfg.out)?;
    let meta = json!({
        "config": selected.config,
        "val_objective": selected.val_objective,
        "seed": cfg.seeds[0],
    });
    save_dictionary(
        &out.join("dictionary.pvck"),
        selected.outcome.dictionary.matrix(),
        meta,
    )?;
    let rows: Vec<ObjectiveRow> = selected
        .outcome
        .epoch_objective
        .iter()
        .zip(&selected.outcome.epoch_beta)
        .enumerate()
        .map(|(epoch, (&objective, &beta))| ObjectiveRow {
            epoch,
            beta,
            objective,
        })
        .collect();
    write_csv(&out.join("objective.csv"), &rows)?;
    println!(
        "{} atoms, solver {:?}, lr {}, {} iterations: validation objective {:.6}",
        k,
        selected.config.solver,
        selected.config.lr,
        selected.config.n_iters,
        selected.val_objective
    );
    Ok(())
}

pub fn sc_infer(common: &Common, dictionary: &Path, betas: Option<Vec<f64>>) -> Result<()> {
    let cfg = load_config(common)?;
    let betas = betas.unwrap_or_else(|| cfg.betas.clone());
    if betas.is_empty() {
        return Err(Error::Config(
            "pass --betas or set betas in the configuration".into(),
        ));
    }
    let phi = load_dictionary(dictionary)?;
    let splits = load_splits(&cfg.data)?;
    let points = lca_on_fixed_dictionary(&phi, splits.val.samples(), &betas, &cfg.sparse)?;
    let out = create_out(&cfg.out)?;
    write_csv(&out.join("rate.csv"), &points)?;
    for p in &points {
        println!(
            "beta {}: mse {:.6}, sparsity {:.4}",
            p.beta, p.mse, p.sparsity
        );
    }
    Ok(())
}

pub fn export_dict(
    checkpoint: &Path,
    config: Option<&Path>,
    out: &Path,
    columns: Option<usize>,
    width: Option<usize>,
    height: Option<usize>,
) -> Result<()> {
    let container = Container::read(checkpoint)?;
    let phi = container
        .tensor("dictionary")
        .cloned()
        .ok_or_else(|| Error::Data(format!("{}: no dictionary tensor", checkpoint.display())))?;
    let tile = tile_shape(phi.rows(), width, height)?;
    let kl = match (config, container.spec.is_some()) {
        (Some(c), true) => {
            let cfg = RunConfig::load(c)?;
            let model = model_from_container(&container)?;
            let splits = load_splits(&cfg.data)?;
            if splits.val.dim() != model.input_dim() {
                return Err(Error::Data(format!(
                    "checkpoint expects {} inputs but the dataset has {}",
                    model.input_dim(),
                    splits.val.dim()
                )));
            }
            Some(model.loss_exact(splits.val.samples())?.per_latent_kl)
        }
        _ => None,
    };
    let order = tile_order(phi.cols(), kl.as_deref());
    let img = render_grid(&phi, &order, tile, columns)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_out(dir)?;
    }
    write_image(out, &img)?;
    println!(
        "{} tiles of {}×{} written to {}",
        phi.cols(),
        tile.0,
        tile.1,
        out.display()
    );
    Ok(())
}

pub fn sweep(common: &Common, betas: Option<Vec<f64>>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(b) = betas {
        cfg.betas = b;
        cfg.validate()?;
    }
    let splits = load_splits(&cfg.data)?;
    let out = create_out(&cfg.out)?;
    let points = beta_sweep(&cfg, &splits, Some(&out))?;
    write_csv(&out.join("sweep.csv"), &points)?;
    let mean = average_sweep(&points);
    write_csv(&out.join("sweep_mean.csv"), &mean)?;
    for p in &mean {
        println!(
            "beta {}: nelbo {:.4}, mse {:.4}, sparsity {:.4}, active {:.3}",
            p.beta, p.nelbo, p.mse, p.sparsity, p.active
        );
    }
    Ok(())
}
