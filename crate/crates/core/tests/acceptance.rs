//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line before asserting.

use std::io::Write;
use std::path::PathBuf;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use statrs::distribution::{ChiSquared, ContinuousCDF};

use pvae::config::{DataConfig, DataSource, EvalConfig, RunConfig};
use pvae::data::PatchOptions;
use pvae::dists::{adaptive_n_exp, poisson_rsample};
use pvae::experiment::{
    average_sweep, beta_sweep, knn_grid, load_splits, run_jobs, shatter, Job, Splits,
};
use pvae::metrics::{dead_neuron_fraction, percent_drop, FeatureKind};
use pvae::models::{EncoderKind, Estimator, Family, GradMode, Gradients, LinearVae, ModelSpec};
use pvae::numkit::poisson_pmf;
use pvae::sparsecode::{dict_learn, ista_infer_traced, match_atoms, Solver, SparseCodeConfig};
use pvae::train::Schedules;
use pvae::{Matrix, RngStream};

const PATCH_COUNT: usize = 20_000;
const PATCH_LATENTS: usize = 512;
const PATCH_EPOCHS: usize = 20;

const GEOMETRY_SEEDS: [u64; 3] = [0, 1, 2];
const GEOMETRY_HIDDEN: usize = 512;
const GEOMETRY_EPOCHS: usize = 10;
const GEOMETRY_SHATTER_TRAIN: usize = 5000;

/// Writes to the stdout handle directly so the line survives output capture.
fn report(id: usize, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {id:>2} {name}: {verdict} ({detail})");
}

fn data_root() -> PathBuf {
    std::env::var_os("PVAE_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

fn draws(lambda: f64, n: usize, temperature: f64, seed: u64) -> Vec<f64> {
    let rates = Matrix::filled(1, n, lambda);
    let n_exp = adaptive_n_exp(lambda).unwrap();
    poisson_rsample(&rates, n_exp, temperature, &mut RngStream::new(seed, 0))
        .unwrap()
        .into_counts()
        .into_vec()
}

/// Chi-square p-value of integer `counts` against the Poisson pmf; bins with
/// expected count below 5 are pooled into the tails.
fn chi_square_p(counts: &[f64], lambda: f64) -> f64 {
    let n = counts.len() as f64;
    let kmax = counts.iter().fold(0.0f64, |a, &b| a.max(b)) as usize + 1;
    let mut observed = vec![0.0; kmax + 1];
    for &c in counts {
        observed[c as usize] += 1.0;
    }
    let expected: Vec<f64> = (0..=kmax)
        .map(|k| n * poisson_pmf(k as u64, lambda).unwrap())
        .collect();
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let (mut o, mut e) = (0.0, 0.0);
    for k in 0..=kmax {
        o += observed[k];
        e += expected[k];
        if e >= 5.0 {
            bins.push((o, e));
            o = 0.0;
            e = 0.0;
        }
    }
    // upper tail beyond kmax
    let tail = n - expected.iter().sum::<f64>();
    e += tail.max(0.0);
    if let Some(last) = bins.last_mut() {
        last.0 += o;
        last.1 += e;
    }
    let stat: f64 = bins.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    let df = (bins.len() - 1) as f64;
    1.0 - ChiSquared::new(df).unwrap().cdf(stat)
}

#[test]
fn criterion_01_sampler_fidelity() {
    let t0 = Instant::now();
    let n = 100_000;
    let mut pass = true;
    let mut detail = Vec::new();
    for (i, lambda) in [0.5, 1.0, 4.0, 16.0].into_iter().enumerate() {
        let c = draws(lambda, n, 0.0, 100 + i as u64);
        let p = chi_square_p(&c, lambda);
        let mean = c.iter().sum::<f64>() / n as f64;
        let ok = p > 1e-3 && (mean - lambda).abs() <= 3.0 * (lambda / n as f64).sqrt();
        pass &= ok;
        detail.push(format!("λ={lambda}: p={p:.3} mean={mean:.4}"));
    }
    let secs = t0.elapsed().as_secs_f64();
    pass &= secs < 10.0;
    report(
        1,
        "sampler fidelity",
        pass,
        &format!("{}; {secs:.1}s", detail.join(", ")),
    );
    assert!(pass);
}

#[test]
fn criterion_02_relaxation_convergence() {
    let t0 = Instant::now();
    let n = 100_000;
    let kmax = 20;
    let pmf: Vec<f64> = (0..=kmax)
        .map(|k| poisson_pmf(k as u64, 1.0).unwrap())
        .collect();
    let tv: Vec<f64> = [1.0, 0.1, 0.01]
        .iter()
        .map(|&t| {
            let mut hist = vec![0.0; kmax + 1];
            let mut beyond = 0.0;
            for z in draws(1.0, n, t, 7) {
                let k = z.round().max(0.0) as usize;
                if k <= kmax {
                    hist[k] += 1.0 / n as f64;
                } else {
                    beyond += 1.0 / n as f64;
                }
            }
            let tail = 1.0 - pmf.iter().sum::<f64>();
            0.5 * (hist
                .iter()
                .zip(&pmf)
                .map(|(h, p)| (h - p).abs())
                .sum::<f64>()
                + (beyond - tail).abs())
        })
        .collect();
    let secs = t0.elapsed().as_secs_f64();
    let pass = tv[0] > tv[1] && tv[1] > tv[2] && tv[2] < 0.02 && secs < 30.0;
    report(
        2,
        "relaxation convergence",
        pass,
        &format!(
            "TV at T=1,0.1,0.01: {:.4}, {:.4}, {:.4}; {secs:.1}s",
            tv[0], tv[1], tv[2]
        ),
    );
    assert!(pass);
}

const FAMILIES: [Family; 3] = [Family::Poisson, Family::Gaussian, Family::Laplace];

/// Random lin|lin instance `i`: M = 8, K = 12, family cycling through all three.
fn instance(i: u64) -> (LinearVae, Matrix) {
    let family = FAMILIES[i as usize % 3];
    let mut spec = ModelSpec::new(family, 8, 12);
    spec.encoder = EncoderKind::Linear;
    let mut rng = RngStream::new(1000 + i, 1);
    spec.beta = rng.uniform_in(0.2, 2.0);
    let mut vae = LinearVae::new(spec, &mut rng).unwrap();
    if family == Family::Poisson {
        let lr: Vec<f64> = (0..12).map(|_| rng.uniform_in(-1.5, 0.5)).collect();
        vae.set_log_prior_rates(&lr).unwrap();
    }
    let x = Matrix::from_fn(4, 8, |_, _| rng.uniform_in(-1.0, 1.0));
    (vae, x)
}

fn central_difference(vae: &LinearVae, x: &Matrix, h: f64) -> Gradients {
    let mut g = Gradients::zeros_like(vae);
    for (t, out) in g.tensors.iter_mut().enumerate() {
        for e in 0..out.len() {
            let mut plus = vae.clone();
            plus.tensors_mut()[t].as_mut_slice()[e] += h;
            let mut minus = vae.clone();
            minus.tensors_mut()[t].as_mut_slice()[e] -= h;
            let d = plus.loss_exact(x).unwrap().total - minus.loss_exact(x).unwrap().total;
            out.as_mut_slice()[e] = d / (2.0 * h);
        }
    }
    g
}

#[test]
fn criterion_03_gradient_exactness() {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let (vae, x) = instance(i);
        let (_, g) = vae.grad_exact(&x).unwrap();
        let fd = central_difference(&vae, &x, 1e-5);
        for (a, n) in g.tensors.iter().zip(&fd.tensors) {
            let scale = a.frobenius_norm().max(n.frobenius_norm());
            if scale > 0.0 {
                worst = worst.max(a.sub(n).unwrap().frobenius_norm() / scale);
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst < 1e-5 && secs < 60.0;
    report(
        3,
        "gradient exactness",
        pass,
        &format!("max relative error {worst:.2e}; {secs:.1}s"),
    );
    assert!(pass);
}

/// Sampled loss with exact posterior draws: integer Poisson counts, or
/// reparameterized continuous samples.
fn sampled_loss(vae: &LinearVae, x: &Matrix, n: usize, rng: &mut RngStream) -> f64 {
    let est = match vae.family() {
        Family::Poisson => Estimator::StraightThrough { n_samples: n },
        _ => Estimator::MonteCarlo {
            n_samples: n,
            temperature: 0.0,
        },
    };
    vae.evaluate(x, est, vae.beta(), Some(rng), false)
        .unwrap()
        .0
        .total
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn criterion_04_estimator_consistency() {
    let t0 = Instant::now();
    let (samples, groups) = (10_000, 100);
    let mut min_cos = f64::INFINITY;
    let mut worst_z: f64 = 0.0;
    let mut relaxed_bias: f64 = 0.0;
    for i in 0..50 {
        let (vae, x) = instance(i);
        let (exact, g) = vae.grad_exact(&x).unwrap();
        let mut rng = RngStream::new(2000 + i, 4);
        let (_, mc) = vae.grad_mc(&x, samples, 0.05, &mut rng).unwrap();
        min_cos = min_cos.min(mc.cosine(&g));
        let losses: Vec<f64> = (0..groups)
            .map(|_| sampled_loss(&vae, &x, samples / groups, &mut rng))
            .collect();
        let (mean, se) = mean_and_se(&losses);
        worst_z = worst_z.max((mean - exact.total).abs() / se);
        if vae.family() == Family::Poisson {
            let relaxed = vae.loss_mc(&x, samples, 0.05, &mut rng).unwrap().total;
            relaxed_bias = relaxed_bias.max((relaxed / exact.total - 1.0).abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = min_cos > 0.99 && worst_z <= 3.0 && secs < 120.0;
    report(
        4,
        "estimator consistency",
        pass,
        &format!(
            "min cosine {min_cos:.4}, worst |Δloss|/SE {worst_z:.2}, relaxed T=0.05 loss bias up to {:.2}%; {secs:.1}s",
            100.0 * relaxed_bias
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_sparse_recovery() {
    let _guard = heavy();
    let t0 = Instant::now();
    let mut rng = RngStream::new(3, 0);
    let (data, truth) =
        pvae::data::synth_sparse_dataset(64, 100, 3, 50_000, 0.01, &mut rng).unwrap();
    let cfg = SparseCodeConfig {
        solver: Solver::Ista,
        nonnegative: true,
        beta: 0.1,
        lr: 1.0,
        n_iters: 100,
        batch_size: 256,
        epochs: 12,
        ..SparseCodeConfig::default()
    };
    let out = dict_learn(data.samples(), 100, &cfg, &mut rng.derive(&[1])).unwrap();
    let cos = match_atoms(truth.matrix(), out.dictionary.matrix()).unwrap();
    let hits = cos.iter().filter(|c| **c > 0.9).count();
    let secs = t0.elapsed().as_secs_f64();
    let pass = hits >= 90 && secs < 1200.0;
    report(
        8,
        "sparse recovery",
        pass,
        &format!("{hits}/100 atoms at |cos| > 0.9; {secs:.1}s"),
    );
    assert!(pass);
}

#[test]
fn criterion_11_ista_monotonicity() {
    let mut violations = 0;
    let mut steps = 0;
    for i in 0..100 {
        let mut rng = RngStream::new(i, 11);
        let m = 4 + rng.below(13);
        let k = 2 + rng.below(30);
        let phi = Matrix::from_fn(m, k, |_, _| rng.normal());
        let x = Matrix::from_fn(1 + rng.below(8), m, |_, _| rng.normal());
        let cfg = SparseCodeConfig {
            solver: Solver::Ista,
            beta: rng.uniform_in(0.01, 1.0),
            nonnegative: rng.below(2) == 0,
            n_iters: 200,
            tol: 0.0,
            ..SparseCodeConfig::default()
        };
        let (_, trace) = ista_infer_traced(&x, &phi, &cfg).unwrap();
        for w in trace.objectives.windows(2) {
            steps += 1;
            if w[1] > w[0] + 1e-12 * w[0].abs().max(1.0) {
                violations += 1;
            }
        }
    }
    let pass = violations == 0;
    report(
        11,
        "ISTA monotonicity",
        pass,
        &format!("{violations} increases over {steps} steps on 100 problems"),
    );
    assert!(pass);
}

fn mnist_dir() -> Option<PathBuf> {
    let dir = data_root().join("mnist");
    dir.join("train-images-idx3-ubyte").exists().then_some(dir)
}

fn mnist_config(n_train: Option<usize>) -> Option<DataConfig> {
    let dir = mnist_dir()?;
    Some(DataConfig {
        source: DataSource::Mnist,
        dir: Some(dir),
        n_train,
        ..DataConfig::default()
    })
}

fn schedules(epochs: usize) -> Schedules {
    Schedules {
        epochs,
        lr0: 0.005,
        batch_size: 256,
        ..Schedules::default()
    }
}

fn jobs_for(spec: &ModelSpec, tag: &str, seeds: &[u64]) -> Vec<Job> {
    seeds
        .iter()
        .map(|&seed| Job {
            run: tag.to_string(),
            spec: spec.clone(),
            seed,
            dir: None,
        })
        .collect()
}

fn parallelism() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn is_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] > w[0])
}

/// Serializes the long training runs so their timings are not inflated by
/// each other on small machines.
fn heavy() -> MutexGuard<'static, ()> {
    static HEAVY: Mutex<()> = Mutex::new(());
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

const GRAD_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const GRAD_LATENTS: usize = 512;
const GRAD_EPOCHS: usize = 16;
const GRAD_MODES: [GradMode; 3] = [
    GradMode::Exact,
    GradMode::MonteCarlo,
    GradMode::StraightThrough,
];

struct FamilyRuns {
    nelbo: Vec<f64>,
    active: Vec<f64>,
}

impl FamilyRuns {
    fn mean_nelbo(&self) -> f64 {
        self.nelbo.iter().sum::<f64>() / self.nelbo.len() as f64
    }

    fn mean_active(&self) -> f64 {
        self.active.iter().sum::<f64>() / self.active.len() as f64
    }
}

/// MNIST lin|lin runs shared by the estimator, active-latent and NELBO criteria.
struct MnistRuns {
    poisson: Vec<(GradMode, FamilyRuns)>,
    gaussian: FamilyRuns,
    poisson_secs: f64,
    gaussian_secs: f64,
}

impl MnistRuns {
    fn poisson(&self, mode: GradMode) -> &FamilyRuns {
        &self.poisson.iter().find(|(m, _)| *m == mode).unwrap().1
    }
}

fn train_family(family: Family, mode: GradMode, splits: &Splits) -> FamilyRuns {
    let mut spec = ModelSpec::new(family, splits.train.dim(), GRAD_LATENTS);
    spec.encoder = EncoderKind::Linear;
    spec.grad_mode = mode;
    let tag = format!("{}-{}", family.name(), mode.name());
    let jobs = jobs_for(&spec, &tag, &GRAD_SEEDS);
    let runs = run_jobs(&jobs, splits, &schedules(GRAD_EPOCHS), parallelism(), false).unwrap();
    let active = runs
        .iter()
        .map(|(state, _)| {
            let kl = state
                .best_model
                .loss_exact(splits.val.samples())
                .unwrap()
                .per_latent_kl;
            dead_neuron_fraction(&kl).unwrap().fraction
        })
        .collect();
    FamilyRuns {
        nelbo: runs.iter().map(|(_, s)| s.best_val_nelbo).collect(),
        active,
    }
}

fn mnist_runs() -> Option<&'static MnistRuns> {
    static RUNS: OnceLock<Option<MnistRuns>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let splits = load_splits(&mnist_config(None)?).unwrap();
        let _guard = heavy();
        let t0 = Instant::now();
        let poisson = GRAD_MODES
            .iter()
            .map(|&mode| (mode, train_family(Family::Poisson, mode, &splits)))
            .collect();
        let poisson_secs = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let gaussian = train_family(Family::Gaussian, GradMode::Exact, &splits);
        Some(MnistRuns {
            poisson,
            gaussian,
            poisson_secs,
            gaussian_secs: t1.elapsed().as_secs_f64(),
        })
    })
    .as_ref()
}

fn require_mnist(id: usize, name: &str) -> &'static MnistRuns {
    mnist_runs().unwrap_or_else(|| {
        report(id, name, false, "MNIST files not found");
        panic!("MNIST files not found under {}", data_root().display());
    })
}

#[test]
fn criterion_05_estimator_comparison() {
    let name = "EX/MC/ST comparison";
    let runs = require_mnist(5, name);
    let losses: Vec<(String, Vec<f64>)> = runs
        .poisson
        .iter()
        .map(|(m, r)| (m.name().to_string(), r.nelbo.clone()))
        .collect();
    let drops = percent_drop(&losses).unwrap();
    let mean = |m: GradMode| drops.iter().find(|d| d.method == m.name()).unwrap().mean;
    let (ex, mc, st) = (
        mean(GradMode::Exact),
        mean(GradMode::MonteCarlo),
        mean(GradMode::StraightThrough),
    );
    let secs = runs.poisson_secs;
    let pass = (ex - mc).abs() <= 2.0 && st >= 5.0 && secs <= 7200.0;
    report(
        5,
        name,
        pass,
        &format!(
            "percent drop EX {ex:.2}, MC {mc:.2}, ST {st:.2}; {GRAD_EPOCHS} epochs; {secs:.0}s"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_06_active_latents() {
    let name = "active latents";
    let runs = require_mnist(6, name);
    let p = runs.poisson(GradMode::Exact).mean_active();
    let g = runs.gaussian.mean_active();
    let pass = p >= 0.40 && g <= 0.10;
    report(
        6,
        name,
        pass,
        &format!("active fraction P {p:.3}, G {g:.3}"),
    );
    assert!(pass);
}

#[test]
fn criterion_07_nelbo_targets() {
    let name = "NELBO targets";
    let runs = require_mnist(7, name);
    let p = runs.poisson(GradMode::Exact).mean_nelbo();
    let st = runs.poisson(GradMode::StraightThrough).mean_nelbo();
    let g = runs.gaussian.mean_nelbo();
    let near = |v: f64, target: f64| (v / target - 1.0).abs() <= 0.15;
    let pass = near(p, 41.5) && near(g, 40.6) && g < p && p < st;
    report(
        7,
        name,
        pass,
        &format!(
            "NELBO G {g:.2} < P {p:.2} < ST {st:.2}; Gaussian runs {:.0}s",
            runs.gaussian_secs
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_rate_distortion_direction() {
    let Some(mut data) = mnist_config(None) else {
        report(
            9,
            "rate-distortion direction",
            false,
            "MNIST files not found",
        );
        panic!("MNIST files not found under {}", data_root().display());
    };
    data.source = DataSource::Patches;
    data.patches = PatchOptions {
        patch: 16,
        count: PATCH_COUNT,
        ..PatchOptions::default()
    };
    data.n_val = Some(PATCH_COUNT / 5);
    let splits = load_splits(&data).unwrap();
    let _guard = heavy();
    let t0 = Instant::now();
    let mut cfg = RunConfig {
        data,
        seeds: vec![0, 1, 2],
        betas: vec![0.2, 0.6, 1.0, 2.0],
        schedule: schedules(PATCH_EPOCHS),
        jobs: parallelism(),
        ..RunConfig::default()
    };
    cfg.model.family = Family::Poisson;
    cfg.model.encoder = EncoderKind::Linear;
    cfg.model.latent_dim = PATCH_LATENTS;
    cfg.model.grad_mode = GradMode::Exact;
    let mean = average_sweep(&beta_sweep(&cfg, &splits, None).unwrap());
    let sparsity: Vec<f64> = mean.iter().map(|p| p.sparsity).collect();
    let mse: Vec<f64> = mean.iter().map(|p| p.mse).collect();
    let secs = t0.elapsed().as_secs_f64();
    let pass = is_increasing(&sparsity) && is_increasing(&mse);
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.3}"))
            .collect::<Vec<_>>()
            .join(" < ")
    };
    report(
        9,
        "rate-distortion direction",
        pass,
        &format!(
            "β 0.2..2.0: sparsity {}; MSE {}; {secs:.0}s",
            fmt(&sparsity),
            fmt(&mse)
        ),
    );
    assert!(pass);
}

/// Mean over seeds of (KNN accuracy at 200 labels, shattering dimensionality).
fn geometry(family: Family, splits: &Splits) -> (f64, f64) {
    let mut spec = ModelSpec::new(family, 784, 10);
    spec.encoder = EncoderKind::Mlp1;
    spec.hidden_dim = GEOMETRY_HIDDEN;
    spec.grad_mode = GradMode::Exact;
    let jobs = jobs_for(&spec, family.name(), &GEOMETRY_SEEDS);
    let eval = EvalConfig {
        knn_sizes: vec![200],
        shatter_train: Some(GEOMETRY_SHATTER_TRAIN),
        ..EvalConfig::default()
    };
    let runs = run_jobs(
        &jobs,
        splits,
        &schedules(GEOMETRY_EPOCHS),
        parallelism(),
        false,
    )
    .unwrap();
    let n = runs.len() as f64;
    let (mut knn, mut shat) = (0.0, 0.0);
    for ((state, _), seed) in runs.iter().zip(GEOMETRY_SEEDS) {
        let model = &state.best_model;
        let kind = FeatureKind::default_for(family);
        knn += knn_grid(model, &splits.val, &eval, kind, seed).unwrap()[0].1 / n;
        shat += shatter(model, splits, &eval, kind, seed).unwrap() / n;
    }
    (knn, shat)
}

#[test]
fn criterion_10_geometry_direction() {
    let Some(data) = mnist_config(None) else {
        report(10, "geometry direction", false, "MNIST files not found");
        panic!("MNIST files not found under {}", data_root().display());
    };
    let splits = load_splits(&data).unwrap();
    let _guard = heavy();
    let t0 = Instant::now();
    let (knn_p, shat_p) = geometry(Family::Poisson, &splits);
    let (knn_g, shat_g) = geometry(Family::Gaussian, &splits);
    let secs = t0.elapsed().as_secs_f64();
    let pass = knn_p >= knn_g + 0.05 && shat_p > shat_g;
    report(
        10,
        "geometry direction",
        pass,
        &format!("KNN@200 P {knn_p:.3} vs G {knn_g:.3}; shattering P {shat_p:.3} vs G {shat_g:.3}; {secs:.0}s"),
    );
    assert!(pass);
}
