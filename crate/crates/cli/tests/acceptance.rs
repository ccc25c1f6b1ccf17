//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. The MNIST criteria download the data on first use.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdebnn_cli::config::{self, RunConfig, Sources};
use sdebnn_cli::fetch::{fetch_mnist, MNIST_URL};
use sdebnn_cli::run::{run_compare, run_eval, run_train, CHECKPOINT, LOG_CSV};
use sdebnn_core::autodiff::{ActivationKind, Tape};
use sdebnn_core::brownian::BrownianPath;
use sdebnn_core::data::{toy_dataset, ToyConfig};
use sdebnn_core::dynamics::{initial_state, DynamicsConfig, ResidualCache, SdeBnnField, Variant};
use sdebnn_core::model::{HeadKind, Model, ModelConfig};
use sdebnn_core::params::{ParamId, ParamSet};
use sdebnn_core::solver::{solve, DriftField, Mode, ScalarDiffusion, SolverConfig};
use sdebnn_core::state::JointState;
use sdebnn_core::tensor::Tensor;
use sdebnn_core::train::{elbo, TrainingLog};
use sdebnn_core::weights::{DriftArch, PriorField};

// Tolerances and scales.
const OU_PATHS: usize = 10_000;
const OU_REL_TOL: f64 = 0.05;
const FD_COORDS: usize = 24;
const FD_REL_TOL: f64 = 1e-3;
const TOY_COVERAGE: f64 = 0.90;
const TOY_RMSE_NOISE_MULTIPLE: f64 = 1.5;
const MNIST_TRAIN: i64 = 5000;
const MNIST_EPOCHS: i64 = 15;
/// Per-epoch log rows use this many test images; the criterion itself is
/// scored on the full test split.
const MNIST_LOG_TEST: i64 = 2000;
const MNIST_ACC: f64 = 0.93;
const CMP_TRAIN: i64 = 768;
const CMP_TEST: i64 = 500;
const CMP_EPOCHS: i64 = 6;
const CMP_SEEDS: [u64; 3] = [0, 1, 2];
const NFE_TAIL: usize = 5;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn workdir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn resolve(preset: &str, flags: &[(&str, toml::Value)]) -> RunConfig {
    config::resolve(Sources {
        preset: Some(preset.into()),
        file: None,
        flags: flags.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
    })
    .expect("acceptance configuration resolves")
}

fn int(v: i64) -> toml::Value {
    toml::Value::Integer(v)
}

fn string(v: &str) -> toml::Value {
    toml::Value::String(v.into())
}

fn mnist_dir() -> Result<PathBuf, String> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    fetch_mnist(&dir, MNIST_URL).map_err(|e| format!("MNIST unavailable: {e}"))?;
    Ok(dir)
}

// 1. Solver: OU moments and midpoint order.
fn solver_correctness() -> Verdict {
    let sigma = 0.2;
    let tape = Tape::<f64>::no_grad();
    let cfg = SolverConfig::default();
    let path = BrownianPath::new(7, OU_PATHS, cfg.t0, cfg.t1).unwrap();
    let state = PriorField::state(&tape, Tensor::zeros([OU_PATHS]));
    let r = solve(&mut PriorField, &ScalarDiffusion { sigma }, &path, state, &cfg).unwrap();
    let w = r.final_state.weights.value().to_f64_vec();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
    let span = cfg.t1 - cfg.t0;
    let exact = sigma * sigma * (1.0 - (-2.0 * span).exp()) / 2.0;
    let rel = (var / exact - 1.0).abs();

    let line = BrownianPath::new(7, 1, cfg.t0, cfg.t1).unwrap();
    let det = |steps: usize| {
        let cfg = SolverConfig { steps, ..SolverConfig::default() };
        let state = PriorField::state(&tape, Tensor::from_f64([1], &[1.0]).unwrap());
        let r = solve(&mut PriorField, &ScalarDiffusion { sigma: 0.0 }, &line, state, &cfg).unwrap();
        (r.final_state.weights.value().to_f64_vec()[0] - (-span).exp()).abs()
    };
    let orders: Vec<f64> = [10, 20, 40].iter().map(|&n| (det(n) / det(2 * n)).log2()).collect();
    let order_ok = orders.iter().all(|p| (p - 2.0).abs() < 0.2);
    verdict(
        rel < OU_REL_TOL && order_ok,
        format!("OU variance {var:.6} vs {exact:.6} (rel {rel:.4} < {OU_REL_TOL}); observed midpoint orders {orders:.3?}"),
    )
}

fn toy_model(variant: Variant, posterior: &str, posterior_activation: ActivationKind, seed: u64) -> Model<f64> {
    let cfg = ModelConfig {
        input_shape: vec![1],
        augment: 2,
        arch: DriftArch::Dense { width: 3, hidden: vec![6] },
        drift_activation: ActivationKind::Swish,
        posterior: posterior.parse().unwrap(),
        posterior_activation,
        sigma: 0.2,
        head: HeadKind::Gaussian,
        init_seed: seed,
    };
    Model::new(cfg, DynamicsConfig::new(variant, ActivationKind::Swish)).unwrap()
}

// 2. ELBO gradient against central differences.
fn gradient_correctness() -> Verdict {
    let data = toy_dataset::<f64>(&ToyConfig { n: 6, seed: 3, ..ToyConfig::default() }).unwrap();
    let solver = SolverConfig { steps: 8, ..SolverConfig::default() };
    let seeds = [17, 18];
    let loss = |m: &Model<f64>, p: &ParamSet<f64>| {
        let tape = Tape::no_grad();
        elbo(m, &p.bind(&tape), &data, &solver, 0.05, &seeds).unwrap().loss.value().item().unwrap()
    };
    let mut worst = 0.0f64;
    for variant in [Variant::Baseline, Variant::NesterovSkip] {
        let m = toy_model(variant, "1-5-1", ActivationKind::Swish, 21);
        let tape = Tape::new();
        let bound = m.params.bind(&tape);
        let grads = bound.gradients(&elbo(&m, &bound, &data, &solver, 0.05, &seeds).unwrap().loss.backward().unwrap());
        let ids: Vec<ParamId> = m.params.iter().map(|(id, _, _)| id).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let h = 1e-6;
        for _ in 0..FD_COORDS {
            let k = rng.random_range(0..ids.len());
            let j = rng.random_range(0..m.params.get(ids[k]).numel());
            let nudged = |d: f64| {
                let mut p = m.params.clone();
                let mut v = p.get(ids[k]).to_f64_vec();
                v[j] += d;
                p.set(ids[k], Tensor::from_f64(p.get(ids[k]).shape().to_vec(), &v).unwrap()).unwrap();
                loss(&m, &p)
            };
            let fd = (nudged(h) - nudged(-h)) / (2.0 * h);
            let ad = grads[k].data()[j];
            worst = worst.max((ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8));
        }
    }
    verdict(
        worst < FD_REL_TOL,
        format!("worst relative error {worst:.2e} over {} coordinates (< {FD_REL_TOL})", 2 * FD_COORDS),
    )
}

/// Passes every evaluation through and records what it saw.
struct Observed<'a, 't> {
    inner: SdeBnnField<'a, 't, f64>,
    kl_seen: Vec<f64>,
}

impl<'t> DriftField<'t, f64> for Observed<'_, 't> {
    type Snapshot = Option<ResidualCache<'t, f64>>;

    fn evaluate(&mut self, s: &JointState<'t, f64>, t: f64) -> sdebnn_core::Result<JointState<'t, f64>> {
        self.kl_seen.push(s.kl.value().item()?);
        let d = self.inner.evaluate(s, t)?;
        self.kl_seen.push(d.kl.value().item()?);
        Ok(d)
    }

    fn notify_evaluation(&mut self) {
        self.inner.notify_evaluation();
    }

    fn notify_step(&mut self) {
        self.inner.notify_step();
    }

    fn snapshot(&self) -> Self::Snapshot {
        self.inner.snapshot()
    }

    fn restore(&mut self, s: Self::Snapshot) {
        self.inner.restore(s)
    }
}

/// Solve one batch with `m`, returning the cache trace, the KL values seen
/// by the field and the final KL.
fn observe(m: &Model<f64>, solver: &SolverConfig) -> (usize, Vec<(u8, bool)>, Vec<f64>, f64) {
    let tape = Tape::no_grad();
    let bound = m.params.bind(&tape);
    let x = m.augment(&tape, &Tensor::from_f64([3, 1], &[-1.0, 0.2, 1.3]).unwrap()).unwrap();
    let mut inner = SdeBnnField::new(&m.hyper, &m.posterior, &bound, &m.dynamics, m.config.sigma, &x);
    inner.cache = inner.cache.take().map(ResidualCache::with_trace);
    let mut field = Observed { inner, kl_seen: vec![] };
    let path = BrownianPath::new(4, m.weight_dim(), solver.t0, solver.t1).unwrap();
    let init = initial_state(m.dynamics.variant, &x, bound.get(m.w0));
    let r = solve(&mut field, &ScalarDiffusion { sigma: m.config.sigma }, &path, init, solver).unwrap();
    let trace = field.inner.cache.as_ref().and_then(|c| c.trace()).unwrap_or(&[]).iter().map(|e| (e.epsilon, e.overwrote)).collect();
    (r.nfe_f, trace, field.kl_seen, r.final_state.kl.value().item().unwrap())
}

// 3. Residual cache parity schedule.
fn parity_state_machine() -> Verdict {
    let m = toy_model(Variant::NesterovSkip, "1-5-1", ActivationKind::Swish, 1);
    let (nfe, trace, _, _) = observe(&m, &SolverConfig::default());
    let expected: Vec<(u8, bool)> = (0..40).map(|k| ((k % 2) as u8, k % 2 == 0)).collect();
    let eps: String = trace.iter().map(|(e, _)| char::from(b'0' + e)).collect();
    verdict(nfe == 40 && trace == expected, format!("nfe_f {nfe}; epsilon sequence {eps}; overwrite exactly when epsilon = 0"))
}

// 4. Toy regression predictive quality.
fn toy_regression() -> Verdict {
    let cfg = resolve("paper-toy", &[("variant", string("nesterov_skip"))]);
    let dir = workdir("toy");
    let start = Instant::now();
    let out = match run_train(&cfg, &dir, false) {
        Ok(o) if o.failure.is_none() => o,
        Ok(o) => return verdict(false, format!("training failed: {}", o.failure.unwrap())),
        Err(e) => return verdict(false, format!("training failed: {e}")),
    };
    let s = match run_eval(&out.out_dir.join(CHECKPOINT), &cfg, &cfg.solver, &cfg.train.eval_config()) {
        Ok(s) => s,
        Err(e) => return verdict(false, format!("evaluation failed: {e}")),
    };
    let (coverage, rmse) = (s.ci_coverage.unwrap_or(0.0), s.rmse.unwrap_or(f64::INFINITY));
    let limit = TOY_RMSE_NOISE_MULTIPLE * cfg.data.toy.noise_std;
    verdict(
        coverage >= TOY_COVERAGE && rmse <= limit,
        format!(
            "{} epochs: 95% interval coverage {coverage:.3} (>= {TOY_COVERAGE}), RMSE {rmse:.4} (<= {limit:.3}); {:.0} s",
            cfg.train.epochs,
            start.elapsed().as_secs_f64()
        ),
    )
}

// 5. MNIST accuracy on the reduced training set.
fn mnist_accuracy(data: &Path) -> Verdict {
    let data = string(&data.display().to_string());
    let cfg = resolve(
        "paper-mnist-fixed",
        &[
            ("variant", string("nesterov_skip")),
            ("train.epochs", int(MNIST_EPOCHS)),
            ("data.train_subset", int(MNIST_TRAIN)),
            ("data.test_subset", int(MNIST_LOG_TEST)),
            ("data.mnist_dir", data.clone()),
        ],
    );
    let dir = workdir("mnist");
    let start = Instant::now();
    let out = match run_train(&cfg, &dir, false) {
        Ok(o) if o.failure.is_none() => o,
        Ok(o) => return verdict(false, format!("training failed: {}", o.failure.unwrap())),
        Err(e) => return verdict(false, format!("training failed: {e}")),
    };
    let mut full = cfg.clone();
    full.data.test_subset = 0;
    let s = match run_eval(&out.out_dir.join(CHECKPOINT), &full, &cfg.solver, &cfg.train.eval_config()) {
        Ok(s) => s,
        Err(e) => return verdict(false, format!("evaluation failed: {e}")),
    };
    let acc = s.accuracy.unwrap_or(0.0);
    verdict(
        acc >= MNIST_ACC,
        format!(
            "{MNIST_TRAIN} training images, {MNIST_EPOCHS} epochs: test accuracy {acc:.4} on {} images (>= {MNIST_ACC}); {:.0} s",
            s.examples,
            start.elapsed().as_secs_f64()
        ),
    )
}

// 6 and 7. Adaptive-solver comparison of the baseline and the skip variant.
fn adaptive_comparison(data: &Path) -> (Verdict, Verdict) {
    let seeds = toml::Value::Array(CMP_SEEDS.iter().map(|&s| int(s as i64)).collect());
    let variants = toml::Value::Array(vec![string("baseline"), string("nesterov_skip")]);
    let cfg = resolve(
        "paper-mnist-adaptive",
        &[
            ("train.epochs", int(CMP_EPOCHS)),
            ("data.train_subset", int(CMP_TRAIN)),
            ("data.test_subset", int(CMP_TEST)),
            ("data.mnist_dir", string(&data.display().to_string())),
            ("compare.seeds", seeds),
            ("compare.variants", variants),
        ],
    );
    let dir = workdir("compare");
    let start = Instant::now();
    let out = match run_compare(&cfg, &dir, false) {
        Ok(o) => o,
        Err(e) => {
            let v = || verdict(false, format!("comparison failed: {e}"));
            return (v(), v());
        }
    };
    if let Some(r) = out.runs.iter().find(|r| r.failure.is_some()) {
        let msg = format!("{} seed {} failed: {}", r.variant, r.seed, r.failure.as_ref().unwrap());
        return (verdict(false, msg.clone()), verdict(false, msg));
    }
    let log = |v: Variant, s: u64| -> &TrainingLog { &out.runs.iter().find(|r| r.variant == v && r.seed == s).unwrap().log };
    let mut base_nfe = Vec::new();
    let mut skip_nfe = Vec::new();
    let mut auc_wins = 0;
    let mut aucs = Vec::new();
    for &s in &CMP_SEEDS {
        let (b, k) = (log(Variant::Baseline, s), log(Variant::NesterovSkip, s));
        base_nfe.push(b.tail_mean_nfe(NFE_TAIL));
        skip_nfe.push(k.tail_mean_nfe(NFE_TAIL));
        let (ab, ak) = (b.accuracy_auc().unwrap_or(f64::NAN), k.accuracy_auc().unwrap_or(f64::NAN));
        if ak >= ab {
            auc_wins += 1;
        }
        aucs.push((ab, ak));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ratio = mean(&skip_nfe) / mean(&base_nfe);
    let secs = start.elapsed().as_secs_f64();
    let nfe = verdict(
        ratio < 1.0,
        format!(
            "last {NFE_TAIL} epochs mean NFE_f per seed baseline {base_nfe:.1?} vs skip {skip_nfe:.1?}; ratio {ratio:.3} (< 1.0); {secs:.0} s"
        ),
    );
    let auc = verdict(
        auc_wins >= 2,
        format!("accuracy AUC (baseline, skip) per seed {aucs:.3?}; skip >= baseline in {auc_wins} of {} seeds (>= 2)", CMP_SEEDS.len()),
    );
    (nfe, auc)
}

// 8. Identical manifests give identical logs.
fn reproducibility(data: Option<&Path>) -> Verdict {
    let mut checked = Vec::new();
    let mut runs: Vec<(&str, Vec<(&str, toml::Value)>)> = vec![("paper-toy", vec![("train.epochs", int(3))])];
    if let Some(d) = data {
        let d = string(&d.display().to_string());
        for preset in ["paper-mnist-fixed", "paper-mnist-adaptive"] {
            runs.push((
                preset,
                vec![
                    ("train.epochs", int(1)),
                    ("data.train_subset", int(256)),
                    ("data.test_subset", int(256)),
                    ("data.mnist_dir", d.clone()),
                ],
            ));
        }
    }
    for (preset, flags) in runs {
        let cfg = resolve(preset, &flags);
        let first = workdir(&format!("repro-{preset}-a"));
        let second = workdir(&format!("repro-{preset}-b"));
        if let Err(e) = run_train(&cfg, &first, false) {
            return verdict(false, format!("{preset}: {e}"));
        }
        // Rebuild the second run from the first run's manifest alone.
        let file = config::read_file(&first.join("manifest.toml")).unwrap();
        let mut again = config::resolve(Sources { preset: None, file: Some(file), flags: vec![] }).unwrap();
        again.out_dir = second.clone();
        if let Err(e) = run_train(&again, &second, false) {
            return verdict(false, format!("{preset}: {e}"));
        }
        let a = std::fs::read(first.join(LOG_CSV)).unwrap();
        let b = std::fs::read(second.join(LOG_CSV)).unwrap();
        if a != b {
            return verdict(false, format!("{preset}: logs differ"));
        }
        checked.push(preset);
    }
    let skipped = if data.is_none() { " (MNIST presets skipped: data unavailable)" } else { "" };
    verdict(data.is_some(), format!("bit-identical training logs from manifest re-runs: {checked:?}{skipped}"))
}

// 9. Pinned posterior drift leaves the KL channel at zero.
fn kl_identity() -> Verdict {
    let mut worst = 0.0f64;
    let mut evaluations = 0;
    for variant in [Variant::Baseline, Variant::NesterovDirect, Variant::NesterovSkip] {
        let mut m = toy_model(variant, "1-4-1", ActivationKind::Identity, 2);
        // NN_phi(w, t) = -2 w
        for (name, data) in [
            ("phi.0.weight", vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
            ("phi.0.bias", vec![0.0; 4]),
            ("phi.1.weight", vec![-2.0, 0.0, 0.0, 0.0]),
            ("phi.1.bias", vec![0.0]),
        ] {
            let id = m.params.find(name).unwrap();
            let shape = m.params.get(id).shape().to_vec();
            m.params.set(id, Tensor::from_f64(shape, &data).unwrap()).unwrap();
        }
        for mode in [Mode::Fixed, Mode::Adaptive] {
            let (nfe, _, seen, last) = observe(&m, &SolverConfig { mode, ..SolverConfig::default() });
            evaluations += nfe;
            worst = seen.iter().chain([&last]).fold(worst, |w, k| w.max(k.abs()));
        }
    }
    verdict(worst == 0.0, format!("max |kl| over {evaluations} drift evaluations and final states: {worst:e}"))
}

fn main() {
    let total = Instant::now();
    let mut results: Vec<(u8, &str, Verdict)> = Vec::new();
    let mut report = |id: u8, name: &'static str, v: Verdict| {
        println!("{} [{id}] {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((id, name, v));
    };
    report(1, "solver correctness", solver_correctness());
    report(2, "gradient correctness", gradient_correctness());
    report(3, "parity state machine", parity_state_machine());
    report(9, "KL identity", kl_identity());
    let data = mnist_dir();
    report(8, "reproducibility", reproducibility(data.as_deref().ok()));
    report(4, "toy regression", toy_regression());
    match &data {
        Ok(d) => {
            report(5, "MNIST-reduced accuracy", mnist_accuracy(d));
            let (nfe, auc) = adaptive_comparison(d);
            report(6, "NFE reduction", nfe);
            report(7, "convergence speed (AUC)", auc);
        }
        Err(e) => {
            for (id, name) in [(5, "MNIST-reduced accuracy"), (6, "NFE reduction"), (7, "convergence speed (AUC)")] {
                report(id, name, verdict(false, e.clone()));
            }
        }
    }
    let failed: Vec<u8> = results.iter().filter(|(_, _, v)| !v.pass).map(|(id, _, _)| *id).collect();
    println!(
        "acceptance: {} of {} criteria passed in {:.0} s",
        results.len() - failed.len(),
        results.len(),
        total.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
