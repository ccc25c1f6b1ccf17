//! The train / eval / compare verbs, independent of argument parsing.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sdebnn_core::checkpoint::Checkpoint;
use sdebnn_core::data::{load_mnist, toy_dataset, write_toy_csv, Dataset, Split, Targets};
use sdebnn_core::dynamics::Variant;
use sdebnn_core::metrics::{evaluate, regression_predictions, EvalConfig, EvalSummary};
use sdebnn_core::model::Model;
use sdebnn_core::solver::SolverConfig;
use sdebnn_core::tensor::Tensor;
use sdebnn_core::train::{train, LogRow, TrainingLog};
use sdebnn_core::{Error, Scalar};

use crate::config::{RunConfig, ScalarKind, Task};

pub const MANIFEST: &str = "manifest.toml";
pub const LOG_CSV: &str = "training_log.csv";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const EVAL_JSON: &str = "eval.json";
pub const PREDICTIONS_CSV: &str = "predictions.csv";
pub const COMPARE_CSV: &str = "compare.csv";
pub const SUMMARY_CSV: &str = "summary.csv";

/// Process exit code for a library error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Divergence { .. } => 3,
        Error::Budget { .. } => 4,
        Error::Config(_) => 2,
        _ => 1,
    }
}

pub struct Data<T: Scalar> {
    pub train: Dataset<T>,
    pub test: Dataset<T>,
}

pub fn load_data<T: Scalar>(cfg: &RunConfig) -> Result<Data<T>, Error> {
    match cfg.task {
        Task::Toy1d => Ok(Data {
            train: toy_dataset(&cfg.data.toy.split(false))?,
            test: toy_dataset(&cfg.data.toy.split(true))?,
        }),
        Task::Mnist => {
            let subset = |d: Dataset<T>, n: usize| if n == 0 { d } else { d.subset(n, cfg.data.subset_seed) };
            let dir = &cfg.data.mnist_dir;
            let train = load_mnist(dir, Split::Train)
                .map_err(|e| missing_data(e, dir))?
                .to_dataset::<T>(cfg.data.pool)?;
            let test = load_mnist(dir, Split::Test).map_err(|e| missing_data(e, dir))?.to_dataset::<T>(cfg.data.pool)?;
            Ok(Data { train: subset(train, cfg.data.train_subset), test: subset(test, cfg.data.test_subset) })
        }
    }
}

fn missing_data(e: Error, dir: &Path) -> Error {
    match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            Error::Config(format!("MNIST files not found under {} (run `sdebnn fetch-data`)", dir.display()))
        }
        other => other,
    }
}

/// What a training run left behind.
#[derive(Debug)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub log: TrainingLog,
    pub failure: Option<Error>,
}

impl TrainOutcome {
    pub fn exit_code(&self) -> i32 {
        self.failure.as_ref().map_or(0, exit_code)
    }
}

/// Train per `cfg`, writing the manifest, log, checkpoint and (for the toy
/// task) data and predictive-band CSVs into `out_dir`.
pub fn run_train(cfg: &RunConfig, out_dir: &Path, progress: bool) -> Result<TrainOutcome, Error> {
    match cfg.scalar {
        ScalarKind::F32 => train_typed::<f32>(cfg, out_dir, progress),
        ScalarKind::F64 => train_typed::<f64>(cfg, out_dir, progress),
    }
}

fn train_typed<T: Scalar>(cfg: &RunConfig, out_dir: &Path, progress: bool) -> Result<TrainOutcome, Error> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join(MANIFEST), manifest_text(cfg))?;
    let data = load_data::<T>(cfg)?;
    if cfg.task == Task::Toy1d {
        export_toy(&data.train, &out_dir.join("toy_train.csv"))?;
        export_toy(&data.test, &out_dir.join("toy_test.csv"))?;
    }
    let mut model = Model::<T>::new(cfg.model_config(), cfg.dynamics_config())?;
    let label = format!("{}", cfg.variant);
    let run = train(&mut model, &data.train, &data.test, &cfg.solver, &cfg.train, |row| {
        if progress {
            eprintln!("{label}: {}", format_row(row));
        }
    })?;
    run.log.write_csv(&out_dir.join(LOG_CSV))?;
    Checkpoint::from_model(&model).save(&out_dir.join(CHECKPOINT))?;
    if cfg.task == Task::Toy1d {
        write_predictive_band(&model, cfg, &out_dir.join(PREDICTIONS_CSV))?;
    }
    Ok(TrainOutcome { out_dir: out_dir.to_path_buf(), log: run.log, failure: run.failure })
}

pub fn manifest_text(cfg: &RunConfig) -> String {
    format!("# sdebnn {} run manifest; re-run with `sdebnn train --config <this file>`\n{}", env!("CARGO_PKG_VERSION"), cfg.to_toml())
}

fn export_toy<T: Scalar>(d: &Dataset<T>, path: &Path) -> Result<(), Error> {
    let xs = d.inputs.to_f64_vec();
    let Targets::Values(ys) = &d.targets else {
        return Err(Error::Contract("toy export needs regression targets".into()));
    };
    write_toy_csv(path, &xs, ys)
}

/// Predictive mean and 95% band on a uniform grid over the toy range.
fn write_predictive_band<T: Scalar>(model: &Model<T>, cfg: &RunConfig, path: &Path) -> Result<(), Error> {
    let n = 201;
    let (lo, hi) = (cfg.data.toy.x_min, cfg.data.toy.x_max);
    let xs: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let grid = Dataset::new(Tensor::from_f64([n, 1], &xs)?, Targets::Values(vec![0.0; n]))?;
    let preds = regression_predictions(model, &grid, &cfg.solver, &cfg.train.eval_config())?;
    let mut out = String::from("x,mean,std,lower,upper,target\n");
    for (x, p) in xs.iter().zip(&preds) {
        let _ = writeln!(
            out,
            "{x},{},{},{},{},{}",
            p.mean,
            p.std,
            p.lower,
            p.upper,
            sdebnn_core::data::toy_target(*x)
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn format_row(r: &LogRow) -> String {
    let acc = r.test_acc.map_or(String::from("-"), |a| format!("{a:.4}"));
    format!(
        "epoch {:>4}  loss {:.5}  kl {:.3e}  test_acc {acc}  test_nll {:.5}  nfe {:.1}",
        r.epoch, r.train_loss, r.train_kl, r.test_nll, r.mean_nfe_f
    )
}

/// Evaluate a checkpoint on the test split described by `cfg`, using
/// `solver` and `eval` (which may differ from training).
pub fn run_eval(checkpoint: &Path, cfg: &RunConfig, solver: &SolverConfig, eval: &EvalConfig) -> Result<EvalSummary, Error> {
    let ck = Checkpoint::load(checkpoint)?;
    match ck.scalar.as_str() {
        "f32" => eval_typed::<f32>(&ck, cfg, solver, eval),
        "f64" => eval_typed::<f64>(&ck, cfg, solver, eval),
        other => Err(Error::Config(format!("checkpoint has unsupported scalar {other:?}"))),
    }
}

fn eval_typed<T: Scalar>(ck: &Checkpoint, cfg: &RunConfig, solver: &SolverConfig, eval: &EvalConfig) -> Result<EvalSummary, Error> {
    let model: Model<T> = ck.to_model()?;
    if model.config.input_shape != cfg.input_shape() {
        return Err(Error::Shape(format!(
            "checkpoint expects inputs of shape {:?} but the {:?} task yields {:?}",
            model.config.input_shape,
            cfg.task,
            cfg.input_shape()
        )));
    }
    let data = load_data::<T>(cfg)?;
    evaluate(&model, &data.test, solver, eval)
}

/// One trained member of a comparison.
#[derive(Debug)]
pub struct CompareRun {
    pub variant: Variant,
    pub seed: u64,
    pub dir: PathBuf,
    pub log: TrainingLog,
    pub failure: Option<Error>,
}

/// Mean and sample standard deviation over seeds of one variant's final
/// metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub variant: String,
    pub seeds: usize,
    pub acc: (f64, f64),
    pub auc: (f64, f64),
    pub nll: (f64, f64),
    pub nfe: (f64, f64),
}

#[derive(Debug)]
pub struct CompareOutcome {
    pub runs: Vec<CompareRun>,
    pub summary: Vec<SummaryRow>,
}

impl CompareOutcome {
    /// Worst exit code over the member runs.
    pub fn exit_code(&self) -> i32 {
        self.runs.iter().filter_map(|r| r.failure.as_ref().map(exit_code)).max().unwrap_or(0)
    }
}

fn run_dir_name(variant: Variant, seed: u64, taken: &[PathBuf], root: &Path) -> PathBuf {
    let base = format!("{variant}-seed{seed}");
    let mut dir = root.join(&base);
    let mut k = 2;
    while taken.contains(&dir) {
        dir = root.join(format!("{base}-{k}"));
        k += 1;
    }
    dir
}

/// Train every `(seed, variant)` pair with identical data and seeds, then
/// write the joined per-epoch CSV and the per-variant summary. A failing
/// member is recorded and the others still run.
pub fn run_compare(cfg: &RunConfig, out_dir: &Path, progress: bool) -> Result<CompareOutcome, Error> {
    if cfg.compare.variants.len() < 2 {
        return Err(Error::Config("compare needs at least two variants".into()));
    }
    if cfg.compare.seeds.is_empty() {
        return Err(Error::Config("compare needs at least one seed".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join(MANIFEST), manifest_text(cfg))?;
    let mut runs: Vec<CompareRun> = Vec::new();
    for &seed in &cfg.compare.seeds {
        for &variant in &cfg.compare.variants {
            let mut member = cfg.clone();
            member.variant = variant;
            member.train.seed = seed;
            let taken: Vec<PathBuf> = runs.iter().map(|r| r.dir.clone()).collect();
            let dir = run_dir_name(variant, seed, &taken, out_dir);
            member.out_dir = dir.clone();
            let (log, failure) = match run_train(&member, &dir, progress) {
                Ok(o) => (o.log, o.failure),
                Err(e) => (TrainingLog::default(), Some(e)),
            };
            if let (Some(e), true) = (&failure, progress) {
                eprintln!("{variant} seed {seed}: {e}");
            }
            runs.push(CompareRun { variant, seed, dir, log, failure });
        }
    }
    std::fs::write(out_dir.join(COMPARE_CSV), joined_csv(&runs))?;
    let summary = summarize(&runs);
    std::fs::write(out_dir.join(SUMMARY_CSV), summary_csv(&summary))?;
    Ok(CompareOutcome { runs, summary })
}

fn column_label(run: &CompareRun, runs: &[CompareRun]) -> String {
    // Distinguishes a variant listed twice under the same seed.
    let dup = runs.iter().filter(|r| r.seed == run.seed && r.variant == run.variant).position(|r| r.dir == run.dir);
    match dup {
        Some(0) | None => run.variant.to_string(),
        Some(k) => format!("{}#{}", run.variant, k + 1),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// `seed, epoch` then `test_acc, test_nll, mean_nfe_f` per variant.
pub fn joined_csv(runs: &[CompareRun]) -> String {
    let mut seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
    seeds.dedup();
    let first_seed: Vec<&CompareRun> = runs.iter().filter(|r| r.seed == seeds[0]).collect();
    let labels: Vec<String> = first_seed.iter().map(|r| column_label(r, runs)).collect();
    let mut out = String::from("seed,epoch");
    for l in &labels {
        let _ = write!(out, ",{l}_test_acc,{l}_test_nll,{l}_mean_nfe_f");
    }
    out.push('\n');
    for &seed in &seeds {
        let members: Vec<&CompareRun> = runs.iter().filter(|r| r.seed == seed).collect();
        let epochs = members.iter().map(|r| r.log.rows.len()).max().unwrap_or(0);
        for e in 0..epochs {
            let _ = write!(out, "{seed},{e}");
            for r in &members {
                match r.log.rows.get(e) {
                    Some(row) => {
                        let _ = write!(out, ",{},{},{}", fmt_opt(row.test_acc), row.test_nll, row.mean_nfe_f);
                    }
                    None => out.push_str(",,,"),
                }
            }
            out.push('\n');
        }
    }
    out
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Per variant over seeds: final-epoch accuracy, AUC of the accuracy
/// curve, final NLL and final mean NFE. Failed runs are left out.
pub fn summarize(runs: &[CompareRun]) -> Vec<SummaryRow> {
    let mut labels: Vec<String> = Vec::new();
    for r in runs {
        let l = column_label(r, runs);
        if !labels.contains(&l) {
            labels.push(l);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let done: Vec<&CompareRun> = runs
                .iter()
                .filter(|r| column_label(r, runs) == label && r.failure.is_none())
                .filter(|r| r.log.last().is_some())
                .collect();
            let last = |f: &dyn Fn(&LogRow) -> Option<f64>| -> Vec<f64> {
                done.iter().filter_map(|r| r.log.last().and_then(f)).collect()
            };
            let aucs: Vec<f64> = done.iter().filter_map(|r| r.log.accuracy_auc().ok()).collect();
            SummaryRow {
                variant: label,
                seeds: done.len(),
                acc: mean_std(&last(&|r| r.test_acc)),
                auc: mean_std(&aucs),
                nll: mean_std(&last(&|r| Some(r.test_nll))),
                nfe: mean_std(&last(&|r| Some(r.mean_nfe_f))),
            }
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("variant,seeds,acc_mean,acc_std,auc_mean,auc_std,nll_mean,nll_std,nfe_mean,nfe_std\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.variant, r.seeds, r.acc.0, r.acc.1, r.auc.0, r.auc.1, r.nll.0, r.nll.1, r.nfe.0, r.nfe.1
        );
    }
    out
}

/// Human-readable summary table; ± is the sample standard deviation over seeds.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut out = format!(
        "{:<16} {:>5}  {:>18}  {:>18}  {:>18}  {:>16}\n",
        "variant", "seeds", "accuracy", "auc", "nll", "nfe"
    );
    let pm = |(m, s): (f64, f64), p: usize| format!("{m:.p$} ± {s:.p$}");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<16} {:>5}  {:>18}  {:>18}  {:>18}  {:>16}",
            r.variant,
            r.seeds,
            pm(r.acc, 4),
            pm(r.auc, 4),
            pm(r.nll, 4),
            pm(r.nfe, 1)
        );
    }
    out.push_str("(mean ± std over seeds)\n");
    out
}
