use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use toml::Value;

use sdebnn_cli::config::{self, parse_override, ConfigError, RunConfig, Sources, OUT_ROOT_ENV};
use sdebnn_cli::fetch::{fetch_mnist, MNIST_URL};
use sdebnn_cli::run::{self, exit_code, format_row, EVAL_JSON, MANIFEST};
use sdebnn_core::metrics::EvalConfig;

const USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "sdebnn", version, about = "Train and compare SDE Bayesian neural networks")]
struct Cli {
    /// Directory that relative output directories are placed under.
    #[arg(long, global = true, env = OUT_ROOT_ENV)]
    out_root: Option<PathBuf>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its log, manifest and checkpoint.
    Train(RunArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Train several variants over several seeds and summarise them.
    Compare(CompareArgs),
    /// Download and verify the MNIST files.
    FetchData(FetchArgs),
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// paper-toy, paper-mnist-fixed or paper-mnist-adaptive.
    #[arg(long)]
    preset: Option<String>,
    /// toy1d or mnist.
    #[arg(long)]
    task: Option<String>,
    /// baseline, nesterov_direct or nesterov_skip.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<i64>,
    #[arg(long)]
    seed: Option<i64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// fixed or adaptive.
    #[arg(long)]
    solver: Option<String>,
    #[arg(long)]
    steps: Option<i64>,
    #[arg(long)]
    atol: Option<f64>,
    #[arg(long)]
    rtol: Option<f64>,
    #[arg(long)]
    batch_size: Option<i64>,
    /// Training subset size (0 for the full split).
    #[arg(long)]
    train_subset: Option<i64>,
    /// Test subset size (0 for the full split).
    #[arg(long)]
    test_subset: Option<i64>,
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
    /// f32 or f64.
    #[arg(long)]
    scalar: Option<String>,
    /// Record per-epoch wall time (logs are then no longer reproducible byte for byte).
    #[arg(long)]
    wall_time: bool,
    /// Any configuration key, e.g. `--set train.kl_coef=1e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn overrides(&self) -> Result<Vec<(String, Value)>, ConfigError> {
        let mut out: Vec<(String, Value)> = self.set.iter().map(|s| parse_override(s)).collect::<Result<_, _>>()?;
        let s = |v: &String| Value::String(v.clone());
        let p = |v: &PathBuf| Value::String(v.display().to_string());
        let named: [(&str, Option<Value>); 14] = [
            ("task", self.task.as_ref().map(s)),
            ("variant", self.variant.as_ref().map(s)),
            ("train.epochs", self.epochs.map(Value::Integer)),
            ("train.seed", self.seed.map(Value::Integer)),
            ("out_dir", self.out_dir.as_ref().map(p)),
            ("solver.mode", self.solver.as_ref().map(s)),
            ("solver.steps", self.steps.map(Value::Integer)),
            ("solver.atol", self.atol.map(Value::Float)),
            ("solver.rtol", self.rtol.map(Value::Float)),
            ("train.batch_size", self.batch_size.map(Value::Integer)),
            ("data.train_subset", self.train_subset.map(Value::Integer)),
            ("data.test_subset", self.test_subset.map(Value::Integer)),
            ("data.mnist_dir", self.mnist_dir.as_ref().map(p)),
            ("scalar", self.scalar.as_ref().map(s)),
        ];
        out.extend(named.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
        if self.wall_time {
            out.push(("train.record_wall_time".into(), Value::Boolean(true)));
        }
        Ok(out)
    }

    fn resolve(&self, default_file: Option<&Path>) -> Result<RunConfig, ConfigError> {
        let file = match (&self.config, default_file) {
            (Some(p), _) => Some(config::read_file(p)?),
            (None, Some(p)) if p.exists() => Some(config::read_file(p)?),
            _ => None,
        };
        config::resolve(Sources { preset: self.preset.clone(), file, flags: self.overrides()? })
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Posterior samples per batch (defaults to the run's evaluation setting).
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    eval_batch_size: Option<usize>,
    /// Where to write the JSON summary (defaults to eval.json beside the checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Configuration overrides; the manifest beside the checkpoint is read
    /// when no --config is given.
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct CompareArgs {
    /// Comma-separated variants.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<i64>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct FetchArgs {
    #[arg(long, default_value = "data/mnist")]
    dest: PathBuf,
    #[arg(long, default_value = MNIST_URL)]
    url: String,
}

fn usage(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(USAGE)
}

fn finish(code: i32) -> ExitCode {
    ExitCode::from(code.clamp(0, 255) as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let root = cli.out_root.as_deref();
    let progress = !cli.quiet;
    match cli.command {
        Command::Train(args) => {
            let cfg = match args.resolve(None) {
                Ok(c) => c,
                Err(e) => return usage(e),
            };
            let out = cfg.resolved_out_dir(root);
            match run::run_train(&cfg, &out, progress) {
                Ok(o) => {
                    if let Some(row) = o.log.last() {
                        println!("{}", format_row(row));
                    }
                    if let Some(e) = &o.failure {
                        eprintln!("error: {e}");
                    }
                    println!("artifacts in {}", o.out_dir.display());
                    finish(o.exit_code())
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    finish(exit_code(&e))
                }
            }
        }
        Command::Eval(args) => {
            let manifest = args.checkpoint.parent().map(|d| d.join(MANIFEST));
            let cfg = match args.run.resolve(manifest.as_deref()) {
                Ok(c) => c,
                Err(e) => return usage(e),
            };
            let base = cfg.train.eval_config();
            let eval = EvalConfig {
                samples: args.samples.unwrap_or(base.samples),
                batch_size: args.eval_batch_size.unwrap_or(base.batch_size),
                seed: base.seed,
            };
            match run::run_eval(&args.checkpoint, &cfg, &cfg.solver, &eval) {
                Ok(summary) => {
                    let text = serde_json::to_string_pretty(&summary).expect("summary serialises");
                    println!("{text}");
                    let out = args.out.unwrap_or_else(|| {
                        args.checkpoint.parent().unwrap_or(Path::new(".")).join(EVAL_JSON)
                    });
                    if let Err(e) = std::fs::write(&out, text) {
                        eprintln!("error: writing {}: {e}", out.display());
                        return finish(1);
                    }
                    finish(0)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    finish(exit_code(&e))
                }
            }
        }
        Command::Compare(args) => {
            let mut run_args = args.run.clone();
            if !args.variants.is_empty() {
                run_args.set.push(format!(
                    "compare.variants=[{}]",
                    args.variants.iter().map(|v| format!("\"{}\"", v.trim())).collect::<Vec<_>>().join(",")
                ));
            }
            if !args.seeds.is_empty() {
                run_args.set.push(format!(
                    "compare.seeds=[{}]",
                    args.seeds.iter().map(i64::to_string).collect::<Vec<_>>().join(",")
                ));
            }
            let cfg = match run_args.resolve(None) {
                Ok(c) => c,
                Err(e) => return usage(e),
            };
            let out = cfg.resolved_out_dir(root);
            match run::run_compare(&cfg, &out, progress) {
                Ok(o) => {
                    print!("{}", run::summary_table(&o.summary));
                    for r in o.runs.iter().filter(|r| r.failure.is_some()) {
                        eprintln!("error: {} seed {}: {}", r.variant, r.seed, r.failure.as_ref().unwrap());
                    }
                    println!("artifacts in {}", out.display());
                    finish(o.exit_code())
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    finish(exit_code(&e))
                }
            }
        }
        Command::FetchData(args) => match fetch_mnist(&args.dest, &args.url) {
            Ok(true) => {
                println!("MNIST written to {}", args.dest.display());
                finish(0)
            }
            Ok(false) => {
                println!("MNIST already present and verified in {}", args.dest.display());
                finish(0)
            }
            Err(e) => {
                eprintln!("error: {e}");
                finish(1)
            }
        },
    }
}
