//! Run configuration: presets, TOML files and flag overrides, merged in
//! that order of increasing precedence.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use sdebnn_core::autodiff::ActivationKind;
use sdebnn_core::data::ToyConfig;
use sdebnn_core::dynamics::{DynamicsConfig, ParityMode, Scaling, Variant};
use sdebnn_core::model::{HeadKind, ModelConfig};
use sdebnn_core::solver::SolverConfig;
use sdebnn_core::train::TrainConfig;
use sdebnn_core::weights::{DriftArch, DriftReading, PosteriorSpec};

/// Relative `out_dir`s are resolved against this directory when set.
pub const OUT_ROOT_ENV: &str = "SDEBNN_OUT_ROOT";

pub const PRESETS: [&str; 3] = ["paper-toy", "paper-mnist-fixed", "paper-mnist-adaptive"];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown preset {0:?} (expected one of paper-toy, paper-mnist-fixed, paper-mnist-adaptive)")]
    UnknownPreset(String),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("invalid override {0:?}: expected key=value")]
    Override(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Toy1d,
    Mnist,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarKind {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub augment: usize,
    pub arch: DriftArch,
    pub drift_activation: ActivationKind,
    pub posterior: PosteriorSpec,
    pub posterior_activation: ActivationKind,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSection {
    pub activation: ActivationKind,
    pub xi: f64,
    pub scaling: Scaling,
    pub parity: ParityMode,
    pub reading: DriftReading,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySection {
    pub n_train: usize,
    pub n_test: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl ToySection {
    pub fn split(&self, test: bool) -> ToyConfig {
        ToyConfig {
            n: if test { self.n_test } else { self.n_train },
            x_range: (self.x_min, self.x_max),
            noise_std: self.noise_std,
            // Train and test draws come from distinct streams.
            seed: self.seed.wrapping_mul(2).wrapping_add(test as u64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub toy: ToySection,
    pub mnist_dir: PathBuf,
    /// Training subset size; 0 uses the full split.
    pub train_subset: usize,
    /// Test subset size; 0 uses the full split.
    pub test_subset: usize,
    pub subset_seed: u64,
    /// Average-pooling factor applied to images.
    pub pool: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub variant: Variant,
    pub scalar: ScalarKind,
    pub out_dir: PathBuf,
    pub model: ModelSection,
    pub dynamics: DynamicsSection,
    pub solver: SolverConfig,
    pub train: TrainConfig,
    pub data: DataSection,
    pub compare: CompareSection,
}

fn toml_of<S: Serialize>(s: &S) -> Value {
    Value::try_from(s).expect("preset sections serialise to TOML")
}

/// The base configuration a preset stands for.
pub fn preset(name: &str) -> Result<RunConfig, ConfigError> {
    let toy = RunConfig {
        task: Task::Toy1d,
        variant: Variant::NesterovSkip,
        scalar: ScalarKind::F64,
        out_dir: PathBuf::from("runs/toy1d"),
        model: ModelSection {
            augment: 2,
            arch: DriftArch::Dense { width: 3, hidden: vec![32] },
            drift_activation: ActivationKind::Swish,
            posterior: "32".parse().expect("valid spec"),
            posterior_activation: ActivationKind::Swish,
            sigma: 0.2,
        },
        dynamics: DynamicsSection {
            activation: ActivationKind::Swish,
            xi: 1.0,
            scaling: Scaling::NesterovTimeScale,
            parity: ParityMode::PerEvaluation,
            reading: DriftReading::IntegratePosterior,
        },
        solver: SolverConfig::default(),
        train: TrainConfig {
            kl_coef: 0.0,
            lr_schedule: "{0:1e-3}".parse().expect("valid schedule"),
            batch_size: 50,
            epochs: 1000,
            mc_samples: 10,
            seed: 0,
            eval_samples: 30,
            eval_batch_size: 500,
            record_wall_time: false,
        },
        data: DataSection {
            toy: ToySection { n_train: 200, n_test: 200, x_min: -2.5, x_max: 2.5, noise_std: 0.1, seed: 0 },
            mnist_dir: PathBuf::from("data/mnist"),
            train_subset: 5000,
            test_subset: 0,
            subset_seed: 0,
            pool: 2,
        },
        compare: CompareSection { variants: vec![Variant::Baseline, Variant::NesterovSkip], seeds: vec![0, 1, 2] },
    };
    let mnist = RunConfig {
        task: Task::Mnist,
        scalar: ScalarKind::F32,
        out_dir: PathBuf::from("runs/mnist"),
        model: ModelSection {
            augment: 2,
            arch: DriftArch::Conv { channels: 3, hidden: 32, kernel: 3, blocks: 1 },
            drift_activation: ActivationKind::Swish,
            posterior: "1-64-1".parse().expect("valid spec"),
            posterior_activation: ActivationKind::Swish,
            sigma: 0.1,
        },
        train: TrainConfig {
            kl_coef: 1e-5,
            lr_schedule: "{0:1e-3}".parse().expect("valid schedule"),
            batch_size: 128,
            epochs: 15,
            mc_samples: 1,
            seed: 0,
            eval_samples: 1,
            eval_batch_size: 500,
            record_wall_time: false,
        },
        ..toy.clone()
    };
    match name {
        "paper-toy" => Ok(toy),
        "paper-mnist-fixed" => Ok(mnist),
        "paper-mnist-adaptive" => Ok(RunConfig {
            solver: SolverConfig {
                mode: sdebnn_core::solver::Mode::Adaptive,
                atol: 1e-3,
                rtol: 1e-3,
                ..SolverConfig::default()
            },
            ..mnist
        }),
        other => Err(ConfigError::UnknownPreset(other.into())),
    }
}

pub fn default_preset(task: Task) -> &'static str {
    match task {
        Task::Toy1d => "paper-toy",
        Task::Mnist => "paper-mnist-fixed",
    }
}

/// Keys whose value is an enum; an override replaces rather than merges so
/// switching variants does not leave the old one behind.
const REPLACE_KEYS: [&str; 1] = ["arch"];

/// Overlay `top` onto `base`, recursing into tables.
pub fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) if !REPLACE_KEYS.contains(&k.as_str()) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Set a dotted key, e.g. `train.epochs`, creating tables on the way.
pub fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<(), ConfigError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| ConfigError::Override(key.into()))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| ConfigError::Invalid(format!("{key}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Parse the value side of `key=value`: TOML if it parses as a value, a
/// bare string otherwise.
pub fn parse_override(spec: &str) -> Result<(String, Value), ConfigError> {
    let (k, v) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.into()))?;
    let v = v.trim();
    let value = format!("x = {v}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("x"))
        .unwrap_or_else(|| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

pub fn read_file(path: &Path) -> Result<Table, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::File { path: path.into(), message: e.to_string() })?;
    text.parse::<Table>().map_err(|e| ConfigError::File { path: path.into(), message: e.to_string() })
}

/// Inputs to [`resolve`], lowest precedence first.
#[derive(Clone, Debug, Default)]
pub struct Sources {
    pub preset: Option<String>,
    pub file: Option<Table>,
    /// Dotted-key overrides from flags.
    pub flags: Vec<(String, Value)>,
}

/// Merge preset, file and flags and validate the result. The preset is
/// chosen by the `--preset` flag, else a `preset` key in the file, else
/// the task's default.
pub fn resolve(mut src: Sources) -> Result<RunConfig, ConfigError> {
    let mut file = src.file.take().unwrap_or_default();
    let file_preset = match file.remove("preset") {
        Some(Value::String(s)) => Some(s),
        Some(other) => return Err(ConfigError::Invalid(format!("preset must be a string, got {other}"))),
        None => None,
    };
    let task_hint = src
        .flags
        .iter()
        .rev()
        .find(|(k, _)| k == "task")
        .map(|(_, v)| v.clone())
        .or_else(|| file.get("task").cloned());
    let name = match src.preset.or(file_preset) {
        Some(name) => name,
        None => match task_hint {
            Some(v) => {
                let task: Task = v.try_into().map_err(|e| ConfigError::Invalid(format!("task: {e}")))?;
                default_preset(task).to_string()
            }
            None => "paper-toy".to_string(),
        },
    };
    let mut merged = match toml_of(&preset(&name)?) {
        Value::Table(t) => t,
        _ => unreachable!("RunConfig serialises to a table"),
    };
    merge(&mut merged, file);
    for (k, v) in src.flags {
        set_dotted(&mut merged, &k, v)?;
    }
    let cfg: RunConfig = Value::Table(merged).try_into().map_err(|e: toml::de::Error| {
        ConfigError::Invalid(e.message().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: sdebnn_core::Error| ConfigError::Invalid(e.to_string());
        self.solver.validate().map_err(inv)?;
        self.train.validate().map_err(inv)?;
        self.model_config().validate().map_err(inv)?;
        if self.train.seed > i64::MAX as u64 || self.compare.seeds.iter().any(|&s| s > i64::MAX as u64) {
            return Err(ConfigError::Invalid("seeds must fit in a signed 64-bit integer".into()));
        }
        if self.data.pool == 0 {
            return Err(ConfigError::Invalid("data.pool must be positive".into()));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self.task {
            Task::Toy1d => vec![1],
            Task::Mnist => vec![1, 28 / self.data.pool, 28 / self.data.pool],
        }
    }

    pub fn head(&self) -> HeadKind {
        match self.task {
            Task::Toy1d => HeadKind::Gaussian,
            Task::Mnist => HeadKind::Categorical { classes: 10 },
        }
    }

    /// Model parameters are initialised from the training seed.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_shape: self.input_shape(),
            augment: self.model.augment,
            arch: self.model.arch.clone(),
            drift_activation: self.model.drift_activation,
            posterior: self.model.posterior.clone(),
            posterior_activation: self.model.posterior_activation,
            sigma: self.model.sigma,
            head: self.head(),
            init_seed: self.train.seed,
        }
    }

    pub fn dynamics_config(&self) -> DynamicsConfig {
        DynamicsConfig {
            variant: self.variant,
            xi: self.dynamics.xi,
            scaling: self.dynamics.scaling,
            activation: self.dynamics.activation,
            parity: self.dynamics.parity,
            reading: self.dynamics.reading,
        }
    }

    /// `out_dir`, placed under the out-root directory when it is relative
    /// and `root` is given.
    pub fn resolved_out_dir(&self, root: Option<&Path>) -> PathBuf {
        match root {
            Some(r) if self.out_dir.is_relative() => r.join(&self.out_dir),
            _ => self.out_dir.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("RunConfig serialises to TOML")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(pairs: &[&str]) -> Vec<(String, Value)> {
        pairs.iter().map(|s| parse_override(s).unwrap()).collect()
    }

    #[test]
    fn mnist_fixed_preset_matches_table() {
        let c = preset("paper-mnist-fixed").unwrap();
        assert_eq!(c.solver.steps, 20);
        assert_eq!(c.model.sigma, 0.1);
        assert_eq!(c.train.kl_coef, 1e-5);
        assert_eq!(c.train.batch_size, 128);
        assert_eq!(c.model.drift_activation, ActivationKind::Swish);
        assert_eq!(c.model.augment, 2);
        let a = preset("paper-mnist-adaptive").unwrap();
        assert_eq!(a.solver.mode, sdebnn_core::solver::Mode::Adaptive);
        assert_eq!((a.solver.atol, a.solver.rtol), (1e-3, 1e-3));
        let t = preset("paper-toy").unwrap();
        assert_eq!((t.model.sigma, t.train.kl_coef, t.train.mc_samples), (0.2, 0.0, 10));
        assert_eq!((t.train.batch_size, t.train.epochs), (50, 1000));
    }

    #[test]
    fn presets_validate_and_round_trip() {
        for name in PRESETS {
            let c = preset(name).unwrap();
            c.validate().unwrap();
            let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
            assert_eq!(back, c);
        }
        assert!(matches!(preset("paper-cifar"), Err(ConfigError::UnknownPreset(_))));
    }

    #[test]
    fn flags_beat_file_beat_preset() {
        let file: Table = "[train]\nepochs = 7\nbatch_size = 16\n".parse().unwrap();
        let c = resolve(Sources {
            preset: Some("paper-toy".into()),
            file: Some(file.clone()),
            flags: flags(&["train.epochs=3"]),
        })
        .unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, 16);
        assert_eq!(c.train.mc_samples, 10);
        let c = resolve(Sources { preset: Some("paper-toy".into()), file: Some(file), flags: vec![] }).unwrap();
        assert_eq!(c.train.epochs, 7);
    }

    #[test]
    fn preset_flag_beats_file_preset_and_task_picks_default() {
        let file: Table = "preset = \"paper-mnist-adaptive\"\n".parse().unwrap();
        let c = resolve(Sources { preset: Some("paper-mnist-fixed".into()), file: Some(file.clone()), flags: vec![] })
            .unwrap();
        assert_eq!(c.solver.mode, sdebnn_core::solver::Mode::Fixed);
        let c = resolve(Sources { preset: None, file: Some(file), flags: vec![] }).unwrap();
        assert_eq!(c.solver.mode, sdebnn_core::solver::Mode::Adaptive);
        let c = resolve(Sources { flags: flags(&["task=mnist"]), ..Sources::default() }).unwrap();
        assert_eq!(c.scalar, ScalarKind::F32);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let file: Table = "[train]\nepochz = 7\n".parse().unwrap();
        let err = resolve(Sources { file: Some(file), ..Sources::default() }).unwrap_err().to_string();
        assert!(err.contains("epochz"), "{err}");
        let err = resolve(Sources { flags: flags(&["solver.stepz=3"]), ..Sources::default() }).unwrap_err();
        assert!(err.to_string().contains("stepz"));
    }

    #[test]
    fn switching_arch_replaces_it() {
        let file: Table = "[model.arch.dense]\nwidth = 5\nhidden = [8]\n".parse().unwrap();
        let c = resolve(Sources { preset: Some("paper-mnist-fixed".into()), file: Some(file), flags: vec![] });
        // Dense arch on image inputs is a shape mismatch, but it must parse.
        assert!(matches!(c, Err(ConfigError::Invalid(m)) if m.contains("does not fit")));
    }

    #[test]
    fn invalid_values_are_rejected() {
        let err = resolve(Sources { flags: flags(&["train.kl_coef=-1.0"]), ..Sources::default() });
        assert!(matches!(err, Err(ConfigError::Invalid(_))));
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn overrides_parse_as_toml_or_string() {
        assert_eq!(parse_override("a.b=3").unwrap().1, Value::Integer(3));
        assert_eq!(parse_override("variant=baseline").unwrap().1, Value::String("baseline".into()));
        assert_eq!(parse_override("x=[1, 2]").unwrap().1, Value::Array(vec![Value::Integer(1), Value::Integer(2)]));
    }

    #[test]
    fn out_root_applies_to_relative_dirs() {
        let mut c = preset("paper-toy").unwrap();
        assert_eq!(c.resolved_out_dir(Some(Path::new("/tmp/r"))), PathBuf::from("/tmp/r/runs/toy1d"));
        c.out_dir = PathBuf::from("/abs");
        assert_eq!(c.resolved_out_dir(Some(Path::new("/tmp/r"))), PathBuf::from("/abs"));
    }
}
