//! The variational objective and the optimisation loop.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::{Tape, Var};
use crate::brownian::{derive_seed, BrownianPath};
use crate::data::{batch_key, Dataset, Targets};
use crate::error::{Error, Result};
use crate::metrics::{auc_over_epochs, evaluate, EvalConfig};
use crate::model::Model;
use crate::params::{BoundParams, ParamSet};
use crate::scalar::Scalar;
use crate::solver::SolverConfig;
use crate::tensor::Tensor;

const SHUFFLE_STREAM: u64 = 0x5_4FF1E;
const EVAL_SEED_STREAM: u64 = 0xE7A1;

/// Piecewise-constant learning rate keyed by the epoch it starts at,
/// written `{0:1e-3, 50:3e-3}`.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule(BTreeMap<usize, f64>);

impl LrSchedule {
    pub fn constant(rate: f64) -> Self {
        Self(BTreeMap::from([(0, rate)]))
    }

    /// Rate for zero-based training epoch `epoch`.
    pub fn rate(&self, epoch: usize) -> f64 {
        *self.0.range(..=epoch).next_back().expect("schedule starts at epoch 0").1
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let body = s.trim();
        let body = body.strip_prefix('{').and_then(|b| b.strip_suffix('}')).unwrap_or(body);
        let mut map = BTreeMap::new();
        for entry in body.split(',').map(str::trim).filter(|e| !e.is_empty()) {
            let (epoch, rate) = match entry.split_once(':') {
                Some((e, r)) => (e.trim(), r.trim()),
                None => ("0", entry),
            };
            let epoch: usize =
                epoch.parse().map_err(|_| Error::config(format!("bad epoch {epoch:?} in lr schedule {s:?}")))?;
            let rate: f64 = rate.parse().map_err(|_| Error::config(format!("bad rate {rate:?} in lr schedule {s:?}")))?;
            if !(rate > 0.0 && rate.is_finite()) {
                return Err(Error::config(format!("learning rate must be positive, got {rate}")));
            }
            if map.insert(epoch, rate).is_some() {
                return Err(Error::config(format!("epoch {epoch} repeated in lr schedule")));
            }
        }
        if !map.contains_key(&0) {
            return Err(Error::config(format!("lr schedule {s:?} must start at epoch 0")));
        }
        Ok(Self(map))
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(e, r)| format!("{e}:{r:e}")).collect();
        write!(f, "{{{}}}", parts.join(", "))
    }
}

impl Serialize for LrSchedule {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for LrSchedule {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Rate(f64),
        }
        match Raw::deserialize(d)? {
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
            Raw::Rate(r) => format!("{{0:{r:e}}}").parse().map_err(serde::de::Error::custom),
        }
    }
}

fn default_eval_samples() -> usize {
    1
}

fn default_eval_batch_size() -> usize {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight on the KL path integral.
    pub kl_coef: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub epochs: usize,
    /// Posterior samples per training forward pass.
    pub mc_samples: usize,
    pub seed: u64,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    #[serde(default = "default_eval_batch_size")]
    pub eval_batch_size: usize,
    /// Fill `wall_ms`. Off by default so the log is a pure function of the
    /// configuration.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kl_coef >= 0.0 && self.kl_coef.is_finite()) {
            return Err(Error::config(format!("kl_coef must be non-negative, got {}", self.kl_coef)));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("mc_samples", self.mc_samples),
            ("eval_samples", self.eval_samples),
            ("eval_batch_size", self.eval_batch_size),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            samples: self.eval_samples,
            batch_size: self.eval_batch_size,
            seed: derive_seed(&[self.seed, EVAL_SEED_STREAM]),
        }
    }
}

/// Weight-path seeds for one minibatch, one per posterior sample. They
/// depend on the batch's members, not on its position in the epoch.
pub fn path_seeds(global: u64, epoch: usize, ids: &[u64], samples: usize) -> Vec<u64> {
    let key = batch_key(ids);
    (0..samples).map(|s| derive_seed(&[global, epoch as u64, key, s as u64])).collect()
}

pub struct ElboOutput<'t, T: Scalar> {
    /// Mean over samples of `nll + kl_coef * kl`.
    pub loss: Var<'t, T>,
    pub nll: f64,
    pub kl: f64,
    pub nfe_f: usize,
    pub sample_losses: Vec<f64>,
}

/// Negative β-ELBO of a batch averaged over one weight path per seed.
pub fn elbo<'t, T: Scalar>(
    model: &Model<T>,
    bound: &BoundParams<'t, T>,
    batch: &Dataset<T>,
    solver: &SolverConfig,
    kl_coef: f64,
    seeds: &[u64],
) -> Result<ElboOutput<'t, T>> {
    if batch.is_empty() || seeds.is_empty() {
        return Err(Error::contract("elbo needs a non-empty batch and at least one seed"));
    }
    let recording = bound.get(model.w0).tape().is_recording();
    let scale = T::lit(1.0 / seeds.len() as f64);
    let mut total: Option<Var<'t, T>> = None;
    let (mut nll_sum, mut kl_sum, mut nfe_f) = (0.0, 0.0, 0);
    let mut sample_losses = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let path = BrownianPath::new(seed, model.weight_dim(), solver.t0, solver.t1)?;
        let out = if recording {
            model.sample_for_training(bound, &batch.inputs, &path, solver)
        } else {
            model.sample(bound, &batch.inputs, &path, solver, None)
        }
        .map_err(|e| e.with_context(format!("batch of {} examples, path seed {seed}", batch.len())))?;
        let nll = match &batch.targets {
            Targets::Classes { labels, .. } => out.output.softmax_cross_entropy(labels)?,
            Targets::Values(ys) => {
                let ys: Vec<T> = ys.iter().map(|&y| T::lit(y)).collect();
                out.output.gaussian_nll(&ys)?
            }
        };
        let loss = nll.add_scaled(&out.kl, T::lit(kl_coef))?;
        let nll_v = nll.value().item()?.to_f64_lossy();
        let kl_v = out.kl.value().item()?.to_f64_lossy();
        nll_sum += nll_v;
        kl_sum += kl_v;
        nfe_f += out.stats.nfe_f;
        sample_losses.push(loss.value().item()?.to_f64_lossy());
        let term = loss.scale(scale);
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    let n = seeds.len() as f64;
    Ok(ElboOutput { loss: total.expect("at least one seed"), nll: nll_sum / n, kl: kl_sum / n, nfe_f, sample_losses })
}

/// Adam with moments kept in f64; no weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Scalar>(params: &ParamSet<T>) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<T: Scalar>(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::shape(format!("{} gradients for {} parameters", grads.len(), self.m.len())));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = &grads[k];
            let p = params.get(id);
            p.expect_same_shape(g, "adam")?;
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let data: Vec<T> = p
                .data()
                .iter()
                .zip(g.data())
                .enumerate()
                .map(|(i, (&p, &g))| {
                    let g = g.to_f64_lossy();
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                    let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                    T::lit(p.to_f64_lossy() - update)
                })
                .collect();
            params.set(id, Tensor::from_parts(p.shape().to_vec(), data))?;
        }
        Ok(())
    }
}

/// One TrainingLog row. Epoch 0 is the untrained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_kl: f64,
    pub test_acc: Option<f64>,
    pub test_nll: f64,
    pub mean_nfe_f: f64,
    pub wall_ms: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<LogRow>, _>>().map_err(csv_err)?;
        Ok(Self { rows })
    }

    pub fn last(&self) -> Option<&LogRow> {
        self.rows.last()
    }

    /// Normalised area under the test-accuracy curve over all logged epochs.
    pub fn accuracy_auc(&self) -> Result<f64> {
        let (epochs, acc): (Vec<f64>, Vec<f64>) =
            self.rows.iter().filter_map(|r| r.test_acc.map(|a| (r.epoch as f64, a))).unzip();
        auc_over_epochs(&epochs, &acc)
    }

    /// Mean of `mean_nfe_f` over the last `k` rows.
    pub fn tail_mean_nfe(&self, k: usize) -> f64 {
        let tail = &self.rows[self.rows.len().saturating_sub(k)..];
        tail.iter().map(|r| r.mean_nfe_f).sum::<f64>() / tail.len().max(1) as f64
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format { offset: e.position().map_or(0, |p| p.byte() as usize), message: e.to_string() }
}

/// Result of a training run. On failure the model holds the parameters
/// from the end of the last completed epoch and `log` covers those epochs.
#[derive(Debug)]
pub struct TrainRun {
    pub log: TrainingLog,
    pub failure: Option<Error>,
}

/// Mean loss and KL over `data` at the current parameters, without
/// gradients, batching `order` by `batch_size`.
pub fn dataset_loss<T: Scalar>(
    model: &Model<T>,
    data: &Dataset<T>,
    order: &[usize],
    solver: &SolverConfig,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(f64, f64)> {
    let (mut loss, mut kl, mut n) = (0.0, 0.0, 0usize);
    for batch in data.batches(order, cfg.batch_size) {
        let tape = Tape::no_grad();
        let bound = model.params.bind(&tape);
        let seeds = path_seeds(cfg.seed, epoch, &batch.ids, cfg.mc_samples);
        let out = elbo(model, &bound, &batch, solver, cfg.kl_coef, &seeds)?;
        loss += out.loss.value().item()?.to_f64_lossy() * batch.len() as f64;
        kl += out.kl * batch.len() as f64;
        n += batch.len();
    }
    Ok((loss / n as f64, kl / n as f64))
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch as u64, SHUFFLE_STREAM])));
    order
}

fn train_epoch<T: Scalar>(
    model: &mut Model<T>,
    adam: &mut Adam,
    data: &Dataset<T>,
    solver: &SolverConfig,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(f64, f64)> {
    let lr = cfg.lr_schedule.rate(epoch - 1);
    let order = shuffled(data.len(), cfg.seed, epoch);
    let (mut loss_sum, mut kl_sum, mut n) = (0.0, 0.0, 0usize);
    for (b, batch) in data.batches(&order, cfg.batch_size).enumerate() {
        let tape = Tape::new();
        let bound = model.params.bind(&tape);
        let seeds = path_seeds(cfg.seed, epoch, &batch.ids, cfg.mc_samples);
        let out = elbo(model, &bound, &batch, solver, cfg.kl_coef, &seeds)
            .map_err(|e| e.with_context(format!("epoch {epoch}, batch {b}")))?;
        let loss = out.loss.value().item()?.to_f64_lossy();
        let grads = bound.gradients(&out.loss.backward()?);
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                t: solver.t1,
                context: format!("non-finite loss or gradient at epoch {epoch}, batch {b}"),
            });
        }
        drop(bound);
        adam.step(&mut model.params, &grads, lr)?;
        loss_sum += loss * batch.len() as f64;
        kl_sum += out.kl * batch.len() as f64;
        n += batch.len();
    }
    Ok((loss_sum / n as f64, kl_sum / n as f64))
}

/// Train with Adam on the stepwise schedule, logging the untrained model
/// as epoch 0 and then every epoch. `on_epoch` sees each row as it is made.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_data: &Dataset<T>,
    test_data: &Dataset<T>,
    solver: &SolverConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&LogRow),
) -> Result<TrainRun> {
    cfg.validate()?;
    solver.validate()?;
    if train_data.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let eval_cfg = cfg.eval_config();
    let mut log = TrainingLog::default();
    let mut adam = Adam::new(&model.params);
    let wall = |start: Instant| cfg.record_wall_time.then(|| start.elapsed().as_millis() as u64);

    for epoch in 0..=cfg.epochs {
        let start = Instant::now();
        let last_good = model.params.clone();
        let step = if epoch == 0 {
            let order: Vec<usize> = (0..train_data.len()).collect();
            dataset_loss(model, train_data, &order, solver, cfg, 0)
        } else {
            train_epoch(model, &mut adam, train_data, solver, cfg, epoch)
        };
        let result = step.and_then(|(loss, kl)| {
            let eval = evaluate(model, test_data, solver, &eval_cfg)
                .map_err(|e| e.with_context(format!("test evaluation after epoch {epoch}")))?;
            Ok(LogRow {
                epoch,
                train_loss: loss,
                train_kl: kl,
                test_acc: eval.accuracy,
                test_nll: eval.nll,
                mean_nfe_f: eval.nfe_mean,
                wall_ms: wall(start),
            })
        });
        match result {
            Ok(row) => {
                on_epoch(&row);
                log.rows.push(row);
            }
            Err(e) => {
                model.params = last_good;
                return Ok(TrainRun { log, failure: Some(e) });
            }
        }
    }
    Ok(TrainRun { log, failure: None })
}
