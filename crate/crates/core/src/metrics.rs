//! Posterior-predictive evaluation and training-curve summaries.

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, softmax_rows, Tape};
use crate::brownian::{derive_seed, BrownianPath};
use crate::data::{batch_key, Dataset, Targets};
use crate::error::{Error, Result};
use crate::model::{HeadKind, Model};
use crate::scalar::Scalar;
use crate::solver::SolverConfig;

/// Regression intervals are only reported from at least this many samples.
pub const MIN_REGRESSION_SAMPLES: usize = 30;

/// Two-sided 95% normal quantile.
const Z95: f64 = 1.959_963_984_540_054;

/// Keeps evaluation paths disjoint from the training stream.
const EVAL_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Posterior samples (independent weight paths) per batch.
    pub samples: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { samples: 1, batch_size: 500, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub examples: usize,
    /// Classification only.
    pub accuracy: Option<f64>,
    pub nll: f64,
    /// Drift evaluations per solve, averaged within a batch, then over batches.
    pub nfe_mean: f64,
    pub nfe_std: f64,
    /// Regression only: fraction of targets inside the 95% predictive interval.
    pub ci_coverage: Option<f64>,
    /// Regression only: RMSE of the predictive mean.
    pub rmse: Option<f64>,
}

/// Moment-matched summary of an equal-weight Gaussian mixture.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixturePrediction {
    pub mean: f64,
    pub std: f64,
    pub lower: f64,
    pub upper: f64,
}

pub fn mixture_prediction(means: &[f64], log_vars: &[f64]) -> MixturePrediction {
    let n = means.len() as f64;
    let mean = means.iter().sum::<f64>() / n;
    let second = means.iter().zip(log_vars).map(|(m, lv)| lv.exp() + m * m).sum::<f64>() / n;
    let std = (second - mean * mean).max(0.0).sqrt();
    MixturePrediction { mean, std, lower: mean - Z95 * std, upper: mean + Z95 * std }
}

/// `-log (1/S) Σ_s N(y; mean_s, exp(log_var_s))`
pub fn mixture_nll(y: f64, means: &[f64], log_vars: &[f64]) -> f64 {
    let logs: Vec<f64> = means
        .iter()
        .zip(log_vars)
        .map(|(m, lv)| -crate::autodiff::gaussian_nll_point(y, *m, *lv))
        .collect();
    (means.len() as f64).ln() - log_sum_exp(&logs)
}

/// Accuracy and mean NLL of row-major `[N, classes]` predictive probabilities.
pub fn accuracy_and_nll(probs: &[f64], classes: usize, labels: &[usize]) -> Result<(f64, f64)> {
    if labels.is_empty() || probs.len() != labels.len() * classes {
        return Err(Error::contract(format!("{} probabilities for {} labels", probs.len(), labels.len())));
    }
    let mut correct = 0usize;
    let mut nll = 0.0;
    for (row, &y) in probs.chunks(classes).zip(labels) {
        let argmax = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
            .0;
        correct += (argmax == y) as usize;
        nll -= row[y].max(f64::MIN_POSITIVE).ln();
    }
    let n = labels.len() as f64;
    Ok((correct as f64 / n, nll / n))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

struct Collected {
    /// Summed probabilities, row-major `[N, classes]` (classification).
    prob_sum: Vec<f64>,
    /// Per example, per sample (mean, log-variance) (regression).
    gauss: Vec<(Vec<f64>, Vec<f64>)>,
    batch_nfe: Vec<f64>,
}

fn collect<T: Scalar>(model: &Model<T>, data: &Dataset<T>, solver: &SolverConfig, cfg: &EvalConfig) -> Result<Collected> {
    if data.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    if cfg.samples == 0 || cfg.batch_size == 0 {
        return Err(Error::config("evaluation needs samples > 0 and batch_size > 0"));
    }
    let regression = matches!(model.config.head, HeadKind::Gaussian);
    if regression && cfg.samples < MIN_REGRESSION_SAMPLES {
        return Err(Error::config(format!(
            "regression evaluation needs at least {MIN_REGRESSION_SAMPLES} posterior samples, got {}",
            cfg.samples
        )));
    }
    let outputs = model.config.head.outputs();
    let order: Vec<usize> = (0..data.len()).collect();
    let mut c = Collected {
        prob_sum: vec![0.0; if regression { 0 } else { data.len() * outputs }],
        gauss: Vec::new(),
        batch_nfe: Vec::new(),
    };
    let mut offset = 0;
    for batch in data.batches(&order, cfg.batch_size) {
        let key = batch_key(&batch.ids);
        let b = batch.len();
        if regression {
            c.gauss.extend((0..b).map(|_| (Vec::with_capacity(cfg.samples), Vec::with_capacity(cfg.samples))));
        }
        let mut nfe = 0usize;
        for s in 0..cfg.samples {
            let seed = derive_seed(&[cfg.seed, EVAL_STREAM, key, s as u64]);
            let path = BrownianPath::new(seed, model.weight_dim(), solver.t0, solver.t1)?;
            let tape = Tape::no_grad();
            let bound = model.params.bind(&tape);
            let out = model
                .sample(&bound, &batch.inputs, &path, solver, None)
                .map_err(|e| e.with_context(format!("evaluation batch at example {offset}, sample {s}")))?;
            nfe += out.stats.nfe_f;
            let value = out.output.value();
            if regression {
                for (i, pair) in value.data().chunks(2).enumerate() {
                    let (m, lv) = &mut c.gauss[offset + i];
                    m.push(pair[0].to_f64_lossy());
                    lv.push(pair[1].to_f64_lossy());
                }
            } else {
                let probs = softmax_rows(value, outputs);
                for (acc, p) in c.prob_sum[offset * outputs..(offset + b) * outputs].iter_mut().zip(probs.data()) {
                    *acc += p.to_f64_lossy();
                }
            }
        }
        c.batch_nfe.push(nfe as f64 / cfg.samples as f64);
        offset += b;
    }
    Ok(c)
}

/// Per-example predictive summaries of a regression model; targets in
/// `data` are ignored.
pub fn regression_predictions<T: Scalar>(
    model: &Model<T>,
    data: &Dataset<T>,
    solver: &SolverConfig,
    cfg: &EvalConfig,
) -> Result<Vec<MixturePrediction>> {
    if !matches!(model.config.head, HeadKind::Gaussian) {
        return Err(Error::contract("regression predictions need a gaussian head"));
    }
    let c = collect(model, data, solver, cfg)?;
    Ok(c.gauss.iter().map(|(m, lv)| mixture_prediction(m, lv)).collect())
}

/// Posterior-predictive metrics over `data`, in dataset order. Each batch
/// draws `samples` weight paths seeded from `(seed, batch ids, sample)`, so
/// the result is a deterministic function of the parameters and config.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    data: &Dataset<T>,
    solver: &SolverConfig,
    cfg: &EvalConfig,
) -> Result<EvalSummary> {
    let regression = matches!(model.config.head, HeadKind::Gaussian);
    let outputs = model.config.head.outputs();
    match &data.targets {
        Targets::Classes { classes, .. } if regression || *classes != outputs => {
            return Err(Error::contract("classification targets need a categorical head of matching width"));
        }
        Targets::Values(_) if !regression => return Err(Error::contract("regression targets need a gaussian head")),
        _ => {}
    }
    let c = collect(model, data, solver, cfg)?;
    let (nfe_mean, nfe_std) = mean_std(&c.batch_nfe);
    let n = data.len() as f64;
    match &data.targets {
        Targets::Classes { labels, .. } => {
            let probs: Vec<f64> = c.prob_sum.iter().map(|p| p / cfg.samples as f64).collect();
            let (accuracy, nll) = accuracy_and_nll(&probs, outputs, labels)?;
            Ok(EvalSummary {
                examples: data.len(),
                accuracy: Some(accuracy),
                nll,
                nfe_mean,
                nfe_std,
                ci_coverage: None,
                rmse: None,
            })
        }
        Targets::Values(ys) => {
            let (mut covered, mut sq, mut nll) = (0usize, 0.0, 0.0);
            for (y, (m, lv)) in ys.iter().zip(&c.gauss) {
                let pred = mixture_prediction(m, lv);
                covered += (pred.lower <= *y && *y <= pred.upper) as usize;
                sq += (pred.mean - y).powi(2);
                nll += mixture_nll(*y, m, lv);
            }
            Ok(EvalSummary {
                examples: data.len(),
                accuracy: None,
                nll: nll / n,
                nfe_mean,
                nfe_std,
                ci_coverage: Some(covered as f64 / n),
                rmse: Some((sq / n).sqrt()),
            })
        }
    }
}

/// Trapezoidal area under `accuracy(epoch)` divided by the epoch span.
pub fn auc_over_epochs(epochs: &[f64], accuracy: &[f64]) -> Result<f64> {
    if epochs.len() != accuracy.len() {
        return Err(Error::shape(format!("{} epochs but {} accuracies", epochs.len(), accuracy.len())));
    }
    if epochs.len() < 2 {
        return Err(Error::contract("AUC needs at least two logged epochs"));
    }
    if epochs.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::contract("epochs must be strictly increasing"));
    }
    let area: f64 = epochs
        .windows(2)
        .zip(accuracy.windows(2))
        .map(|(e, a)| 0.5 * (a[0] + a[1]) * (e[1] - e[0]))
        .sum();
    Ok(area / (epochs[epochs.len() - 1] - epochs[0]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ActivationKind;
    use crate::dynamics::{DynamicsConfig, Variant};
    use crate::model::ModelConfig;
    use crate::tensor::Tensor;
    use crate::weights::DriftArch;
    use proptest::prelude::*;

    #[test]
    fn hand_labelled_fixture() {
        // Three classes, ten examples; probabilities and labels chosen by hand.
        let probs = [
            0.7, 0.2, 0.1, //
            0.1, 0.8, 0.1, //
            0.3, 0.3, 0.4, //
            0.5, 0.25, 0.25, //
            0.2, 0.6, 0.2, //
            0.1, 0.1, 0.8, //
            0.4, 0.5, 0.1, //
            0.6, 0.3, 0.1, //
            0.2, 0.2, 0.6, //
            0.05, 0.9, 0.05,
        ];
        let labels = [0, 1, 2, 1, 1, 0, 0, 0, 2, 1];
        // argmax: 0 1 2 0 1 2 1 0 2 1 -> correct at 0,1,2,4,7,8,9
        let expected_acc = 7.0 / 10.0;
        let picked: [f64; 10] = [0.7, 0.8, 0.4, 0.25, 0.6, 0.1, 0.4, 0.6, 0.6, 0.9];
        let expected_nll = -picked.iter().map(|p| p.ln()).sum::<f64>() / 10.0;
        let (acc, nll) = accuracy_and_nll(&probs, 3, &labels).unwrap();
        assert_eq!(acc, expected_acc);
        assert!((nll - expected_nll).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_uniform_predictors() {
        let one_hot = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(accuracy_and_nll(&one_hot, 2, &[0, 1]).unwrap(), (1.0, 0.0));
        let uniform = vec![0.1; 20];
        let (_, nll) = accuracy_and_nll(&uniform, 10, &[3, 7]).unwrap();
        assert!((nll - 10f64.ln()).abs() < 1e-12);
    }

    fn classifier(variant: Variant) -> Model<f64> {
        let cfg = ModelConfig {
            input_shape: vec![2],
            augment: 1,
            arch: DriftArch::Dense { width: 3, hidden: vec![4] },
            drift_activation: ActivationKind::Tanh,
            posterior: "1-3-1".parse().unwrap(),
            posterior_activation: ActivationKind::Tanh,
            sigma: 0.1,
            head: HeadKind::Categorical { classes: 10 },
            init_seed: 1,
        };
        Model::new(cfg, DynamicsConfig::new(variant, ActivationKind::Tanh)).unwrap()
    }

    fn class_data(n: usize, label: usize) -> Dataset<f64> {
        let xs: Vec<f64> = (0..2 * n).map(|i| (i as f64 * 0.37).sin()).collect();
        Dataset::new(Tensor::from_f64([n, 2], &xs).unwrap(), Targets::Classes { labels: vec![label; n], classes: 10 })
            .unwrap()
    }

    #[test]
    fn evaluate_constant_and_uniform_heads() {
        let mut m = classifier(Variant::NesterovSkip);
        m.params.set(m.head_weight, Tensor::zeros([3, 10])).unwrap();
        let data = class_data(7, 4);
        let cfg = EvalConfig { samples: 2, batch_size: 3, seed: 9 };
        let s = evaluate(&m, &data, &SolverConfig::default(), &cfg).unwrap();
        assert!((s.nll - 10f64.ln()).abs() < 1e-12);
        assert_eq!((s.nfe_mean, s.nfe_std), (40.0, 0.0));
        let mut bias = vec![0.0; 10];
        bias[4] = 50.0;
        m.params.set(m.head_bias, Tensor::from_f64([10], &bias).unwrap()).unwrap();
        let s = evaluate(&m, &data, &SolverConfig::default(), &cfg).unwrap();
        assert_eq!(s.accuracy, Some(1.0));
        assert_eq!(s.examples, 7);
    }

    #[test]
    fn evaluate_is_deterministic_and_rejects_empty() {
        let m = classifier(Variant::Baseline);
        let data = class_data(5, 1);
        let cfg = EvalConfig { samples: 2, batch_size: 2, seed: 3 };
        let a = evaluate(&m, &data, &SolverConfig::default(), &cfg).unwrap();
        assert_eq!(a, evaluate(&m, &data, &SolverConfig::default(), &cfg).unwrap());
        let empty = data.select(&[]);
        assert!(matches!(evaluate(&m, &empty, &SolverConfig::default(), &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn mixture_of_one_is_the_gaussian() {
        let p = mixture_prediction(&[1.0], &[(0.25f64).ln()]);
        assert!((p.std - 0.5).abs() < 1e-15);
        assert!((p.upper - (1.0 + Z95 * 0.5)).abs() < 1e-15);
        let nll = mixture_nll(1.5, &[1.0], &[(0.25f64).ln()]);
        let direct = 0.5 * (2.0 * std::f64::consts::PI * 0.25).ln() + 0.5 * 0.25 / 0.25;
        assert!((nll - direct).abs() < 1e-12);
    }

    #[test]
    fn mixture_moments_match_sampling_identity() {
        let means = [0.0, 2.0];
        let lvs = [0.0, 0.0];
        let p = mixture_prediction(&means, &lvs);
        assert!((p.mean - 1.0).abs() < 1e-15);
        // var = E[var] + Var[mean] = 1 + 1
        assert!((p.std - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn auc_examples() {
        let e: Vec<f64> = (0..=10).map(f64::from).collect();
        assert!((auc_over_epochs(&e, &[0.9; 11]).unwrap() - 0.9).abs() < 1e-15);
        let lin: Vec<f64> = e.iter().map(|x| x / 10.0).collect();
        assert!((auc_over_epochs(&e, &lin).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(auc_over_epochs(&[1.0], &[0.5]), Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn auc_monotone_and_reindex_invariant(
            base in prop::collection::vec(0.0f64..1.0, 2..20),
            bump in prop::collection::vec(0.0f64..1.0, 20),
            scale in 0.1f64..10.0,
            shift in -5.0f64..5.0,
        ) {
            let e: Vec<f64> = (0..base.len()).map(|i| i as f64).collect();
            let higher: Vec<f64> = base.iter().zip(&bump).map(|(a, b)| (a + b * (1.0 - a)).min(1.0)).collect();
            let a = auc_over_epochs(&e, &higher).unwrap();
            let b = auc_over_epochs(&e, &base).unwrap();
            prop_assert!(a >= b - 1e-12);
            prop_assert!((0.0..=1.0).contains(&b));
            let re: Vec<f64> = e.iter().map(|x| x * scale + shift).collect();
            prop_assert!((auc_over_epochs(&re, &base).unwrap() - b).abs() < 1e-12);
        }
    }
}
