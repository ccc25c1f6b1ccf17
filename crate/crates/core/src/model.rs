//! A complete network: input augmentation, the augmented SDE, and the
//! likelihood head on `h_T`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ActivationKind, Tape, Var};
use crate::brownian::BrownianPath;
use crate::dynamics::{initial_state, readout, DynamicsConfig, SdeBnnField};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::solver::{replay, solve, Mode, ScalarDiffusion, SolverConfig, Step};
use crate::tensor::Tensor;
use crate::weights::{fan_in_normal, init_rng, DriftArch, HyperNetwork, PosteriorDriftNet, PosteriorSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HeadKind {
    /// Softmax over `classes` logits.
    Categorical { classes: usize },
    /// Mean and log-variance of a scalar target.
    Gaussian,
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::Categorical { classes } => classes,
            HeadKind::Gaussian => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Per-example input shape before augmentation: `[features]` or `[C, H, W]`.
    pub input_shape: Vec<usize>,
    /// Zero channels appended to the input.
    pub augment: usize,
    pub arch: DriftArch,
    /// Nonlinearity inside `f_w`.
    pub drift_activation: ActivationKind,
    pub posterior: PosteriorSpec,
    pub posterior_activation: ActivationKind,
    /// Diffusion scale of the prior and posterior.
    pub sigma: f64,
    pub head: HeadKind,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Per-example state shape after augmentation.
    pub fn state_shape(&self) -> Result<Vec<usize>> {
        let mut s = self.input_shape.clone();
        let first = s.first_mut().ok_or_else(|| Error::config("input_shape is empty"))?;
        *first += self.augment;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::config(format!("sigma must be positive, got {}", self.sigma)));
        }
        let state = self.state_shape()?;
        let fits = match &self.arch {
            DriftArch::Dense { width, .. } => state.len() == 1 && state[0] == *width,
            DriftArch::Conv { channels, .. } => state.len() == 3 && state[0] == *channels,
        };
        if !fits {
            return Err(Error::config(format!(
                "augmented input shape {state:?} does not fit drift architecture {:?}",
                self.arch
            )));
        }
        if let HeadKind::Categorical { classes } = self.head {
            if classes < 2 {
                return Err(Error::config("categorical head needs at least 2 classes"));
            }
        }
        Ok(())
    }
}

/// Everything the SDE solve returns besides the final state.
#[derive(Clone, Debug, PartialEq)]
pub struct SolveStats {
    pub nfe_f: usize,
    pub nfe_g: usize,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub step_log: Vec<Step>,
}

pub struct SampleOutput<'t, T: Scalar> {
    /// `[B, outputs]` head output.
    pub output: Var<'t, T>,
    /// `kl_acc(T)`.
    pub kl: Var<'t, T>,
    pub stats: SolveStats,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub dynamics: DynamicsConfig,
    pub hyper: HyperNetwork,
    pub posterior: PosteriorDriftNet,
    pub params: ParamSet<T>,
    pub w0: ParamId,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, dynamics: DynamicsConfig) -> Result<Self> {
        config.validate()?;
        let hyper = HyperNetwork::new(config.arch.clone(), config.drift_activation)?;
        let mut rng = init_rng(config.init_seed);
        let mut params = ParamSet::new();
        let w0 = params.push("w0", hyper.init_weights(&mut rng));
        let posterior = PosteriorDriftNet::new(
            config.posterior.clone(),
            config.posterior_activation,
            hyper.dim(),
            &mut params,
            &mut rng,
        )?;
        let features: usize = config.state_shape()?.iter().product();
        let outputs = config.head.outputs();
        let head_weight = params.push("head.weight", fan_in_normal(&[features, outputs], features, 1.0, &mut rng));
        let head_bias = params.push("head.bias", Tensor::zeros([outputs]));
        Ok(Self { config, dynamics, hyper, posterior, params, w0, head_weight, head_bias })
    }

    pub fn weight_dim(&self) -> usize {
        self.hyper.dim()
    }

    /// Append the zero augmentation channels to a `[B, ...]` input.
    pub fn augment<'t>(&self, tape: &'t Tape<T>, inputs: &Tensor<T>) -> Result<Var<'t, T>> {
        let per_example = &inputs.shape()[1..];
        if per_example != self.config.input_shape.as_slice() {
            return Err(Error::shape(format!(
                "input examples have shape {per_example:?}, model expects {:?}",
                self.config.input_shape
            )));
        }
        let x = tape.constant(inputs.clone());
        if self.config.augment == 0 {
            return Ok(x);
        }
        let mut zshape = inputs.shape().to_vec();
        zshape[1] = self.config.augment;
        Var::concat(&[x, tape.constant(Tensor::zeros(zshape))])
    }

    /// One posterior sample for a batch: solve the augmented SDE along
    /// `path`, read out `h_T` and apply the head. With `schedule`, the given
    /// steps are replayed instead of running the configured controller.
    pub fn sample<'t>(
        &self,
        bound: &BoundParams<'t, T>,
        inputs: &Tensor<T>,
        path: &BrownianPath,
        solver: &SolverConfig,
        schedule: Option<&[Step]>,
    ) -> Result<SampleOutput<'t, T>> {
        let tape = bound.get(self.w0).tape();
        let x = self.augment(tape, inputs)?;
        let mut field = SdeBnnField::new(&self.hyper, &self.posterior, bound, &self.dynamics, self.config.sigma, &x);
        let init = initial_state(self.dynamics.variant, &x, bound.get(self.w0));
        let diffusion = ScalarDiffusion { sigma: self.config.sigma };
        let report = match schedule {
            Some(steps) => replay(&mut field, &diffusion, path, init, solver, steps)?,
            None => solve(&mut field, &diffusion, path, init, solver)?,
        };
        let h = readout(&self.dynamics, &report.final_state.act, solver.t1)?;
        let batch = h.shape()[0];
        let flat = h.reshape([batch, h.value().numel() / batch])?;
        let output = flat.affine(bound.get(self.head_weight), bound.get(self.head_bias))?;
        Ok(SampleOutput {
            output,
            kl: report.final_state.kl,
            stats: SolveStats {
                nfe_f: report.nfe_f,
                nfe_g: report.nfe_g,
                accepted_steps: report.accepted_steps,
                rejected_steps: report.rejected_steps,
                step_log: report.step_log,
            },
        })
    }

    /// [`Model::sample`] on a recording tape. In adaptive mode the step
    /// sequence is chosen by an untaped solve first and then replayed, so
    /// accept/reject decisions never enter the graph; the returned stats are
    /// those of the untaped solve.
    pub fn sample_for_training<'t>(
        &self,
        bound: &BoundParams<'t, T>,
        inputs: &Tensor<T>,
        path: &BrownianPath,
        solver: &SolverConfig,
    ) -> Result<SampleOutput<'t, T>> {
        if solver.mode == Mode::Fixed {
            return self.sample(bound, inputs, path, solver, None);
        }
        let probe_tape = Tape::no_grad();
        let probe = self.sample(&self.params.bind(&probe_tape), inputs, path, solver, None)?;
        let mut out = self.sample(bound, inputs, path, solver, Some(&probe.stats.step_log))?;
        out.stats = probe.stats;
        Ok(out)
    }

    /// Replace all parameters with `other`'s, which must have the same layout.
    pub fn load_params(&mut self, other: &ParamSet<T>) -> Result<()> {
        self.params.load_from(other)
    }
}
