//! Drift fields of the baseline SDE-BNN and the Nesterov reformulation.
//!
//! The Nesterov variants carry `(x, m)` in place of `h`; the activation fed
//! to the drift network and the output head is `h = s(t) x` with
//! `s(t) = act(t^{-3/2} e^{t/2})`. The skip variant additionally keeps a
//! [`ResidualCache`] whose parity decides when the cached activation is
//! injected into the momentum update.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ActivationKind, Var};
use crate::error::{Error, Result};
use crate::params::BoundParams;
use crate::scalar::Scalar;
use crate::solver::DriftField;
use crate::state::JointState;
use crate::tensor::Tensor;
use crate::weights::{kl_integrand, weight_drift, DriftReading, HyperNetwork, PosteriorDriftNet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    NesterovDirect,
    NesterovSkip,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::NesterovDirect => "nesterov_direct",
            Variant::NesterovSkip => "nesterov_skip",
        }
    }

    pub fn has_momentum(self) -> bool {
        self != Variant::Baseline
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "nesterov_direct" => Ok(Variant::NesterovDirect),
            "nesterov_skip" => Ok(Variant::NesterovSkip),
            other => Err(format!("unknown variant `{other}`")),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    NesterovTimeScale,
    None,
}

/// What the residual-skip parity counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParityMode {
    /// Parity of the drift-evaluation counter.
    #[default]
    PerEvaluation,
    /// Parity of the accepted-step counter; every evaluation inside an
    /// even step overwrites the cache.
    PerStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    pub variant: Variant,
    /// Residual strength; ignored by the baseline.
    #[serde(default = "default_xi")]
    pub xi: f64,
    #[serde(default = "default_scaling")]
    pub scaling: Scaling,
    /// The nonlinearity inside the Nesterov equations.
    pub activation: ActivationKind,
    #[serde(default)]
    pub parity: ParityMode,
    #[serde(default)]
    pub reading: DriftReading,
}

fn default_xi() -> f64 {
    1.0
}

fn default_scaling() -> Scaling {
    Scaling::NesterovTimeScale
}

impl DynamicsConfig {
    pub fn new(variant: Variant, activation: ActivationKind) -> Self {
        Self {
            variant,
            xi: default_xi(),
            scaling: default_scaling(),
            activation,
            parity: ParityMode::default(),
            reading: DriftReading::default(),
        }
    }
}

/// `act(t^{-3/2} e^{t/2})`.
pub fn time_scale_factor(t: f64, kind: ActivationKind) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::NumericDomain(format!("time scale is singular for t = {t} <= 0")));
    }
    Ok(kind.eval(t.powf(-1.5) * (0.5 * t).exp()))
}

/// `h = act(t^{-3/2} e^{t/2}) x`.
pub fn time_scale<'t, T: Scalar>(t: f64, x: &Var<'t, T>, kind: ActivationKind) -> Result<Var<'t, T>> {
    Ok(x.scale(T::lit(time_scale_factor(t, kind)?)))
}

/// One evaluation as seen by the cache.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CacheEvent {
    /// Counter value at the time of the evaluation.
    pub nfe_f: usize,
    pub epsilon: u8,
    pub overwrote: bool,
}

/// The `(epsilon, h_temp, NFE_f)` state machine of the skip variant.
#[derive(Clone, Debug)]
pub struct ResidualCache<'t, T: Scalar> {
    pub nfe_f: usize,
    pub steps: usize,
    pub h_temp: Var<'t, T>,
    pub epsilon: u8,
    mode: ParityMode,
    trace: Option<Vec<CacheEvent>>,
}

impl<'t, T: Scalar> ResidualCache<'t, T> {
    /// Fresh cache holding the network input.
    pub fn new(input: Var<'t, T>, mode: ParityMode) -> Self {
        Self { nfe_f: 0, steps: 0, h_temp: input, epsilon: 0, mode, trace: None }
    }

    /// Record every evaluation's `(nfe_f, epsilon, overwrote)`.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn trace(&self) -> Option<&[CacheEvent]> {
        self.trace.as_deref()
    }

    fn counter(&self) -> usize {
        match self.mode {
            ParityMode::PerEvaluation => self.nfe_f,
            ParityMode::PerStep => self.steps,
        }
    }

    /// Set `epsilon` from the current parity and return it.
    fn begin(&mut self) -> u8 {
        self.epsilon = (self.counter() % 2) as u8;
        self.epsilon
    }

    /// Overwrite `h_temp` when the parity is even, after the momentum drift
    /// for this evaluation has been computed.
    fn finish(&mut self, h: &Var<'t, T>) -> Result<()> {
        if h.shape() != self.h_temp.shape() {
            return Err(Error::contract(format!(
                "cached activation {:?} does not match {:?}",
                self.h_temp.shape(),
                h.shape()
            )));
        }
        let overwrite = self.epsilon == 0;
        if overwrite {
            self.h_temp = h.clone();
        }
        if let Some(trace) = &mut self.trace {
            trace.push(CacheEvent { nfe_f: self.nfe_f, epsilon: self.epsilon, overwrote: overwrite });
        }
        Ok(())
    }
}

/// The drift of the augmented system for any [`Variant`].
pub struct SdeBnnField<'a, 't, T: Scalar> {
    pub hyper: &'a HyperNetwork,
    pub posterior: &'a PosteriorDriftNet,
    pub params: &'a BoundParams<'t, T>,
    pub cfg: &'a DynamicsConfig,
    /// Diffusion scale used in the KL integrand.
    pub sigma: f64,
    pub cache: Option<ResidualCache<'t, T>>,
}

impl<'a, 't, T: Scalar> SdeBnnField<'a, 't, T> {
    /// Field plus initial state for `input`; the skip variant's cache is
    /// seeded with `input`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        hyper: &'a HyperNetwork,
        posterior: &'a PosteriorDriftNet,
        params: &'a BoundParams<'t, T>,
        cfg: &'a DynamicsConfig,
        sigma: f64,
        input: &Var<'t, T>,
    ) -> Self {
        let cache = (cfg.variant == Variant::NesterovSkip).then(|| ResidualCache::new(input.clone(), cfg.parity));
        Self { hyper, posterior, params, cfg, sigma, cache }
    }

    /// Activation seen by the drift network and the head.
    pub fn activation_of(&self, act: &Var<'t, T>, t: f64) -> Result<Var<'t, T>> {
        readout(self.cfg, act, t)
    }

    fn weight_terms(&self, w: &Var<'t, T>, t: f64) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let nn = self.posterior.forward(self.params, w, t)?;
        let (drift, gap) = weight_drift(&nn, w, t, self.cfg.reading)?;
        Ok((drift, kl_integrand(&gap, self.sigma)?))
    }
}

/// `h_t` from the stored activation channel: the time-scaled `x_t` for the
/// Nesterov variants, the channel itself for the baseline.
pub fn readout<'t, T: Scalar>(cfg: &DynamicsConfig, act: &Var<'t, T>, t: f64) -> Result<Var<'t, T>> {
    match (cfg.variant, cfg.scaling) {
        (Variant::Baseline, _) | (_, Scaling::None) => Ok(act.clone()),
        (_, Scaling::NesterovTimeScale) => time_scale(t, act, cfg.activation),
    }
}

/// Initial joint state for `input` with weights `w0`.
pub fn initial_state<'t, T: Scalar>(variant: Variant, input: &Var<'t, T>, w0: &Var<'t, T>) -> JointState<'t, T> {
    let tape = input.tape();
    JointState {
        act: input.clone(),
        momentum: variant.has_momentum().then(|| tape.constant(Tensor::zeros(input.shape().to_vec()))),
        weights: w0.clone(),
        kl: tape.constant(Tensor::scalar(T::zero())),
    }
}

impl<'t, T: Scalar> DriftField<'t, T> for SdeBnnField<'_, 't, T> {
    type Snapshot = Option<ResidualCache<'t, T>>;

    fn evaluate(&mut self, s: &JointState<'t, T>, t: f64) -> Result<JointState<'t, T>> {
        let (dw, dkl) = self.weight_terms(&s.weights, t)?;
        let cfg = self.cfg;
        if cfg.variant == Variant::Baseline {
            if s.momentum.is_some() {
                return Err(Error::contract("baseline state carries a momentum channel"));
            }
            let dh = self.hyper.forward(&s.act, t, &s.weights)?;
            return Ok(JointState { act: dh, momentum: None, weights: dw, kl: dkl });
        }

        let m = s.momentum.as_ref().ok_or_else(|| Error::contract("Nesterov state needs momentum"))?;
        let h = readout(cfg, &s.act, t)?;
        let dx = m.activation(cfg.activation)?;
        let f = self.hyper.forward(&h, t, &s.weights)?;
        let xi = T::lit(cfg.xi);
        let pushed = match cfg.variant {
            Variant::NesterovDirect => f.activation(cfg.activation)?.add_scaled(&h, xi)?,
            Variant::NesterovSkip => {
                let cache = self.cache.as_mut().ok_or_else(|| Error::contract("skip variant without a cache"))?;
                let inner = if cache.begin() == 1 { f.add_scaled(&cache.h_temp, xi)? } else { f };
                let pushed = inner.activation(cfg.activation)?;
                cache.finish(&h)?;
                pushed
            }
            Variant::Baseline => unreachable!(),
        };
        let dm = m.neg().sub(&pushed)?;
        Ok(JointState { act: dx, momentum: Some(dm), weights: dw, kl: dkl })
    }

    fn notify_evaluation(&mut self) {
        if let Some(c) = &mut self.cache {
            c.nfe_f += 1;
        }
    }

    fn notify_step(&mut self) {
        if let Some(c) = &mut self.cache {
            c.steps += 1;
        }
    }

    fn snapshot(&self) -> Self::Snapshot {
        self.cache.clone()
    }

    fn restore(&mut self, snapshot: Self::Snapshot) {
        self.cache = snapshot;
    }
}
