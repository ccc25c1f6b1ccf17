//! The weight process: OU prior, learned posterior drift, and the
//! hypernetwork that reads the flat weight state as the parameters of the
//! activation drift network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ActivationKind, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::solver::{DriftField, ScalarDiffusion};
use crate::state::JointState;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub sigma: f64,
    pub dim: usize,
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::config(format!("diffusion sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// OU prior drift `f_p(w, t) = -w`.
pub fn prior_drift<'t, T: Scalar>(w: &Var<'t, T>, _t: f64) -> Var<'t, T> {
    w.neg()
}

/// The state-independent diffusion `sigma * I`.
pub fn prior_diffusion(cfg: &PriorConfig) -> ScalarDiffusion {
    ScalarDiffusion { sigma: cfg.sigma }
}

/// The prior process on its own: the weights follow `f_p`, the activation
/// channel stays put and no KL accrues.
#[derive(Clone, Copy, Debug, Default)]
pub struct PriorField;

impl PriorField {
    /// A state carrying only weights `w` (plus a one-element activation).
    pub fn state<'t, T: Scalar>(tape: &'t Tape<T>, w: Tensor<T>) -> JointState<'t, T> {
        JointState {
            act: tape.constant(Tensor::zeros([1])),
            momentum: None,
            weights: tape.constant(w),
            kl: tape.constant(Tensor::scalar(T::zero())),
        }
    }
}

impl<'t, T: Scalar> DriftField<'t, T> for PriorField {
    type Snapshot = ();

    fn evaluate(&mut self, s: &JointState<'t, T>, t: f64) -> Result<JointState<'t, T>> {
        Ok(JointState { act: s.act.scale(T::zero()), momentum: None, weights: prior_drift(&s.weights, t), kl: s.kl.scale(T::zero()) })
    }

    fn snapshot(&self) {}

    fn restore(&mut self, _: ()) {}
}

/// Which drift is integrated for the weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftReading {
    /// `dw = f_q dt + sigma dB` with `f_q = NN - f_p`, so `u = (NN - 2 f_p) / sigma`.
    #[default]
    IntegratePosterior,
    /// `dw = NN dt + sigma dB` and `u = (NN - f_p) / sigma`.
    IntegrateNetwork,
}

/// Weight-channel drift and the drift gap `f_q - f_p` that enters the KL
/// integrand, given the network output `nn` at `w`.
pub fn weight_drift<'t, T: Scalar>(
    nn: &Var<'t, T>,
    w: &Var<'t, T>,
    t: f64,
    reading: DriftReading,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let fp = prior_drift(w, t);
    match reading {
        DriftReading::IntegratePosterior => {
            let fq = nn.sub(&fp)?;
            let gap = fq.sub(&fp)?;
            Ok((fq, gap))
        }
        DriftReading::IntegrateNetwork => Ok((nn.clone(), nn.sub(&fp)?)),
    }
}

/// `f_q(w, t) = NN(w, t) - f_p(w, t)`.
pub fn posterior_drift<'t, T: Scalar>(
    params: &BoundParams<'t, T>,
    net: &PosteriorDriftNet,
    w: &Var<'t, T>,
    t: f64,
) -> Result<Var<'t, T>> {
    net.forward(params, w, t)?.sub(&prior_drift(w, t))
}

/// `½‖gap / sigma‖²`.
pub fn kl_integrand<'t, T: Scalar>(gap: &Var<'t, T>, sigma: f64) -> Result<Var<'t, T>> {
    if !(sigma > 0.0) {
        return Err(Error::NumericDomain(format!("KL integrand needs sigma > 0, got {sigma}")));
    }
    Ok(gap.sum_squares()?.scale(T::lit(0.5 / (sigma * sigma))))
}

/// Shape of the posterior drift network, written `c-h-c` (chunk, hidden,
/// chunk) or a bare hidden width `h` meaning chunk 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PosteriorSpec {
    pub chunk: usize,
    pub hidden: Vec<usize>,
}

impl std::str::FromStr for PosteriorSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<usize> = s
            .split('-')
            .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad posterior spec `{s}`")))
            .collect::<std::result::Result<_, _>>()?;
        let spec = match parts.as_slice() {
            [h] => PosteriorSpec { chunk: 1, hidden: vec![*h] },
            [c, hidden @ .., c2] if !hidden.is_empty() && c == c2 => {
                PosteriorSpec { chunk: *c, hidden: hidden.to_vec() }
            }
            _ => return Err(format!("posterior spec `{s}` must be `h` or `c-h..-c`")),
        };
        if spec.chunk == 0 || spec.hidden.contains(&0) {
            return Err(format!("posterior spec `{s}` has a zero width"));
        }
        Ok(spec)
    }
}

impl TryFrom<String> for PosteriorSpec {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<PosteriorSpec> for String {
    fn from(s: PosteriorSpec) -> String {
        let mut parts = vec![s.chunk.to_string()];
        parts.extend(s.hidden.iter().map(usize::to_string));
        parts.push(s.chunk.to_string());
        parts.join("-")
    }
}

/// `NN_phi`: one small MLP applied to each consecutive chunk of `w` with
/// `t` appended, so the parameter count does not grow with `dim(w)`.
#[derive(Clone, Debug)]
pub struct PosteriorDriftNet {
    spec: PosteriorSpec,
    activation: ActivationKind,
    layers: Vec<(ParamId, ParamId)>,
}

impl PosteriorDriftNet {
    pub fn new<T: Scalar>(
        spec: PosteriorSpec,
        activation: ActivationKind,
        dim: usize,
        params: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if dim % spec.chunk != 0 {
            return Err(Error::config(format!(
                "weight dimension {dim} is not divisible by posterior chunk {}",
                spec.chunk
            )));
        }
        let mut widths = vec![spec.chunk + 1];
        widths.extend(&spec.hidden);
        widths.push(spec.chunk);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, io)| {
                let w = fan_in_normal(&[io[0], io[1]], io[0], 0.1, rng);
                let wid = params.push(format!("phi.{i}.weight"), w);
                let bid = params.push(format!("phi.{i}.bias"), Tensor::zeros([io[1]]));
                (wid, bid)
            })
            .collect();
        Ok(Self { spec, activation, layers })
    }

    pub fn spec(&self) -> &PosteriorSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    pub fn forward<'t, T: Scalar>(&self, params: &BoundParams<'t, T>, w: &Var<'t, T>, t: f64) -> Result<Var<'t, T>> {
        let n = w.value().numel();
        let c = self.spec.chunk;
        if n % c != 0 {
            return Err(Error::shape(format!("{n} weights not divisible by chunk {c}")));
        }
        let rows = n / c;
        let time = w.tape().constant(Tensor::full([rows, 1], T::lit(t)));
        let mut z = Var::concat(&[w.reshape([rows, c])?, time])?;
        for (i, &(wid, bid)) in self.layers.iter().enumerate() {
            if i > 0 {
                z = z.activation(self.activation)?;
            }
            z = z.affine(params.get(wid), params.get(bid))?;
        }
        z.reshape(w.shape().to_vec())
    }
}

/// Architecture of the activation drift network `f_w`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftArch {
    /// `[width + 1] -> hidden.. -> [width]` on `[B, width]` activations; `t`
    /// is appended to the input.
    Dense { width: usize, hidden: Vec<usize> },
    /// Per block: `conv(channels + 1 -> hidden)`, activation,
    /// `conv(hidden + 1 -> channels)`, with `t` appended as a constant
    /// channel before each convolution.
    Conv { channels: usize, hidden: usize, kernel: usize, blocks: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerShape {
    Dense { fan_in: usize, fan_out: usize },
    Conv { in_ch: usize, out_ch: usize, kernel: usize },
}

impl LayerShape {
    fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerShape::Dense { fan_in, fan_out } => vec![fan_in, fan_out],
            LayerShape::Conv { in_ch, out_ch, kernel } => vec![out_ch, in_ch, kernel, kernel],
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerShape::Dense { fan_in, .. } => fan_in,
            LayerShape::Conv { in_ch, kernel, .. } => in_ch * kernel * kernel,
        }
    }

    fn fan_out(&self) -> usize {
        match *self {
            LayerShape::Dense { fan_out, .. } => fan_out,
            LayerShape::Conv { out_ch, .. } => out_ch,
        }
    }
}

/// One tensor carved out of the flat weight vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceEntry {
    pub offset: usize,
    pub shape: Vec<usize>,
}

/// Reads a flat weight vector as the layers of `f_w`.
#[derive(Clone, Debug)]
pub struct HyperNetwork {
    arch: DriftArch,
    activation: ActivationKind,
    layers: Vec<LayerShape>,
    /// `(weight, bias)` slice per layer, laid out back to back.
    slices: Vec<(SliceEntry, SliceEntry)>,
    dim: usize,
}

impl HyperNetwork {
    pub fn new(arch: DriftArch, activation: ActivationKind) -> Result<Self> {
        let layers: Vec<LayerShape> = match &arch {
            DriftArch::Dense { width, hidden } => {
                if *width == 0 || hidden.contains(&0) {
                    return Err(Error::config("dense drift widths must be positive"));
                }
                let mut widths = vec![width + 1];
                widths.extend(hidden);
                widths.push(*width);
                widths.windows(2).map(|io| LayerShape::Dense { fan_in: io[0], fan_out: io[1] }).collect()
            }
            &DriftArch::Conv { channels, hidden, kernel, blocks } => {
                if channels == 0 || hidden == 0 || blocks == 0 || kernel % 2 == 0 {
                    return Err(Error::config("conv drift needs positive widths, blocks, and an odd kernel"));
                }
                (0..blocks)
                    .flat_map(|_| {
                        [
                            LayerShape::Conv { in_ch: channels + 1, out_ch: hidden, kernel },
                            LayerShape::Conv { in_ch: hidden + 1, out_ch: channels, kernel },
                        ]
                    })
                    .collect()
            }
        };
        let mut offset = 0;
        let mut slices = Vec::new();
        for l in &layers {
            let ws = l.weight_shape();
            let wn: usize = ws.iter().product();
            let w = SliceEntry { offset, shape: ws };
            offset += wn;
            let b = SliceEntry { offset, shape: vec![l.fan_out()] };
            offset += l.fan_out();
            slices.push((w, b));
        }
        Ok(Self { arch, activation, layers, slices, dim: offset })
    }

    /// Number of weights `f_w` needs, i.e. `dim(w_t)`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn arch(&self) -> &DriftArch {
        &self.arch
    }

    pub fn activation(&self) -> ActivationKind {
        self.activation
    }

    pub fn slices(&self) -> &[(SliceEntry, SliceEntry)] {
        &self.slices
    }

    /// Shape of the activation state for a batch of `batch`, given the
    /// spatial extent for the convolutional architecture.
    pub fn state_shape(&self, batch: usize, spatial: (usize, usize)) -> Vec<usize> {
        match self.arch {
            DriftArch::Dense { width, .. } => vec![batch, width],
            DriftArch::Conv { channels, .. } => vec![batch, channels, spatial.0, spatial.1],
        }
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if n != self.dim {
            return Err(Error::config(format!(
                "drift network needs {} weights, got {n}",
                self.dim
            )));
        }
        Ok(())
    }

    /// Split `w` into per-layer `(weight, bias)` tensors.
    pub fn unflatten<T: Scalar>(&self, w: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.check_dim(w.numel())?;
        let d = w.data();
        Ok(self
            .slices
            .iter()
            .flat_map(|(a, b)| [a, b])
            .map(|s| {
                let n: usize = s.shape.iter().product();
                Tensor::from_parts(s.shape.clone(), d[s.offset..s.offset + n].to_vec())
            })
            .collect())
    }

    /// Inverse of [`HyperNetwork::unflatten`].
    pub fn flatten<T: Scalar>(&self, parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let entries: Vec<_> = self.slices.iter().flat_map(|(a, b)| [a, b]).collect();
        if parts.len() != entries.len() {
            return Err(Error::shape(format!("expected {} tensors, got {}", entries.len(), parts.len())));
        }
        let mut data = Vec::with_capacity(self.dim);
        for (p, e) in parts.iter().zip(entries) {
            if p.shape() != e.shape.as_slice() {
                return Err(Error::shape(format!("tensor {:?} where {:?} expected", p.shape(), e.shape)));
            }
            data.extend_from_slice(p.data());
        }
        Ok(Tensor::from_parts(vec![self.dim], data))
    }

    /// Fan-in scaled normal weights times 0.1, zero biases.
    pub fn init_weights<T: Scalar>(&self, rng: &mut ChaCha8Rng) -> Tensor<T> {
        let parts: Vec<Tensor<T>> = self
            .layers
            .iter()
            .flat_map(|l| [fan_in_normal(&l.weight_shape(), l.fan_in(), 0.1, rng), Tensor::zeros([l.fan_out()])])
            .collect();
        self.flatten(&parts).expect("layout built from the same slices")
    }

    /// `f_w(h, t)` with the layer parameters read from `w`.
    pub fn forward<'t, T: Scalar>(&self, h: &Var<'t, T>, t: f64, w: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_dim(w.value().numel())?;
        let tape = h.tape();
        let time_like = |x: &Var<'t, T>| {
            let mut shape = x.shape().to_vec();
            shape[1] = 1;
            tape.constant(Tensor::full(shape, T::lit(t)))
        };
        let expected = match self.arch {
            DriftArch::Dense { width, .. } => h.shape().len() == 2 && h.shape()[1] == width,
            DriftArch::Conv { channels, .. } => h.shape().len() == 4 && h.shape()[1] == channels,
        };
        if !expected {
            return Err(Error::shape(format!("activation shape {:?} does not fit {:?}", h.shape(), self.arch)));
        }
        let mut z = h.clone();
        let last = self.layers.len() - 1;
        for (i, (layer, (ws, bs))) in self.layers.iter().zip(&self.slices).enumerate() {
            let weight = w.slice(ws.offset, ws.shape.clone())?;
            let bias = w.slice(bs.offset, bs.shape.clone())?;
            z = match layer {
                LayerShape::Dense { .. } => {
                    let input = if i == 0 { Var::concat(&[z.clone(), time_like(&z)])? } else { z };
                    input.affine(&weight, &bias)?
                }
                LayerShape::Conv { kernel, .. } => {
                    let input = Var::concat(&[z.clone(), time_like(&z)])?;
                    input.conv2d(&weight, 1, kernel / 2)?.add_bias(&bias)?
                }
            };
            if i != last {
                z = z.activation(self.activation)?;
            }
        }
        Ok(z)
    }
}

/// `scale * N(0, 1 / fan_in)` entries.
pub(crate) fn fan_in_normal<T: Scalar>(shape: &[usize], fan_in: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let sd = scale / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(sd * z)
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Deterministic generator for parameter initialisation.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
