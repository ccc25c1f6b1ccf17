use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// The augmented solver state.
///
/// For the Nesterov variants `act` is the auxiliary activation `x_t` and
/// `momentum` is `m_t`; the baseline stores `h_t` directly in `act` and has
/// no momentum. `kl` is the running path integral of the KL integrand. The
/// same type doubles as the drift (tangent) of the state.
#[derive(Clone, Debug)]
pub struct JointState<'t, T: Scalar> {
    pub act: Var<'t, T>,
    pub momentum: Option<Var<'t, T>>,
    pub weights: Var<'t, T>,
    pub kl: Var<'t, T>,
}

impl<'t, T: Scalar> JointState<'t, T> {
    /// `self + dt * drift`, componentwise.
    pub fn axpy(&self, drift: &Self, dt: T) -> Result<Self> {
        let momentum = match (&self.momentum, &drift.momentum) {
            (Some(m), Some(dm)) => Some(m.add_scaled(dm, dt)?),
            (None, None) => None,
            _ => return Err(Error::shape("momentum present in only one of state and drift")),
        };
        Ok(Self {
            act: self.act.add_scaled(&drift.act, dt)?,
            momentum,
            weights: self.weights.add_scaled(&drift.weights, dt)?,
            kl: self.kl.add_scaled(&drift.kl, dt)?,
        })
    }

    /// Add a diffusion increment to the weight channel, the only channel the
    /// Brownian motion drives.
    pub fn add_weight_noise(&self, noise: &Var<'t, T>) -> Result<Self> {
        Ok(Self { weights: self.weights.add(noise)?, ..self.clone() })
    }

    pub fn is_finite(&self) -> bool {
        self.act.value().is_finite()
            && self.momentum.as_ref().is_none_or(|m| m.value().is_finite())
            && self.weights.value().is_finite()
            && self.kl.value().is_finite()
    }

    fn channels(&self) -> impl Iterator<Item = &Var<'t, T>> {
        std::iter::once(&self.act).chain(self.momentum.iter()).chain(std::iter::once(&self.weights))
    }

    /// RMS over every entry of the activation, momentum and weight channels.
    /// The KL accumulator is excluded.
    pub fn rms(&self) -> f64 {
        let (mut ss, mut n) = (0.0, 0usize);
        for c in self.channels() {
            ss += c.value().data().iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>();
            n += c.value().numel();
        }
        if n == 0 { 0.0 } else { (ss / n as f64).sqrt() }
    }

    /// RMS of `self - other` over the same channels as [`JointState::rms`].
    pub fn rms_distance(&self, other: &Self) -> Result<f64> {
        let (mut ss, mut n) = (0.0, 0usize);
        let mut other_channels = other.channels();
        for a in self.channels() {
            let b = other_channels.next().ok_or_else(|| Error::shape("state layouts differ"))?;
            a.value().expect_same_shape(b.value(), "rms_distance")?;
            ss += a
                .value()
                .data()
                .iter()
                .zip(b.value().data())
                .map(|(x, y)| (x.to_f64_lossy() - y.to_f64_lossy()).powi(2))
                .sum::<f64>();
            n += a.value().numel();
        }
        if other_channels.next().is_some() {
            return Err(Error::shape("state layouts differ"));
        }
        Ok(if n == 0 { 0.0 } else { (ss / n as f64).sqrt() })
    }
}
