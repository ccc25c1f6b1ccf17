use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Elementwise nonlinearity used by the drift networks and the Nesterov
/// reformulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Swish,
    Mish,
    Tanh,
    /// Only for unit tests and hand-computed fixtures.
    Identity,
}

impl ActivationKind {
    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Swish => "swish",
            ActivationKind::Mish => "mish",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Identity => "identity",
        }
    }

    #[inline]
    pub fn eval<T: Scalar>(self, x: T) -> T {
        match self {
            ActivationKind::Swish => x * sigmoid(x),
            ActivationKind::Mish => x * softplus(x).tanh(),
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Identity => x,
        }
    }

    /// Value and derivative at `x`, sharing the transcendental calls.
    #[inline]
    pub fn eval_with_derivative<T: Scalar>(self, x: T) -> (T, T) {
        let one = T::one();
        match self {
            ActivationKind::Swish => {
                let s = sigmoid(x);
                (x * s, s + x * s * (one - s))
            }
            ActivationKind::Mish => {
                let tsp = softplus(x).tanh();
                (x * tsp, tsp + x * (one - tsp * tsp) * sigmoid(x))
            }
            ActivationKind::Tanh => {
                let t = x.tanh();
                (t, one - t * t)
            }
            ActivationKind::Identity => (x, one),
        }
    }

    /// Derivative at `x`.
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        let one = T::one();
        match self {
            ActivationKind::Swish => {
                let s = sigmoid(x);
                s + x * s * (one - s)
            }
            ActivationKind::Mish => {
                let tsp = softplus(x).tanh();
                tsp + x * (one - tsp * tsp) * sigmoid(x)
            }
            ActivationKind::Tanh => {
                let t = x.tanh();
                one - t * t
            }
            ActivationKind::Identity => one,
        }
    }
}

impl std::str::FromStr for ActivationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "swish" => Ok(Self::Swish),
            "mish" => Ok(Self::Mish),
            "tanh" => Ok(Self::Tanh),
            "identity" => Ok(Self::Identity),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    const KINDS: [ActivationKind; 4] = [
        ActivationKind::Swish,
        ActivationKind::Mish,
        ActivationKind::Tanh,
        ActivationKind::Identity,
    ];

    #[test]
    fn values_at_origin_and_one() {
        assert_eq!(ActivationKind::Tanh.eval(0.0f64), 0.0);
        assert_eq!(ActivationKind::Swish.eval(0.0f64), 0.0);
        // 1 * sigmoid(1), evaluated independently
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((ActivationKind::Swish.eval(1.0f64) - expected).abs() < 1e-15);
        assert!((expected - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    fn derivatives_match_central_differences() {
        let h = 1e-6;
        for kind in KINDS {
            for &x in &[-4.0f64, -1.3, -0.2, 0.0, 0.7, 2.5, 30.0] {
                let fd = (kind.eval(x + h) - kind.eval(x - h)) / (2.0 * h);
                let ad = kind.derivative(x);
                assert!((fd - ad).abs() < 1e-7, "{kind:?} at {x}: fd {fd} ad {ad}");
            }
        }
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        assert_eq!(softplus(800.0f64), 800.0);
        assert!(softplus(-800.0f64) >= 0.0);
        assert!(ActivationKind::Mish.eval(-800.0f64).is_finite());
    }
}
