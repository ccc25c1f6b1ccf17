//! The closed set of differentiable primitives.

use std::rc::Rc;

use super::activation::ActivationKind;
use super::conv::conv2d_forward;
use super::tape::{Op, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<'t, T: Scalar> Var<'t, T> {
    fn same_tape(&self, other: &Self) {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_tape(other);
        let v = self.value.zip_map(&other.value, |a, b| a + b)?;
        let (a, b) = (self.node, other.node);
        Ok(self.tape.record(v, a.is_some() || b.is_some(), || Op::Add(a, b)))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_tape(other);
        let v = self.value.zip_map(&other.value, |a, b| a - b)?;
        let (a, b) = (self.node, other.node);
        Ok(self.tape.record(v, a.is_some() || b.is_some(), || Op::Sub(a, b)))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.same_tape(other);
        let v = self.value.zip_map(&other.value, |a, b| a * b)?;
        let (a, b) = (self.node, other.node);
        Ok(self.tape.record(v, a.is_some() || b.is_some(), || Op::Mul {
            a,
            b,
            av: Rc::clone(&self.value),
            bv: Rc::clone(&other.value),
        }))
    }

    pub fn scale(&self, c: T) -> Self {
        let v = self.value.map(|a| a * c);
        let x = self.node;
        self.tape.record(v, x.is_some(), || Op::Scale(x.unwrap(), c))
    }

    pub fn neg(&self) -> Self {
        self.scale(-T::one())
    }

    /// `self + c * other`
    pub fn add_scaled(&self, other: &Self, c: T) -> Result<Self> {
        self.add(&other.scale(c))
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.same_tape(other);
        let (&[m, k], &[k2, n]) = (self.shape(), other.shape()) else {
            return Err(Error::shape(format!(
                "matmul needs 2-D operands, got {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        };
        if k != k2 {
            return Err(Error::shape(format!("matmul inner dimensions {k} and {k2} differ")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.value.data(), (k as isize, 1), other.value.data(), (n as isize, 1), T::zero(), &mut out, (n as isize, 1));
        let (a, b) = (self.node, other.node);
        Ok(self.tape.record(Tensor::from_parts(vec![m, n], out), a.is_some() || b.is_some(), || {
            Op::MatMul { a, b, av: Rc::clone(&self.value), bv: Rc::clone(&other.value), m, k, n }
        }))
    }

    /// Add a per-channel bias along axis 1, broadcast over the batch axis and
    /// any trailing axes: `[B, C]` or `[B, C, H, W]` plus `[C]`.
    pub fn add_bias(&self, bias: &Self) -> Result<Self> {
        self.same_tape(bias);
        let shape = self.shape();
        if shape.len() < 2 || bias.shape() != [shape[1]] {
            return Err(Error::shape(format!(
                "bias {:?} does not match axis 1 of {shape:?}",
                bias.shape()
            )));
        }
        let channels = shape[1];
        let inner: usize = shape[2..].iter().product();
        let b = bias.value.data();
        let mut data = self.value.data().to_vec();
        if inner == 1 {
            for row in data.chunks_mut(channels) {
                row.iter_mut().zip(b).for_each(|(v, &bc)| *v = *v + bc);
            }
        } else {
            for (block, &bc) in data.chunks_mut(inner.max(1)).zip(b.iter().cycle()) {
                block.iter_mut().for_each(|v| *v = *v + bc);
            }
        }
        let (x, bn) = (self.node, bias.node);
        Ok(self.tape.record(
            Tensor::from_parts(shape.to_vec(), data),
            x.is_some() || bn.is_some(),
            || Op::AddBias { x, b: bn, channels, inner },
        ))
    }

    /// `x W + b` with `x: [B, in]`, `W: [in, out]`, `b: [out]`.
    pub fn affine(&self, weight: &Self, bias: &Self) -> Result<Self> {
        self.matmul(weight)?.add_bias(bias)
    }

    /// Cross-correlation of an NCHW input with an OIHW kernel.
    pub fn conv2d(&self, kernel: &Self, stride: usize, padding: usize) -> Result<Self> {
        self.same_tape(kernel);
        let v = conv2d_forward(&self.value, &kernel.value, stride, padding)?;
        let (x, k) = (self.node, kernel.node);
        Ok(self.tape.record(v, x.is_some() || k.is_some(), || Op::Conv2d {
            x,
            k,
            xv: Rc::clone(&self.value),
            kv: Rc::clone(&kernel.value),
            stride,
            pad: padding,
        }))
    }

    pub fn activation(&self, kind: ActivationKind) -> Result<Self> {
        if !self.value.is_finite() {
            return Err(Error::NumericDomain(format!(
                "non-finite input to {} activation",
                kind.name()
            )));
        }
        if kind == ActivationKind::Identity {
            return Ok(self.clone());
        }
        let Some(x) = self.node else {
            return Ok(self.tape.record(self.value.map(|a| kind.eval(a)), false, || unreachable!()));
        };
        let (mut y, mut dy) = (Vec::with_capacity(self.value.numel()), Vec::with_capacity(self.value.numel()));
        for &a in self.value.data() {
            let (v, d) = kind.eval_with_derivative(a);
            y.push(v);
            dy.push(d);
        }
        let shape = self.shape().to_vec();
        Ok(self.tape.record(Tensor::from_parts(shape.clone(), y), true, || Op::Activation {
            x,
            dydx: Tensor::from_parts(shape, dy),
        }))
    }

    /// Sum of all entries, as a 0-d tensor.
    pub fn sum(&self) -> Self {
        let v = Tensor::scalar(self.value.sum());
        let x = self.node;
        self.tape.record(v, x.is_some(), || Op::Sum(x.unwrap()))
    }

    pub fn mean(&self) -> Self {
        let n = T::lit(self.value.numel().max(1) as f64);
        self.sum().scale(T::one() / n)
    }

    pub fn sum_squares(&self) -> Result<Self> {
        Ok(self.mul(self)?.sum())
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape()
            )));
        }
        let v = Tensor::from_parts(shape, self.value.data().to_vec());
        let x = self.node;
        Ok(self.tape.record(v, x.is_some(), || Op::Reshape(x.unwrap())))
    }

    /// Contiguous run of the flattened value, reshaped to `shape`.
    pub fn slice(&self, offset: usize, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        if offset + len > self.value.numel() {
            return Err(Error::shape(format!(
                "slice [{offset}, {}) out of range for {} values",
                offset + len,
                self.value.numel()
            )));
        }
        let v = Tensor::from_parts(shape, self.value.data()[offset..offset + len].to_vec());
        let x = self.node;
        Ok(self.tape.record(v, x.is_some(), || Op::Slice { x: x.unwrap(), offset }))
    }

    /// Concatenate along axis 1. All parts must agree on every other axis.
    pub fn concat(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let s0 = first.shape();
        if s0.len() < 2 {
            return Err(Error::shape("concat needs at least 2-D parts"));
        }
        let outer = s0[0];
        let rest = &s0[2..];
        let inner: usize = rest.iter().product();
        for p in parts {
            first.same_tape(p);
            let s = p.shape();
            if s.len() != s0.len() || s[0] != outer || &s[2..] != rest {
                return Err(Error::shape(format!("concat: {s:?} incompatible with {s0:?}")));
            }
        }
        let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let w = p.shape()[1] * inner;
                data.extend_from_slice(&p.value.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = s0.to_vec();
        shape[1] = total;
        let tracked = parts.iter().any(|p| p.node.is_some());
        Ok(first.tape.record(Tensor::from_parts(shape, data), tracked, || Op::Concat {
            parts: parts.iter().map(|p| (p.node, p.shape()[1])).collect(),
            outer,
            inner,
        }))
    }

    /// Mean categorical negative log-likelihood of `[B, C]` logits.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Self> {
        let &[batch, classes] = self.shape() else {
            return Err(Error::shape("softmax_cross_entropy needs [batch, classes] logits"));
        };
        if labels.len() != batch || batch == 0 {
            return Err(Error::shape(format!("{} labels for a batch of {batch}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::contract(format!("label {bad} out of range for {classes} classes")));
        }
        let probs = softmax_rows(&self.value, classes);
        let mut nll = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = &self.value.data()[i * classes..(i + 1) * classes];
            nll = nll + log_sum_exp(row) - row[y];
        }
        let v = Tensor::scalar(nll / T::lit(batch as f64));
        let x = self.node;
        Ok(self.tape.record(v, x.is_some(), || Op::SoftmaxXent {
            x: x.unwrap(),
            probs,
            labels: labels.to_vec(),
        }))
    }

    /// Mean Gaussian negative log-likelihood; column 0 of the `[B, 2]` input
    /// is the mean and column 1 the log-variance.
    pub fn gaussian_nll(&self, targets: &[T]) -> Result<Self> {
        let &[batch, 2] = self.shape() else {
            return Err(Error::shape("gaussian_nll needs [batch, 2] (mean, log-variance)"));
        };
        if targets.len() != batch || batch == 0 {
            return Err(Error::shape(format!("{} targets for a batch of {batch}", targets.len())));
        }
        let d = self.value.data();
        let total: T = targets
            .iter()
            .enumerate()
            .map(|(i, &y)| gaussian_nll_point(y, d[2 * i], d[2 * i + 1]))
            .sum();
        let v = Tensor::scalar(total / T::lit(batch as f64));
        let x = self.node;
        Ok(self.tape.record_rc(Rc::new(v), x.is_some(), || Op::GaussianNll {
            x: x.unwrap(),
            pred: Rc::clone(&self.value),
            targets: targets.to_vec(),
        }))
    }
}

/// `-log N(y; mean, exp(log_var))`
pub fn gaussian_nll_point<T: Scalar>(y: T, mean: T, log_var: T) -> T {
    let r = y - mean;
    T::lit(0.5) * (log_var + r * r * (-log_var).exp() + T::lit((2.0 * std::f64::consts::PI).ln()))
}

pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>, classes: usize) -> Tensor<T> {
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(classes) {
        let lse = log_sum_exp(row);
        out.extend(row.iter().map(|&v| (v - lse).exp()));
    }
    Tensor::from_parts(logits.shape().to_vec(), out)
}

/// Elementwise activation on a plain tensor (no tape).
pub fn apply_activation<T: Scalar>(x: &Tensor<T>, kind: ActivationKind) -> Result<Tensor<T>> {
    if !x.is_finite() {
        return Err(Error::NumericDomain(format!("non-finite input to {} activation", kind.name())));
    }
    Ok(x.map(|v| kind.eval(v)))
}

