use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::conv::conv2d_backward;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle of a recorded node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

type Parent = Option<usize>;

pub(crate) enum Op<T> {
    Leaf,
    Add(Parent, Parent),
    Sub(Parent, Parent),
    Mul { a: Parent, b: Parent, av: Rc<Tensor<T>>, bv: Rc<Tensor<T>> },
    Scale(usize, T),
    MatMul { a: Parent, b: Parent, av: Rc<Tensor<T>>, bv: Rc<Tensor<T>>, m: usize, k: usize, n: usize },
    AddBias { x: Parent, b: Parent, channels: usize, inner: usize },
    Conv2d { x: Parent, k: Parent, xv: Rc<Tensor<T>>, kv: Rc<Tensor<T>>, stride: usize, pad: usize },
    Activation { x: usize, dydx: Tensor<T> },
    Sum(usize),
    Concat { parts: Vec<(Parent, usize)>, outer: usize, inner: usize },
    Reshape(usize),
    Slice { x: usize, offset: usize },
    SoftmaxXent { x: usize, probs: Tensor<T>, labels: Vec<usize> },
    GaussianNll { x: usize, pred: Rc<Tensor<T>>, targets: Vec<T> },
}

struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
}

/// Append-only record of primitive applications for reverse-mode
/// differentiation. Confined to one thread.
///
/// A tape built with [`Tape::no_grad`] records nothing: values flow through
/// the same operations and are freed as soon as their [`Var`]s drop.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), recording: true }
    }

    pub fn no_grad() -> Self {
        Self { nodes: RefCell::new(Vec::new()), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf. On a non-recording tape this is a constant.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        let node = self.recording.then(|| self.push(Op::Leaf, value.shape().to_vec()));
        Var { tape: self, value: Rc::new(value), node }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        Var { tape: self, value: Rc::new(value), node: None }
    }

    fn push(&self, op: Op<T>, shape: Vec<usize>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, shape });
        nodes.len() - 1
    }

    /// Wrap a computed value, recording `op` only when some parent is tracked.
    pub(crate) fn record(
        &self,
        value: Tensor<T>,
        tracked: bool,
        op: impl FnOnce() -> Op<T>,
    ) -> Var<'_, T> {
        let node = (self.recording && tracked).then(|| self.push(op(), value.shape().to_vec()));
        Var { tape: self, value: Rc::new(value), node }
    }

    pub(crate) fn record_rc(
        &self,
        value: Rc<Tensor<T>>,
        tracked: bool,
        op: impl FnOnce() -> Op<T>,
    ) -> Var<'_, T> {
        let node = (self.recording && tracked).then(|| self.push(op(), value.shape().to_vec()));
        Var { tape: self, value, node }
    }

    fn backward_from(&self, root: usize) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::ones(nodes[root].shape.clone()));
        let mut leaves = HashMap::new();

        for id in (0..=root).rev() {
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                let g = grads[id].take().unwrap_or_else(|| Tensor::zeros(node.shape.clone()));
                leaves.insert(NodeId(id), g);
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, &node.op, g, &mut grads)?;
        }
        Ok(Gradients { grads: leaves })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], parent: Parent, g: Tensor<T>) {
    let Some(p) = parent else { return };
    match &mut grads[p] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e = *e + *v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn propagate<T: Scalar>(
    nodes: &[Node<T>],
    op: &Op<T>,
    g: Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    match op {
        Op::Leaf => unreachable!("leaves are handled by the caller"),
        Op::Add(a, b) => {
            if b.is_some() {
                accumulate(grads, *b, g.clone());
            }
            accumulate(grads, *a, g);
        }
        Op::Sub(a, b) => {
            if b.is_some() {
                accumulate(grads, *b, g.map(|v| -v));
            }
            accumulate(grads, *a, g);
        }
        Op::Mul { a, b, av, bv } => {
            if a.is_some() {
                accumulate(grads, *a, g.zip_map(bv, |x, y| x * y)?);
            }
            if b.is_some() {
                accumulate(grads, *b, g.zip_map(av, |x, y| x * y)?);
            }
        }
        Op::Scale(x, c) => accumulate(grads, Some(*x), g.map(|v| v * *c)),
        Op::MatMul { a, b, av, bv, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if a.is_some() {
                // dA = G B^T
                let mut da = vec![T::zero(); m * k];
                T::gemm(m, n, k, T::one(), g.data(), (n as isize, 1), bv.data(), (1, n as isize), T::zero(), &mut da, (k as isize, 1));
                accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
            }
            if b.is_some() {
                // dB = A^T G
                let mut db = vec![T::zero(); k * n];
                T::gemm(k, m, n, T::one(), av.data(), (1, k as isize), g.data(), (n as isize, 1), T::zero(), &mut db, (n as isize, 1));
                accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
            }
        }
        Op::AddBias { x, b, channels, inner } => {
            if b.is_some() {
                let mut db = vec![T::zero(); *channels];
                if *inner == 1 {
                    for row in g.data().chunks(*channels) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
                    }
                } else {
                    for (k, block) in g.data().chunks((*inner).max(1)).enumerate() {
                        let c = k % channels;
                        db[c] = block.iter().fold(db[c], |acc, &v| acc + v);
                    }
                }
                accumulate(grads, *b, Tensor::from_parts(vec![*channels], db));
            }
            accumulate(grads, *x, g);
        }
        Op::Conv2d { x, k, xv, kv, stride, pad } => {
            let (dx, dk) = conv2d_backward(xv, kv, &g, *stride, *pad, x.is_some(), k.is_some())?;
            if let Some(dx) = dx {
                accumulate(grads, *x, dx);
            }
            if let Some(dk) = dk {
                accumulate(grads, *k, dk);
            }
        }
        Op::Activation { x, dydx } => {
            accumulate(grads, Some(*x), g.zip_map(dydx, |gv, d| gv * d)?);
        }
        Op::Sum(x) => {
            let gv = g.item()?;
            accumulate(grads, Some(*x), Tensor::full(nodes[*x].shape.clone(), gv));
        }
        Op::Concat { parts, outer, inner } => {
            let total: usize = parts.iter().map(|(_, w)| w).sum();
            let mut offset = 0;
            for (parent, width) in parts {
                if parent.is_some() {
                    let mut part = Vec::with_capacity(outer * width * inner);
                    for o in 0..*outer {
                        let start = (o * total + offset) * inner;
                        part.extend_from_slice(&g.data()[start..start + width * inner]);
                    }
                    let shape = nodes[parent.unwrap()].shape.clone();
                    accumulate(grads, *parent, Tensor::from_parts(shape, part));
                }
                offset += width;
            }
        }
        Op::Reshape(x) => {
            let shape = nodes[*x].shape.clone();
            accumulate(grads, Some(*x), g.reshape(shape)?);
        }
        Op::Slice { x, offset } => {
            let shape = nodes[*x].shape.clone();
            let mut full = Tensor::zeros(shape);
            full.data_mut()[*offset..*offset + g.numel()].copy_from_slice(g.data());
            accumulate(grads, Some(*x), full);
        }
        Op::SoftmaxXent { x, probs, labels } => {
            let gv = g.item()?;
            let batch = labels.len();
            let classes = probs.numel() / batch;
            let scale = gv / T::lit(batch as f64);
            let mut d: Vec<T> = probs.data().iter().map(|&p| p * scale).collect();
            for (i, &y) in labels.iter().enumerate() {
                d[i * classes + y] = d[i * classes + y] - scale;
            }
            accumulate(grads, Some(*x), Tensor::from_parts(probs.shape().to_vec(), d));
        }
        Op::GaussianNll { x, pred, targets } => {
            let gv = g.item()?;
            let scale = gv / T::lit(targets.len() as f64);
            let half = T::lit(0.5);
            let mut d = vec![T::zero(); pred.numel()];
            for (i, &y) in targets.iter().enumerate() {
                let (mu, lv) = (pred.data()[2 * i], pred.data()[2 * i + 1]);
                let r = y - mu;
                let prec = (-lv).exp();
                d[2 * i] = -r * prec * scale;
                d[2 * i + 1] = half * (T::one() - r * r * prec) * scale;
            }
            accumulate(grads, Some(*x), Tensor::from_parts(pred.shape().to_vec(), d));
        }
    }
    Ok(())
}

/// A tensor value together with its (optional) position on a tape.
pub struct Var<'t, T: Scalar> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) value: Rc<Tensor<T>>,
    pub(crate) node: Option<usize>,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        Self { tape: self.tape, value: Rc::clone(&self.value), node: self.node }
    }
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("shape", &self.value.shape()).field("node", &self.node).finish()
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node.map(NodeId)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self { tape: self.tape, value: Rc::clone(&self.value), node: None }
    }

    /// Reverse sweep from this scalar.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        match self.node {
            Some(root) => self.tape.backward_from(root),
            None => Ok(Gradients { grads: HashMap::new() }),
        }
    }
}

/// Gradients of a scalar with respect to every differentiable leaf recorded
/// before it. Leaves the loss does not depend on map to zeros.
#[derive(Debug, Default)]
pub struct Gradients<T> {
    grads: HashMap<NodeId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    /// Gradient for `leaf`; zeros if the loss was disconnected from it, `None`
    /// if `leaf` is not differentiable.
    pub fn wrt(&self, leaf: &Var<'_, T>) -> Option<Tensor<T>> {
        let id = leaf.node_id()?;
        Some(self.grads.get(&id).cloned().unwrap_or_else(|| Tensor::zeros(leaf.shape().to_vec())))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn into_map(self) -> HashMap<NodeId, Tensor<T>> {
        self.grads
    }
}
