//! Reverse-mode differentiation over a recorded tape.
//!
//! Operations are methods on [`Tape`]; each returns a [`Var`] handle to the
//! recorded value. [`Tape::backward`] replays the record in reverse.
//!
//! Buffers come from a size-keyed pool owned by the tape. [`Tape::reset`]
//! returns every buffer to the pool, so a second identical forward pass does
//! not allocate. [`Tape::pool_misses`] counts fresh allocations.

pub mod gradcheck;
pub mod kernels;
mod ops;

use std::collections::HashMap;

use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};
use kernels::ConvGeom;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<R> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    AddScalar(Var),
    Neg(Var),
    Relu(Var),
    Sigmoid(Var),
    ScaleBy { s: Var, x: Var },
    ScaleChannels { s: Var, x: Var },
    MatMul(Var, Var),
    Transpose(Var),
    AddRowBias { x: Var, b: Var },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MeanAxis { x: Var, axis: usize },
    Broadcast { x: Var, axis: usize },
    ResizeAxis { x: Var, axis: usize },
    AvgPool { x: Var, factor: [usize; 3] },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<R> },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { parts: SmallVec<[Var; 8]>, axis: usize },
    BceWithLogits { logits: Var, target: Var },
    CrossEntropy { logits: Var, label: usize },
}

pub(crate) struct Node<R> {
    pub(crate) value: Tensor<R>,
    pub(crate) op: Op<R>,
    pub(crate) requires_grad: bool,
}

#[derive(Default)]
pub(crate) struct Pool<R> {
    free: HashMap<usize, Vec<Vec<R>>>,
    misses: u64,
}

impl<R: Real> Pool<R> {
    /// A buffer of `len` elements with unspecified contents.
    pub(crate) fn take(&mut self, len: usize) -> Vec<R> {
        if len == 0 {
            // An empty Vec does not allocate.
            return Vec::new();
        }
        match self.free.get_mut(&len).and_then(Vec::pop) {
            Some(buf) => buf,
            None => {
                self.misses += 1;
                vec![R::zero(); len]
            }
        }
    }

    pub(crate) fn take_zeroed(&mut self, len: usize) -> Vec<R> {
        let mut buf = self.take(len);
        buf.fill(R::zero());
        buf
    }

    pub(crate) fn give(&mut self, buf: Vec<R>) {
        if buf.capacity() > 0 {
            self.free.entry(buf.len()).or_default().push(buf);
        }
    }
}

pub struct Tape<R: Real> {
    pub(crate) nodes: Vec<Node<R>>,
    grads: Vec<Option<Vec<R>>>,
    pub(crate) pool: Pool<R>,
    flops: u64,
    grad_enabled: bool,
    check_finite: bool,
    consumed: bool,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            pool: Pool {
                free: HashMap::new(),
                misses: 0,
            },
            flops: 0,
            grad_enabled: true,
            check_finite: false,
            consumed: false,
        }
    }

    /// A tape that records values only; parameters are not differentiable.
    pub fn inference() -> Self {
        let mut tape = Self::new();
        tape.grad_enabled = false;
        tape
    }

    pub fn set_grad_enabled(&mut self, enabled: bool) {
        self.grad_enabled = enabled;
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// When set, every recorded value is scanned and a NaN or infinity
    /// becomes [`Error::NonFinite`].
    pub fn set_check_finite(&mut self, check: bool) {
        self.check_finite = check;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// FLOPs executed by forward operations since the last reset.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// Buffers allocated because the pool had none of the right size.
    pub fn pool_misses(&self) -> u64 {
        self.pool.misses
    }

    /// Clears the record, recycling all values, gradients and saved activations.
    pub fn reset(&mut self) {
        for node in self.nodes.drain(..) {
            let (_, data) = node.value.into_parts();
            self.pool.give(data);
            if let Op::LayerNorm { stats, .. } = node.op {
                self.pool.give(stats);
            }
        }
        for g in self.grads.drain(..).flatten() {
            self.pool.give(g);
        }
        self.flops = 0;
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v` was
    /// on a differentiable path to it.
    pub fn grad(&self, v: Var) -> Option<&[R]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<R>> {
        self.grad(v)
            .map(|g| Tensor::from_parts(self.value(v).shape().into(), g.to_vec()))
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, requires_grad: bool, name: &'static str) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.check_finite && !value.is_finite() {
            self.pool.give(value.into_parts().1);
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub(crate) fn record(&mut self, shape: Shape, data: Vec<R>, op: Op<R>, parents: &[Var], flops: u64, name: &'static str) -> Result<Var> {
        let rg = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.flops += flops;
        self.push(Tensor::from_parts(shape, data), op, rg, name)
    }

    /// Records a copy of `t` as a leaf.
    pub fn leaf(&mut self, t: &Tensor<R>, requires_grad: bool) -> Result<Var> {
        let mut buf = self.pool.take(t.numel());
        buf.copy_from_slice(t.data());
        let rg = requires_grad && self.grad_enabled;
        self.push(Tensor::from_parts(t.shape().into(), buf), Op::Leaf, rg, "leaf")
    }

    /// A leaf that takes part in differentiation.
    pub fn param(&mut self, t: &Tensor<R>) -> Result<Var> {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: &Tensor<R>) -> Result<Var> {
        self.leaf(t, false)
    }

    pub fn scalar(&mut self, value: R) -> Result<Var> {
        let mut buf = self.pool.take(1);
        buf[0] = value;
        self.push(Tensor::from_parts(Shape::new(), buf), Op::Leaf, false, "leaf")
    }

    /// Populates gradients for every node on a differentiable path to `loss`.
    ///
    /// The tape is consumed: further recording fails until [`Tape::reset`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let loss_shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(loss_shape.to_vec()));
        }
        self.consumed = true;
        for g in self.grads.drain(..).flatten() {
            self.pool.give(g);
        }
        self.grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut seed = self.pool.take(1);
        seed[0] = R::one();
        self.grads[loss.0] = Some(seed);

        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                ops::backward_node(&self.nodes, &mut self.grads, &mut self.pool, i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}
