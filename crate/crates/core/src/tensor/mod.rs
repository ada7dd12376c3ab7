//! Minimal n-dimensional tensor engine with reverse-mode gradients.
//!
//! A [`Tape`] is a write-once list of nodes; every operation appends a node
//! holding its forward value and enough bookkeeping to push gradients back to
//! its parents. Graphs are built per forward pass and dropped afterwards;
//! parameters live outside the tape and are registered as leaves each pass.
//!
//! Everything is generic over [`Real`] so the same graph code runs in `f32`
//! for training/inference and in `f64` for finite-difference verification.
//! Reductions use a fixed summation order, so identical inputs give
//! bit-identical outputs on one machine.

pub mod fft;
mod gradcheck;
mod ops;

pub use gradcheck::{grad_check, GradCheckOptions};

use crate::error::{Error, Result};
use ndarray::{ArrayD, Axis, IxDyn, Slice};
use std::fmt::{Debug, Display};

/// Scalar types the engine runs on.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + ndarray::ScalarOperand
    + ndarray::LinalgScalar
    + rustfft::FftNum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn fd(x: f64) -> Self;
    fn to_f64_(self) -> f64;
}

impl Real for f32 {
    fn fd(x: f64) -> f32 {
        x as f32
    }
    fn to_f64_(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn fd(x: f64) -> f64 {
        x
    }
    fn to_f64_(self) -> f64 {
        self
    }
}

/// Handle to a tensor on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Epsilon inside layer normalization's variance denominator.
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) enum Op<T: Real> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize, T),
    Matmul(usize, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    SliceAxis { parent: usize, axis: usize, start: usize },
    PadAxis { parent: usize, axis: usize },
    MeanAll(usize),
    MeanAxis(usize, usize),
    Tanh(usize),
    Gelu(usize),
    Relu(usize),
    Softplus(usize),
    Sqrt(usize),
    Recip(usize),
    Softmax(usize, usize),
    LayerNorm { x: usize, gamma: usize, beta: usize },
    Fft2Re(usize),
    Fft2Im(usize),
    Ifft2(usize, usize),
    IndexSelect(usize, std::sync::Arc<Vec<usize>>),
    Roll { parent: usize, axis: usize, shift: isize },
}

pub(crate) struct Node<T: Real> {
    pub value: ArrayD<T>,
    pub op: Op<T>,
}

/// Append-only computation graph.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the backward root with respect to `v`, if it is reached.
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input tensor.
    pub fn leaf(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.push(ArrayD::from_elem(IxDyn(&[]), value), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Reverse pass from `root`, seeded with ones.
    ///
    /// Nodes are visited in reverse creation order (a topological order by
    /// construction) and contributions accumulate in that fixed order.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Train(format!(
                    "non-finite gradient at node {i} during backward"
                )));
            }
            self.backstep(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

pub(crate) fn accumulate<T: Real>(
    grads: &mut [Option<ArrayD<T>>],
    parent: usize,
    contribution: ArrayD<T>,
) {
    match &mut grads[parent] {
        Some(g) => *g += &contribution,
        slot @ None => *slot = Some(contribution),
    }
}

/// Numpy-style broadcast shape over trailing axes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for k in 0..rank {
        let da = if k < rank - a.len() { 1 } else { a[k - (rank - a.len())] };
        let db = if k < rank - b.len() { 1 } else { b[k - (rank - b.len())] };
        out[k] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape(format!(
                    "cannot broadcast {a:?} with {b:?} (axis {k}: {da} vs {db})"
                )))
            }
        };
    }
    Ok(out)
}

pub(crate) fn broadcast_to<T: Real>(x: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    if x.shape() == shape {
        return x.clone();
    }
    let mut v = x.view();
    while v.ndim() < shape.len() {
        v = v.insert_axis(Axis(0));
    }
    v.broadcast(IxDyn(shape)).expect("validated broadcast").to_owned()
}

/// Sums `g` down to `shape`, undoing a forward broadcast.
pub(crate) fn reduce_to_shape<T: Real>(g: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (ax, (&have, &want)) in out.shape().to_vec().iter().zip(shape).enumerate() {
        if have != want {
            debug_assert_eq!(want, 1);
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

pub(crate) fn pad_axis_high<T: Real>(x: &ArrayD<T>, axis: usize, after: usize) -> ArrayD<T> {
    let mut shape = x.shape().to_vec();
    shape[axis] += after;
    let mut out = ArrayD::zeros(IxDyn(&shape));
    out.slice_axis_mut(Axis(axis), Slice::from(0..x.shape()[axis])).assign(x);
    out
}
