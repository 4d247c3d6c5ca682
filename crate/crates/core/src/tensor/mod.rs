//! Dense f64 tensors with reverse-mode automatic differentiation on a tape.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s; calling
//! [`Var::backward`] on a scalar walks the recording in reverse and
//! accumulates gradients into the `requires_grad` leaves. Plain values with
//! no tape attached are [`Tensor`]s.
//!
//! A tape and its vars are confined to one thread (`Rc` interior); distinct
//! tapes are independent, so data parallelism across examples builds one
//! tape per batch. Recorded values are never mutated in place.

pub mod check;
mod linalg;
mod nn;
mod ops;
pub mod shape;

pub use check::{finite_difference_check, finite_difference_check_masked};

use std::cell::RefCell;
use std::fmt;
use std::ops::Range;
use std::rc::Rc;
use std::sync::Arc;

/// Plain dense value: row-major f64 data plus a shape.
///
/// Cloning is cheap (the buffer is shared). The empty shape is a scalar.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape::numel(&shape),
            data.len(),
            "tensor: shape {:?} wants {} elements, got {}",
            shape,
            shape::numel(&shape),
            data.len()
        );
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape::numel(&shape);
        Tensor { shape, data: Arc::new(vec![0.0; n]) }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape::numel(&shape);
        Tensor { shape, data: Arc::new(vec![value; n]) }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: Arc::new(vec![value]) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single element of a scalar (or 1-element) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item: tensor has shape {:?}", self.shape);
        self.data[0]
    }

    /// Same data re-labelled with a new shape of equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Tensor {
        assert_eq!(
            shape::numel(&shape),
            self.numel(),
            "reshape: {:?} -> {:?} changes element count",
            self.shape,
            shape
        );
        Tensor { shape, data: Arc::clone(&self.data) }
    }

    /// Copy out a new buffer (for callers that need to mutate).
    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_vec(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Componentwise maximum absolute difference against another tensor.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.numel() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, &self.data[..])
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.numel())
        }
    }
}

// ── Tape ──────────────────────────────────────────────────────────────

pub(crate) struct Node {
    pub data: Arc<Vec<f64>>,
    pub shape: Vec<usize>,
    pub op: Op,
    /// True when a backward pass must visit this node.
    pub needs_grad: bool,
    /// Persistent gradient accumulator (leaves with `requires_grad` only).
    pub grad: Option<Vec<f64>>,
}

/// Recorded primitive with the context its backward rule needs.
pub(crate) enum Op {
    Leaf { requires_grad: bool },
    /// Output of a non-differentiable op (sign, argmax values of constants).
    Constant,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Neg { a: usize },
    Exp { a: usize },
    Ln { a: usize },
    Sqrt { a: usize },
    Tanh { a: usize },
    Relu { a: usize },
    Sigmoid { a: usize },
    Gelu { a: usize },
    Powf { a: usize, exponent: f64 },
    AddScalar { a: usize },
    MulScalar { a: usize, c: f64 },
    Abs { a: usize },
    Clamp { a: usize, lo: f64, hi: f64 },
    SumAxes { a: usize },
    MeanAxes { a: usize, count: usize },
    MaxAxis { a: usize, argmax: Vec<usize> },
    Reshape { a: usize },
    Permute { a: usize, perm: Vec<usize> },
    BroadcastTo { a: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { a: usize, ranges: Vec<Range<usize>> },
    MatMul { a: usize, b: usize },
    Conv2d { x: usize, w: usize, stride: usize, padding: usize },
    Softmax { a: usize, axis: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, mean: Vec<f64>, inv_std: Vec<f64> },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
}

pub(crate) struct TapeInner {
    pub nodes: Vec<Node>,
}

/// Recording context for reverse-mode differentiation.
///
/// Cheap to clone (shared handle). Not `Send`: a tape belongs to the thread
/// that created it.
#[derive(Clone)]
pub struct Tape {
    pub(crate) inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })) }
    }

    /// Register a value as a tape leaf.
    pub fn leaf(&self, value: &Tensor, requires_grad: bool) -> Var {
        self.push(
            Arc::clone(&value.data),
            value.shape.clone(),
            Op::Leaf { requires_grad },
            requires_grad,
        )
    }

    /// Leaf holding a single scalar, never differentiated.
    pub fn constant_scalar(&self, value: f64) -> Var {
        self.leaf(&Tensor::scalar(value), false)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clear accumulated leaf gradients.
    pub fn zero_grads(&self) {
        for node in self.inner.borrow_mut().nodes.iter_mut() {
            node.grad = None;
        }
    }

    pub(crate) fn push(
        &self,
        data: Arc<Vec<f64>>,
        shape: Vec<usize>,
        op: Op,
        needs_grad: bool,
    ) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { data, shape, op, needs_grad, grad: None });
        Var { tape: self.clone(), id }
    }

    pub(crate) fn record(
        &self,
        data: Vec<f64>,
        shape: Vec<usize>,
        op: Op,
        needs_grad: bool,
    ) -> Var {
        // When nothing upstream wants gradients the backward rule is dropped.
        let op = if needs_grad { op } else { Op::Constant };
        self.push(Arc::new(data), shape, op, needs_grad)
    }
}

/// Tensor recorded on a tape. Cloning aliases the same node.
#[derive(Clone)]
pub struct Var {
    pub(crate) tape: Tape,
    pub(crate) id: usize,
}

impl Var {
    /// The tape this var is recorded on.
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].data.len()
    }

    pub fn requires_grad(&self) -> bool {
        matches!(
            self.tape.inner.borrow().nodes[self.id].op,
            Op::Leaf { requires_grad: true }
        )
    }

    /// Snapshot of this node's value.
    pub fn tensor(&self) -> Tensor {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        Tensor { shape: node.shape.clone(), data: Arc::clone(&node.data) }
    }

    pub fn item(&self) -> f64 {
        self.tensor().item()
    }

    /// Accumulated gradient, if a backward pass has produced one.
    pub fn grad(&self) -> Option<Tensor> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        node.grad
            .as_ref()
            .map(|g| Tensor { shape: node.shape.clone(), data: Arc::new(g.clone()) })
    }

    pub fn zero_grad(&self) {
        self.tape.inner.borrow_mut().nodes[self.id].grad = None;
    }

    /// Reverse sweep from this scalar. Gradients accumulate into every
    /// `requires_grad` leaf; repeated calls without `zero_grad` add up.
    pub fn backward(&self) {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        assert_eq!(
            node.data.len(),
            1,
            "backward: loss must be scalar, got shape {:?}",
            node.shape
        );
        if !node.needs_grad {
            return; // nothing reachable requires grad
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.id + 1];
        adj[self.id] = Some(vec![1.0]);
        let mut leaf_updates: Vec<(usize, Vec<f64>)> = Vec::new();

        for id in (0..=self.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &inner.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf { requires_grad: true } = node.op {
                leaf_updates.push((id, g));
                continue;
            }
            propagate(&inner, id, &g, &mut adj);
        }
        drop(inner);

        let mut inner = self.tape.inner.borrow_mut();
        for (id, g) in leaf_updates {
            let node = &mut inner.nodes[id];
            match node.grad.as_mut() {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(g.iter()) {
                        *a += b;
                    }
                }
                None => node.grad = Some(g),
            }
        }
    }

    pub(crate) fn same_tape(&self, other: &Var) -> bool {
        Rc::ptr_eq(&self.tape.inner, &other.tape.inner)
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], id: usize, contribution: Vec<f64>) {
    match adj[id].as_mut() {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(contribution.iter()) {
                *a += b;
            }
        }
        None => adj[id] = Some(contribution),
    }
}

/// Apply one node's backward rule, adding input adjoints into `adj`.
fn propagate(inner: &TapeInner, id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
    use shape::reduce_to_shape;
    let node = &inner.nodes[id];
    let out_shape = &node.shape;
    let val = |i: usize| -> &[f64] { &inner.nodes[i].data };
    let shp = |i: usize| -> &[usize] { &inner.nodes[i].shape };
    let wants = |i: usize| inner.nodes[i].needs_grad;

    match &node.op {
        Op::Leaf { .. } | Op::Constant => {}

        Op::Add { a, b } => {
            if wants(*a) {
                accumulate(adj, *a, reduce_to_shape(g, out_shape, shp(*a)));
            }
            if wants(*b) {
                accumulate(adj, *b, reduce_to_shape(g, out_shape, shp(*b)));
            }
        }
        Op::Sub { a, b } => {
            if wants(*a) {
                accumulate(adj, *a, reduce_to_shape(g, out_shape, shp(*a)));
            }
            if wants(*b) {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                accumulate(adj, *b, reduce_to_shape(&neg, out_shape, shp(*b)));
            }
        }
        Op::Mul { a, b } => {
            let (da, db) = ops::mul_backward(g, out_shape, val(*a), shp(*a), val(*b), shp(*b));
            if wants(*a) {
                accumulate(adj, *a, da);
            }
            if wants(*b) {
                accumulate(adj, *b, db);
            }
        }
        Op::Div { a, b } => {
            let (da, db) = ops::div_backward(g, out_shape, val(*a), shp(*a), val(*b), shp(*b));
            if wants(*a) {
                accumulate(adj, *a, da);
            }
            if wants(*b) {
                accumulate(adj, *b, db);
            }
        }
        Op::Neg { a } => accumulate(adj, *a, g.iter().map(|v| -v).collect()),
        Op::Exp { a } => {
            let y = &node.data;
            accumulate(adj, *a, g.iter().zip(y.iter()).map(|(g, y)| g * y).collect());
        }
        Op::Ln { a } => {
            let x = val(*a);
            accumulate(adj, *a, g.iter().zip(x.iter()).map(|(g, x)| g / x).collect());
        }
        Op::Sqrt { a } => {
            let y = &node.data;
            accumulate(adj, *a, g.iter().zip(y.iter()).map(|(g, y)| g / (2.0 * y)).collect());
        }
        Op::Tanh { a } => {
            let y = &node.data;
            accumulate(adj, *a, g.iter().zip(y.iter()).map(|(g, y)| g * (1.0 - y * y)).collect());
        }
        Op::Relu { a } => {
            let x = val(*a);
            accumulate(
                adj,
                *a,
                g.iter().zip(x.iter()).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect(),
            );
        }
        Op::Sigmoid { a } => {
            let y = &node.data;
            accumulate(adj, *a, g.iter().zip(y.iter()).map(|(g, y)| g * y * (1.0 - y)).collect());
        }
        Op::Gelu { a } => {
            let x = val(*a);
            accumulate(adj, *a, g.iter().zip(x.iter()).map(|(g, x)| g * nn::gelu_deriv(*x)).collect());
        }
        Op::Powf { a, exponent } => {
            let x = val(*a);
            let p = *exponent;
            accumulate(
                adj,
                *a,
                g.iter().zip(x.iter()).map(|(g, x)| g * p * x.powf(p - 1.0)).collect(),
            );
        }
        Op::AddScalar { a } => accumulate(adj, *a, g.to_vec()),
        Op::MulScalar { a, c } => accumulate(adj, *a, g.iter().map(|v| v * c).collect()),
        Op::Abs { a } => {
            let x = val(*a);
            accumulate(adj, *a, g.iter().zip(x.iter()).map(|(g, x)| g * sign_of(*x)).collect());
        }
        Op::Clamp { a, lo, hi } => {
            let x = val(*a);
            accumulate(
                adj,
                *a,
                g.iter()
                    .zip(x.iter())
                    .map(|(g, x)| if *x >= *lo && *x <= *hi { *g } else { 0.0 })
                    .collect(),
            );
        }
        Op::SumAxes { a } => {
            // adjoint broadcasts back over the summed axes
            let in_shape = shp(*a);
            let mut da = vec![0.0; val(*a).len()];
            ops::spread_reduced(g, out_shape, in_shape, &mut da, 1.0);
            accumulate(adj, *a, da);
        }
        Op::MeanAxes { a, count } => {
            let in_shape = shp(*a);
            let mut da = vec![0.0; val(*a).len()];
            ops::spread_reduced(g, out_shape, in_shape, &mut da, 1.0 / *count as f64);
            accumulate(adj, *a, da);
        }
        Op::MaxAxis { a, argmax } => {
            let mut da = vec![0.0; val(*a).len()];
            for (gi, &src) in g.iter().zip(argmax.iter()) {
                da[src] += gi;
            }
            accumulate(adj, *a, da);
        }
        Op::Reshape { a } => accumulate(adj, *a, g.to_vec()),
        Op::Permute { a, perm } => {
            accumulate(adj, *a, ops::permute_backward(g, out_shape, shp(*a), perm));
        }
        Op::BroadcastTo { a } => {
            accumulate(adj, *a, reduce_to_shape(g, out_shape, shp(*a)));
        }
        Op::Concat { inputs, axis } => {
            let parts = ops::concat_backward(g, out_shape, *axis, inputs, inner);
            for (idx, da) in parts {
                if wants(idx) {
                    accumulate(adj, idx, da);
                }
            }
        }
        Op::Slice { a, ranges } => {
            accumulate(adj, *a, ops::slice_backward(g, shp(*a), ranges));
        }
        Op::MatMul { a, b } => {
            let (da, db) =
                linalg::matmul_backward(g, out_shape, val(*a), shp(*a), val(*b), shp(*b));
            if wants(*a) {
                accumulate(adj, *a, da);
            }
            if wants(*b) {
                accumulate(adj, *b, db);
            }
        }
        Op::Conv2d { x, w, stride, padding } => {
            let (dx, dw) = linalg::conv2d_backward(
                g,
                val(*x),
                shp(*x),
                val(*w),
                shp(*w),
                *stride,
                *padding,
            );
            if wants(*x) {
                accumulate(adj, *x, dx);
            }
            if wants(*w) {
                accumulate(adj, *w, dw);
            }
        }
        Op::Softmax { a, axis } => {
            accumulate(adj, *a, nn::softmax_backward(g, &node.data, out_shape, *axis));
        }
        Op::LayerNorm { x, gamma, beta, mean, inv_std } => {
            let (dx, dg, db) =
                nn::layer_norm_backward(g, val(*x), shp(*x), val(*gamma), mean, inv_std);
            if wants(*x) {
                accumulate(adj, *x, dx);
            }
            if wants(*gamma) {
                accumulate(adj, *gamma, dg);
            }
            if wants(*beta) {
                accumulate(adj, *beta, db);
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            accumulate(adj, *logits, nn::cross_entropy_backward(g, probs, shp(*logits), labels));
        }
    }
}

/// Sign with sign(0) = 0.
pub fn sign_of(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
