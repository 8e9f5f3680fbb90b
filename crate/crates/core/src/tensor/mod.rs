// Copyright 2026 The PACE Authors.
// SPDX-License-Identifier: Apache-2.0

//! Dense `f64` arrays with tape-free reverse-mode differentiation.
//!
//! Every [`Tensor`] produced by an operation keeps its inputs and a backward
//! closure, so the graph is the set of tensors reachable from the loss.
//! [`Tensor::backward`] sorts that graph topologically and pushes gradients
//! from the loss to every leaf with `requires_grad` set. Intermediate
//! gradients live only for the duration of one backward call; leaf gradients
//! accumulate until [`Tensor::zero_grad`].
//!
//! Row-major layout throughout. Sequence tensors are stored channels-first
//! (`C × T`) for the convolution kernels and frames-first (`T × C`) at the
//! module boundaries that mirror the codec embeddings.

mod conv;
pub mod gradcheck;
mod layer;
mod linalg;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{PaceError, Result};

pub use conv::{conv1d, conv2d, conv_transpose1d, Conv2dGeometry};
pub use layer::{LayerKind, LayerParams};
pub use linalg::{gemm, linear, matmul};

/// Computes the gradient of each input from the output value and the output gradient.
///
/// Returning `None` for an input means "no gradient"; it is only valid for
/// inputs that do not require one.
pub type BackwardFn = Box<dyn Fn(&[Tensor], &[f64], &[f64]) -> Vec<Option<Vec<f64>>>>;

struct Op {
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: Cell<bool>,
    op: Option<Op>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any backward graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn from_node(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<Op>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(requires_grad),
            op,
        }))
    }

    /// Builds a constant tensor, checking that `shape` covers `data` exactly.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(PaceError::contract(format!(
                "shape {shape:?} holds {} values but {} were given",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self::from_node(shape.to_vec(), data, false, None))
    }

    /// A trainable leaf.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        t.0.requires_grad.set(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_node(shape.to_vec(), vec![0.0; numel(shape)], false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_node(shape.to_vec(), vec![value; numel(shape)], false, None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_node(vec![1], vec![value], false, None)
    }

    /// Wraps the result of a custom operation.
    ///
    /// The backward closure is kept only when gradient recording is enabled
    /// and at least one input requires a gradient.
    pub fn from_op<F>(data: Vec<f64>, shape: &[usize], inputs: Vec<Tensor>, backward: F) -> Self
    where
        F: Fn(&[Tensor], &[f64], &[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    {
        let tracked = is_grad_enabled() && inputs.iter().any(Tensor::requires_grad);
        let op = tracked.then(|| Op {
            inputs,
            backward: Box::new(backward),
        });
        Self::from_node(shape.to_vec(), data, tracked, op)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn values(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let v = self.values();
        assert_eq!(v.len(), 1, "item() on a tensor with {} elements", v.len());
        v[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// Toggles gradient tracking on a leaf (freezing or unfreezing a parameter).
    pub fn set_requires_grad(&self, flag: bool) {
        assert!(self.is_leaf(), "requires_grad can only be toggled on leaves");
        self.0.requires_grad.set(flag);
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrites the values of a leaf in place. Used by optimizers and EMA updates.
    pub fn set_values(&self, values: &[f64]) {
        assert!(self.is_leaf(), "only leaves may be updated in place");
        let mut data = self.0.data.borrow_mut();
        assert_eq!(data.len(), values.len());
        data.copy_from_slice(values);
    }

    pub fn update_values(&self, f: impl FnOnce(&mut [f64])) {
        assert!(self.is_leaf(), "only leaves may be updated in place");
        f(&mut self.0.data.borrow_mut());
    }

    /// A constant copy cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Self::from_node(self.0.shape.clone(), self.to_vec(), false, None)
    }

    /// Independent trainable copy of a tensor's values.
    pub fn deep_clone_param(&self) -> Tensor {
        Self::from_node(self.0.shape.clone(), self.to_vec(), self.requires_grad(), None)
    }

    /// Back-propagates from a one-element loss into every reachable leaf.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(PaceError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Iterative post-order DFS; inputs are visited in declaration order so
        // gradient accumulation order is fixed for a given graph.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashMap<u64, ()> = HashMap::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id(), ());
        while let Some((node, next)) = stack.pop() {
            let inputs = node.0.op.as_ref().map(|op| op.inputs.as_slice()).unwrap_or(&[]);
            if next < inputs.len() {
                let child = inputs[next].clone();
                stack.push((node, next + 1));
                if child.requires_grad() && visited.insert(child.id(), ()).is_none() {
                    stack.push((child, 0));
                }
            } else {
                order.push(node);
            }
        }

        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.0.op {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(op) => {
                    let out = node.0.data.borrow();
                    let input_grads = (op.backward)(&op.inputs, &out, &g);
                    debug_assert_eq!(input_grads.len(), op.inputs.len());
                    for (input, ig) in op.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), input.numel());
                        match grads.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(input.id(), ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.rank() != other.rank() {
            return Err(PaceError::contract(format!(
                "{op}: rank {} vs rank {}",
                self.rank(),
                other.rank()
            )));
        }
        for (axis, (&a, &b)) in self.shape().iter().zip(other.shape()).enumerate() {
            if a != b {
                return Err(PaceError::Dimension {
                    op,
                    axis,
                    expected: a,
                    found: b,
                });
            }
        }
        Ok(())
    }

    fn unary<F, D>(&self, f: F, df: D) -> Tensor
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + 'static,
    {
        let data: Vec<f64> = self.values().iter().map(|&x| f(x)).collect();
        Tensor::from_op(data, self.shape(), vec![self.clone()], move |inputs, out, g| {
            let x = inputs[0].values();
            let gi = x
                .iter()
                .zip(out)
                .zip(g)
                .map(|((&x, &y), &g)| g * df(x, y))
                .collect();
            vec![Some(gi)]
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let data = zip_map(&self.values(), &other.values(), |a, b| a + b);
        Ok(Tensor::from_op(
            data,
            self.shape(),
            vec![self.clone(), other.clone()],
            |_, _, g| vec![Some(g.to_vec()), Some(g.to_vec())],
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let data = zip_map(&self.values(), &other.values(), |a, b| a - b);
        Ok(Tensor::from_op(
            data,
            self.shape(),
            vec![self.clone(), other.clone()],
            |_, _, g| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "mul")?;
        let data = zip_map(&self.values(), &other.values(), |a, b| a * b);
        Ok(Tensor::from_op(
            data,
            self.shape(),
            vec![self.clone(), other.clone()],
            |inputs, _, g| {
                let a = inputs[0].values();
                let b = inputs[1].values();
                let ga = inputs[0].requires_grad().then(|| zip_map(g, &b, |g, b| g * b));
                let gb = inputs[1].requires_grad().then(|| zip_map(g, &a, |g, a| g * a));
                vec![ga, gb]
            },
        ))
    }

    /// Sum of several same-shaped tensors.
    pub fn sum_all(terms: &[Tensor]) -> Result<Tensor> {
        let (first, rest) = terms
            .split_first()
            .ok_or_else(|| PaceError::contract("sum_all of an empty list"))?;
        rest.iter().try_fold(first.clone(), |acc, t| acc.add(t))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn abs(&self) -> Tensor {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    /// Exponential linear unit with `alpha = 1`.
    pub fn elu(&self) -> Tensor {
        self.unary(
            |x| if x > 0.0 { x } else { x.exp_m1() },
            |x, y| if x > 0.0 { 1.0 } else { y + 1.0 },
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.unary(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    pub fn sum(&self) -> Tensor {
        let s = self.values().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![s], &[1], vec![self.clone()], move |_, _, g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Mean over the last axis: `(…, T) → (…)`.
    pub fn mean_last_axis(&self) -> Tensor {
        let last = *self.shape().last().expect("mean over an axis of a rank-0 tensor");
        let rows = self.numel() / last.max(1);
        let data: Vec<f64> = self
            .values()
            .chunks(last)
            .map(|c| c.iter().sum::<f64>() / last as f64)
            .collect();
        let mut shape = self.shape()[..self.rank() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        Tensor::from_op(data, &shape, vec![self.clone()], move |_, _, g| {
            let mut gi = Vec::with_capacity(rows * last);
            for &gr in g {
                gi.extend(std::iter::repeat_n(gr / last as f64, last));
            }
            vec![Some(gi)]
        })
    }

    /// Euclidean norm of each row of a `R × C` tensor, giving `R` values.
    /// The gradient of a zero row is taken to be zero.
    pub fn row_l2_norm(&self) -> Result<Tensor> {
        let (rows, cols) = self.as_matrix("row_l2_norm")?;
        let data: Vec<f64> = self
            .values()
            .chunks(cols)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        Ok(Tensor::from_op(data, &[rows], vec![self.clone()], move |inputs, out, g| {
            let x = inputs[0].values();
            let mut gi = vec![0.0; rows * cols];
            for r in 0..rows {
                if out[r] > 0.0 {
                    let s = g[r] / out[r];
                    for c in 0..cols {
                        gi[r * cols + c] = s * x[r * cols + c];
                    }
                }
            }
            vec![Some(gi)]
        }))
    }

    /// Multiplies every element by a one-element tensor.
    pub fn mul_scalar_tensor(&self, k: &Tensor) -> Result<Tensor> {
        if k.numel() != 1 {
            return Err(PaceError::Dimension {
                op: "mul_scalar_tensor",
                axis: 0,
                expected: 1,
                found: k.numel(),
            });
        }
        let kv = k.item();
        let data = self.values().iter().map(|x| x * kv).collect();
        Ok(Tensor::from_op(
            data,
            self.shape(),
            vec![self.clone(), k.clone()],
            |inputs, _, g| {
                let x = inputs[0].values();
                let kv = inputs[1].item();
                let gx = inputs[0].requires_grad().then(|| g.iter().map(|g| g * kv).collect());
                let gk = inputs[1]
                    .requires_grad()
                    .then(|| vec![g.iter().zip(x.iter()).map(|(g, x)| g * x).sum()]);
                vec![gx, gk]
            },
        ))
    }

    /// Adds a one-element tensor to every element.
    pub fn add_scalar_tensor(&self, b: &Tensor) -> Result<Tensor> {
        if b.numel() != 1 {
            return Err(PaceError::Dimension {
                op: "add_scalar_tensor",
                axis: 0,
                expected: 1,
                found: b.numel(),
            });
        }
        let bv = b.item();
        let data = self.values().iter().map(|x| x + bv).collect();
        Ok(Tensor::from_op(
            data,
            self.shape(),
            vec![self.clone(), b.clone()],
            |_, _, g| vec![Some(g.to_vec()), Some(vec![g.iter().sum()])],
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(PaceError::contract(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape()
            )));
        }
        Ok(Tensor::from_op(self.to_vec(), shape, vec![self.clone()], |_, _, g| {
            vec![Some(g.to_vec())]
        }))
    }

    pub(crate) fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape() {
            [r, c] => Ok((*r, *c)),
            other => Err(PaceError::contract(format!(
                "{op} expects a rank-2 tensor, got shape {other:?}"
            ))),
        }
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.as_matrix("transpose")?;
        let data = transpose_data(&self.values(), r, c);
        Ok(Tensor::from_op(data, &[c, r], vec![self.clone()], move |_, _, g| {
            vec![Some(transpose_data(g, c, r))]
        }))
    }

    /// Row gather: `out[i] = self[ids[i]]`. The gradient scatters back into
    /// the gathered rows only.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let (rows, cols) = self.as_matrix("gather_rows")?;
        if let Some((position, &value)) = ids.iter().enumerate().find(|(_, &id)| id >= rows) {
            return Err(PaceError::Index {
                op: "gather_rows",
                position,
                value,
                bound: rows,
            });
        }
        let src = self.values();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            data.extend_from_slice(&src[id * cols..(id + 1) * cols]);
        }
        drop(src);
        let ids = ids.to_vec();
        Ok(Tensor::from_op(
            data,
            &[ids.len(), cols],
            vec![self.clone()],
            move |_, _, g| {
                let mut gi = vec![0.0; rows * cols];
                for (i, &id) in ids.iter().enumerate() {
                    for c in 0..cols {
                        gi[id * cols + c] += g[i * cols + c];
                    }
                }
                vec![Some(gi)]
            },
        ))
    }

    /// Stacks matrices with equal column counts along the row axis.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| PaceError::contract("concat_rows of an empty list"))?;
        let (_, cols) = first.as_matrix("concat_rows")?;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.as_matrix("concat_rows")?;
            if c != cols {
                return Err(PaceError::Dimension {
                    op: "concat_rows",
                    axis: 1,
                    expected: cols,
                    found: c,
                });
            }
            data.extend_from_slice(&p.values());
            sizes.push(r * c);
        }
        let rows = data.len() / cols.max(1);
        Ok(Tensor::from_op(data, &[rows, cols], parts.to_vec(), move |_, _, g| {
            let mut offset = 0;
            sizes
                .iter()
                .map(|&n| {
                    let s = g[offset..offset + n].to_vec();
                    offset += n;
                    Some(s)
                })
                .collect()
        }))
    }

    /// Takes the values of `quantized` while routing the gradient unchanged
    /// to `self` (the straight-through estimator).
    pub fn straight_through(&self, quantized: &[f64]) -> Result<Tensor> {
        if quantized.len() != self.numel() {
            return Err(PaceError::Dimension {
                op: "straight_through",
                axis: 0,
                expected: self.numel(),
                found: quantized.len(),
            });
        }
        Ok(Tensor::from_op(
            quantized.to_vec(),
            self.shape(),
            vec![self.clone()],
            |_, _, g| vec![Some(g.to_vec())],
        ))
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.values();
        let preview: Vec<f64> = v.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("values", &preview)
            .finish()
    }
}

pub(crate) fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn transpose_data(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}
