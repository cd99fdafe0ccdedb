//! Tape-based reverse-mode automatic differentiation.
//!
//! Every differentiable operation appends a node to a [`Tape`]. Nodes are only
//! ever appended, so tape order is a topological order and [`Tape::backward`]
//! visits each operation exactly once by walking it in reverse.
//!
//! A tape and its [`Var`] handles are confined to one thread (`RefCell`
//! inside). Workers that run in parallel build their own tapes.

mod conv;
mod gradcheck;
mod linalg;
mod pointwise;
mod shape;

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use conv::ConvGeometry;
pub use gradcheck::{grad_check, grad_check_coords};

pub(crate) struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias { x: usize, bias: usize },
    Scale(usize, f64),
    Offset(usize),
    Silu(usize),
    Sigmoid(usize),
    Sum(usize),
    Mean(usize),
    Frobenius(usize),
    Softmax(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    MatMul { a: usize, b: usize, trans_b: bool },
    Conv3d { x: usize, kernel: usize, bias: usize, geom: ConvGeometry },
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    Narrow { x: usize, axis: usize, start: usize },
    Concat { xs: Vec<usize>, axis: usize },
    Upsample { x: usize, factors: [usize; 3] },
}

/// Recorder of differentiable operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that participates in differentiation.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        // Constant subgraphs need no backward information.
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node { value, op, requires_grad, grad: None });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    /// Accumulated gradient of `var`, if a backward pass reached it.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        self.check(var);
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        node.grad.as_ref().map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape mirrors value"))
    }

    /// Clears every accumulated gradient on the tape.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Gradients are added to whatever is already stored, so two calls without
    /// [`Tape::zero_grad`] in between accumulate.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        self.check(loss);
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Usage(format!("backward requires a scalar loss, got shape {:?}", nodes[loss.id].value.shape())));
        }
        if !nodes[loss.id].requires_grad {
            return Ok(());
        }
        let mut buf = GradBuf::new(loss.id + 1);
        buf.slot(loss.id, 1)[0] = 1.0;
        for id in (0..=loss.id).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = buf.take(id) else { continue };
            propagate(&nodes, id, &g, &mut buf);
            let node = &mut nodes[id];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn check(&self, var: Var<'_>) {
        assert!(std::ptr::eq(self, var.tape), "variable belongs to a different tape");
    }
}

/// Sparse per-node gradient accumulators used during one backward pass.
pub(crate) struct GradBuf {
    slots: Vec<Option<Vec<f64>>>,
}

impl GradBuf {
    fn new(n: usize) -> Self {
        Self { slots: (0..n).map(|_| None).collect() }
    }

    /// Zero-initialized on first access.
    pub(crate) fn slot(&mut self, id: usize, len: usize) -> &mut [f64] {
        self.slots[id].get_or_insert_with(|| vec![0.0; len])
    }

    fn take(&mut self, id: usize) -> Option<Vec<f64>> {
        self.slots[id].take()
    }
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], buf: &mut GradBuf) {
    let rg = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &i in [a, b] {
                if rg(i) {
                    axpy(buf.slot(i, g.len()), 1.0, g);
                }
            }
        }
        Op::Sub(a, b) => {
            if rg(*a) {
                axpy(buf.slot(*a, g.len()), 1.0, g);
            }
            if rg(*b) {
                axpy(buf.slot(*b, g.len()), -1.0, g);
            }
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                let other = val(*b).data();
                let s = buf.slot(*a, g.len());
                for ((s, &g), &o) in s.iter_mut().zip(g).zip(other) {
                    *s += g * o;
                }
            }
            if rg(*b) {
                let other = val(*a).data();
                let s = buf.slot(*b, g.len());
                for ((s, &g), &o) in s.iter_mut().zip(g).zip(other) {
                    *s += g * o;
                }
            }
        }
        Op::AddBias { x, bias } => {
            if rg(*x) {
                axpy(buf.slot(*x, g.len()), 1.0, g);
            }
            if rg(*bias) {
                let n = val(*bias).len();
                let s = buf.slot(*bias, n);
                for row in g.chunks_exact(n) {
                    axpy(s, 1.0, row);
                }
            }
        }
        Op::Scale(x, c) => {
            if rg(*x) {
                axpy(buf.slot(*x, g.len()), *c, g);
            }
        }
        Op::Offset(x) | Op::Reshape(x) => {
            if rg(*x) {
                axpy(buf.slot(*x, g.len()), 1.0, g);
            }
        }
        Op::Silu(x) => pointwise::silu_backward(val(*x), g, buf.slot(*x, g.len())),
        Op::Sigmoid(x) => pointwise::sigmoid_backward(&nodes[id].value, g, buf.slot(*x, g.len())),
        Op::Sum(x) => {
            let n = val(*x).len();
            buf.slot(*x, n).iter_mut().for_each(|s| *s += g[0]);
        }
        Op::Mean(x) => {
            let n = val(*x).len();
            let c = g[0] / n as f64;
            buf.slot(*x, n).iter_mut().for_each(|s| *s += c);
        }
        Op::Frobenius(x) => {
            let norm = nodes[id].value.data()[0];
            let xv = val(*x);
            // The subgradient at the origin is taken to be zero.
            if norm > 0.0 {
                axpy(buf.slot(*x, xv.len()), g[0] / norm, xv.data());
            } else {
                buf.slot(*x, xv.len());
            }
        }
        Op::Softmax(x) => pointwise::softmax_backward(&nodes[id].value, g, buf.slot(*x, g.len())),
        Op::LayerNorm { x, gain, bias, eps } => pointwise::layer_norm_backward(nodes, id, *x, *gain, *bias, *eps, g, buf),
        Op::MatMul { a, b, trans_b } => linalg::matmul_backward(nodes, id, *a, *b, *trans_b, g, buf),
        Op::Conv3d { x, kernel, bias, geom } => conv::conv3d_backward(nodes, *x, *kernel, *bias, geom, g, buf),
        Op::Permute { x, perm } => shape::permute_backward(val(*x), perm, g, buf.slot(*x, g.len())),
        Op::Narrow { x, axis, start } => {
            let out_shape = nodes[id].value.shape();
            let xv = val(*x);
            shape::narrow_backward(xv.shape(), out_shape, *axis, *start, g, buf.slot(*x, xv.len()))
        }
        Op::Concat { xs, axis } => {
            let mut offset = 0;
            for &i in xs {
                let shp = val(i).shape().to_vec();
                let extent = shp[*axis];
                if rg(i) {
                    let out_shape = nodes[id].value.shape();
                    let s = buf.slot(i, val(i).len());
                    shape::concat_backward(out_shape, &shp, *axis, offset, g, s);
                }
                offset += extent;
            }
        }
        Op::Upsample { x, factors } => {
            let xv = val(*x);
            shape::upsample_backward(xv.shape(), *factors, g, buf.slot(*x, xv.len()))
        }
    }
}

fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Copy of the current value.
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Runs `f` on the value without copying it.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn item(&self) -> Result<f64> {
        self.with_value(|t| t.item())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(*self)
    }

    fn same(&self, other: Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "variables belong to different tapes");
    }

    fn binary(self, other: Var<'t>, op_name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        self.same(other);
        let out = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.shape() != b.shape() {
                return Err(Error::dim(op_name, a.shape(), b.shape()));
            }
            a.zip_map(b, f)?
        };
        Ok(self.tape.push(out, op, &[self.id, other.id]))
    }

    #[allow(clippy::should_implement_trait)] // fallible, so not the std trait
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    #[allow(clippy::should_implement_trait)] // fallible, so not the std trait
    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    #[allow(clippy::should_implement_trait)] // fallible, so not the std trait
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// Adds `bias` broadcast over leading axes; `bias.shape` must be a suffix
    /// of `self.shape`.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same(bias);
        let out = {
            let nodes = self.tape.nodes();
            let (x, b) = (&nodes[self.id].value, &nodes[bias.id].value);
            if !x.shape().ends_with(b.shape()) {
                return Err(Error::dim("add_bias", x.shape(), b.shape()));
            }
            let mut out = x.clone();
            for row in out.data_mut().chunks_exact_mut(b.len()) {
                row.iter_mut().zip(b.data()).for_each(|(o, &bv)| *o += bv);
            }
            out
        };
        Ok(self.tape.push(out, Op::AddBias { x: self.id, bias: bias.id }, &[self.id, bias.id]))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let out = self.with_value(|x| x.map(|v| v * c));
        self.tape.push(out, Op::Scale(self.id, c), &[self.id])
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let out = self.with_value(|x| x.map(|v| v + c));
        self.tape.push(out, Op::Offset(self.id), &[self.id])
    }

    /// `x · sigmoid(x)`.
    pub fn silu(self) -> Var<'t> {
        let out = self.with_value(|x| x.map(|v| v * pointwise::sigmoid(v)));
        self.tape.push(out, Op::Silu(self.id), &[self.id])
    }

    pub fn sigmoid(self) -> Var<'t> {
        let out = self.with_value(|x| x.map(pointwise::sigmoid));
        self.tape.push(out, Op::Sigmoid(self.id), &[self.id])
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.mul(self)
    }

    pub fn sum(self) -> Var<'t> {
        let out = Tensor::scalar(self.with_value(|x| x.sum()));
        self.tape.push(out, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'t> {
        let out = Tensor::scalar(self.with_value(|x| x.mean()));
        self.tape.push(out, Op::Mean(self.id), &[self.id])
    }

    /// `sqrt(Σ x²)` as a scalar.
    pub fn frobenius_norm(self) -> Var<'t> {
        let out = Tensor::scalar(self.with_value(|x| x.frobenius()));
        self.tape.push(out, Op::Frobenius(self.id), &[self.id])
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax_lastdim(self) -> Result<Var<'t>> {
        let out = self.with_value(pointwise::softmax_forward)?;
        Ok(self.tape.push(out, Op::Softmax(self.id), &[self.id]))
    }

    /// Per-row normalization over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.same(gain);
        self.same(bias);
        let out = pointwise::layer_norm_forward(&self.tape.nodes(), self.id, gain.id, bias.id, eps)?;
        Ok(self.tape.push(out, Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, eps }, &[self.id, gain.id, bias.id]))
    }

    /// `self · other` over the last two axes.
    ///
    /// Leading axes must be equal, or `other` must be a plain matrix shared
    /// across all leading positions of `self`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, false)
    }

    /// `self · otherᵀ` over the last two axes.
    pub fn matmul_nt(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(self, other: Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        self.same(other);
        let out = {
            let nodes = self.tape.nodes();
            linalg::matmul_forward(&nodes[self.id].value, &nodes[other.id].value, trans_b)?
        };
        Ok(self.tape.push(out, Op::MatMul { a: self.id, b: other.id, trans_b }, &[self.id, other.id]))
    }

    /// Causal 3D convolution of a `[C, T, H, W]` input with a
    /// `[C_out, C_in, kT, kH, kW]` kernel.
    pub fn conv3d_causal(self, kernel: Var<'t>, bias: Var<'t>, stride: (usize, usize, usize)) -> Result<Var<'t>> {
        self.same(kernel);
        self.same(bias);
        let (out, geom) = {
            let nodes = self.tape.nodes();
            conv::conv3d_forward(&nodes[self.id].value, &nodes[kernel.id].value, &nodes[bias.id].value, stride)?
        };
        Ok(self.tape.push(out, Op::Conv3d { x: self.id, kernel: kernel.id, bias: bias.id, geom }, &[self.id, kernel.id, bias.id]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.id), &[self.id]))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let out = self.with_value(|x| shape::permute_forward(x, perm))?;
        Ok(self.tape.push(out, Op::Permute { x: self.id, perm: perm.to_vec() }, &[self.id]))
    }

    /// Sub-range `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let out = self.with_value(|x| shape::narrow_forward(x, axis, start, len))?;
        Ok(self.tape.push(out, Op::Narrow { x: self.id, axis, start }, &[self.id]))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        parts.iter().for_each(|p| first.same(*p));
        let out = {
            let nodes = first.tape.nodes();
            let vals: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.id].value).collect();
            shape::concat_forward(&vals, axis)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.tape.push(out, Op::Concat { xs: ids.clone(), axis }, &ids))
    }

    /// Nearest-neighbour upsampling of a `[C, T, H, W]` tensor.
    pub fn upsample_nearest(self, factors: [usize; 3]) -> Result<Var<'t>> {
        let out = self.with_value(|x| shape::upsample_forward(x, factors))?;
        Ok(self.tape.push(out, Op::Upsample { x: self.id, factors }, &[self.id]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 5.0]));
        let loss = x.sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[0.5, -1.5, 2.0, 3.0]));
        let n = x.frobenius_norm();
        let loss = n.square().unwrap().scale(0.5);
        loss.backward().unwrap();
        let g = x.grad().unwrap();
        for (a, b) in g.data().iter().zip(x.value().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_backward_accumulates_until_reset() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let loss = x.mul(x).unwrap().sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[4.0, 8.0]);
        tape.zero_grad();
        assert!(x.grad().is_none());
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_a_usage_error() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(x.backward(), Err(Error::Usage(_))));
    }

    #[test]
    fn every_reachable_trainable_node_gets_a_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2], &[3.0, 4.0]));
        let c = tape.constant(t(&[2], &[1.0, 1.0]));
        let h = a.mul(b).unwrap().add(c).unwrap();
        let loss = h.silu().sum();
        loss.backward().unwrap();
        assert!(a.grad().is_some() && b.grad().is_some() && h.grad().is_some());
        assert!(c.grad().is_none());
        assert_eq!(a.grad().unwrap().shape(), a.shape().as_slice());
    }

    #[test]
    fn frobenius_at_zero_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3, 2]));
        let n = x.frobenius_norm();
        assert_eq!(n.item().unwrap(), 0.0);
        n.backward().unwrap();
        assert!(x.grad().unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn frobenius_of_three_four_is_five() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[3.0, 4.0]));
        assert_eq!(x.frobenius_norm().item().unwrap(), 5.0);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        let msg = a.add(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }
}
