//! Parameterized layers, parameter binding, and the Adam optimizer.
//!
//! Layers own plain [`Tensor`] parameters. At forward time a [`Binder`] turns
//! each parameter into a tape variable, trainable or frozen, and remembers the
//! mapping so gradients can be read back in [`Module::visit`] order.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Anything that owns named parameters.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// All parameters of `m` with their dotted names, in visit order.
pub fn named_tensors<M: Module + ?Sized>(m: &M, prefix: &str) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    m.visit(prefix, &mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

/// Overwrites every parameter of `m` from `source`, which must contain each
/// name with a matching shape.
pub fn load_named<M: Module + ?Sized>(m: &mut M, prefix: &str, source: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut failure = None;
    m.visit_mut(prefix, &mut |name, t| {
        if failure.is_some() {
            return;
        }
        match source.get(name) {
            None => failure = Some(Error::Usage(format!("checkpoint lacks tensor `{name}`"))),
            Some(src) if src.shape() != t.shape() => failure = Some(Error::dim("load_named", t.shape(), src.shape())),
            Some(src) => *t = src.clone(),
        }
    });
    failure.map_or(Ok(()), Err)
}

pub fn parameter_count<M: Module + ?Sized>(m: &M) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, t| n += t.len());
    n
}

/// Maps parameters onto a tape for one forward pass.
pub struct Binder<'t> {
    tape: &'t Tape,
    trainable: bool,
    bound: RefCell<HashMap<*const Tensor, Var<'t>>>,
}

impl<'t> Binder<'t> {
    /// Parameters become leaves that receive gradients.
    pub fn trainable(tape: &'t Tape) -> Self {
        Self { tape, trainable: true, bound: RefCell::default() }
    }

    /// Parameters become constants.
    pub fn frozen(tape: &'t Tape) -> Self {
        Self { tape, trainable: false, bound: RefCell::default() }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// The tape variable for `param`, created on first use.
    pub fn bind(&self, param: &Tensor) -> Var<'t> {
        let key = param as *const Tensor;
        *self.bound.borrow_mut().entry(key).or_insert_with(|| {
            if self.trainable {
                self.tape.leaf(param.clone())
            } else {
                self.tape.constant(param.clone())
            }
        })
    }

    pub fn constant(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }

    /// Gradients of every parameter of `m` in visit order; parameters the
    /// forward pass never touched get zeros.
    pub fn gradients<M: Module + ?Sized>(&self, m: &M) -> Vec<Tensor> {
        let bound = self.bound.borrow();
        let mut out = Vec::new();
        m.visit("", &mut |_, t| {
            let g = bound.get(&(t as *const Tensor)).and_then(|v| self.tape.grad(*v)).unwrap_or_else(|| Tensor::zeros(t.shape()));
            out.push(g);
        });
        out
    }
}

/// Affine map `x · W + b` over the last axis; `W` is `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Gaussian init with variance `gain² / fan_in`.
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, gain: f64, rng: &mut R) -> Self {
        Self { weight: Tensor::randn(&[fan_in, fan_out], gain / (fan_in as f64).sqrt(), rng), bias: Tensor::zeros(&[fan_out]) }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Tensor::zeros(&[fan_in, fan_out]), bias: Tensor::zeros(&[fan_out]) }
    }

    pub fn forward<'t>(&self, p: &Binder<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(p.bind(&self.weight))?.add_bias(p.bind(&self.bias))
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self { gain: Tensor::ones(&[dim]), bias: Tensor::zeros(&[dim]), eps: 1e-5 }
    }

    pub fn forward<'t>(&self, p: &Binder<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(p.bind(&self.gain), p.bind(&self.bias), self.eps)
    }
}

impl Module for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "gain"), &self.gain);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Causal 3D convolution layer over `[C, T, H, W]` inputs.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: (usize, usize, usize),
}

impl Conv3d {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, kernel: [usize; 3], stride: (usize, usize, usize), rng: &mut R) -> Self {
        let fan_in = c_in * kernel.iter().product::<usize>();
        Self {
            kernel: Tensor::randn(&[c_out, c_in, kernel[0], kernel[1], kernel[2]], 1.0 / (fan_in as f64).sqrt(), rng),
            bias: Tensor::zeros(&[c_out]),
            stride,
        }
    }

    pub fn forward<'t>(&self, p: &Binder<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv3d_causal(p.bind(&self.kernel), p.bind(&self.bias), self.stride)
    }
}

impl Module for Conv3d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "kernel"), &self.kernel);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "kernel"), &mut self.kernel);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Adam with optional global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0), step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update; `grads` must follow `model`'s visit order.
    pub fn step<M: Module + ?Sized>(&mut self, model: &mut M, grads: &[Tensor]) {
        self.step_with_lr(model, grads, self.lr)
    }

    pub fn step_with_lr<M: Module + ?Sized>(&mut self, model: &mut M, grads: &[Tensor], lr: f64) {
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        }
        let scale = match self.clip_norm {
            Some(max) => {
                let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let mut idx = 0;
        let (first, second) = (&mut self.first, &mut self.second);
        model.visit_mut("", &mut |_, param| {
            let g = grads[idx].data();
            let (m, v) = (&mut first[idx], &mut second[idx]);
            for (((p, &g), m), v) in param.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                let g = g * scale;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            }
            idx += 1;
        });
    }
}

/// Adds `src` into `acc` elementwise (gradient accumulation over a batch).
pub fn accumulate(acc: &mut Vec<Tensor>, src: Vec<Tensor>) {
    if acc.is_empty() {
        *acc = src;
        return;
    }
    for (a, s) in acc.iter_mut().zip(src) {
        a.data_mut().iter_mut().zip(s.data()).for_each(|(a, b)| *a += b);
    }
}
