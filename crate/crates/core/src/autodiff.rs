//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of a forward pass; [`Graph::backward`]
//! walks the tape once in reverse and accumulates gradients into every node
//! that requires them. Values are stored as f64; reductions accumulate in f64
//! so that 128x128x5 sums stay exact enough for finite-difference checks.

use crate::error::{Error, Result};

/// Clamp floor for division denominators and log arguments.
pub const EPS_CLAMP: f64 = 1e-7;

/// Log arguments are clamped into this interval before taking the log.
pub const LOG_RANGE: (f64, f64) = (EPS_CLAMP, 1.0);

/// N-dimensional numeric array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.is_empty() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {n} elements, data has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::Shape(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    /// Round every element to the nearest f32-representable value.
    /// Parameters are kept on this grid so the f32 weights container
    /// round-trips them bit-exactly.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Handle into a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Log,
    Exp,
    Abs,
    Neg,
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    /// Scalar on the right: `a op s`. `SubFrom` computes `s - a`.
    BinaryScalar {
        kind: BinaryScalarKind,
        a: usize,
        s: f64,
    },
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    Clamp {
        a: usize,
        lo: f64,
        hi: f64,
    },
    Reduce {
        kind: ReduceKind,
        a: usize,
    },
    Conv2d {
        input: usize,
        weights: usize,
        bias: usize,
    },
    TransposeConv2d {
        input: usize,
        weights: usize,
        bias: usize,
    },
    MaxPool2d {
        input: usize,
        argmax: Vec<usize>,
    },
    Concat {
        a: usize,
        b: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryScalarKind {
    Add,
    Sub,
    SubFrom,
    Mul,
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
}

/// Tape of one forward pass. Nodes are appended in execution order, which is
/// by construction a topological order.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    backward_done: bool,
}

/// Clamp a division denominator away from zero, preserving sign.
/// Exactly zero is treated as positive.
pub(crate) fn clamp_denominator(d: f64) -> f64 {
    if d.abs() >= EPS_CLAMP {
        d
    } else if d < 0.0 {
        -EPS_CLAMP
    } else {
        EPS_CLAMP
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub(crate) fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`, if any
    /// was accumulated.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape.clone(),
            data: g.clone(),
        })
    }

    pub(crate) fn requires(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape != vb.shape {
            return Err(Error::Shape(format!(
                "binary op shapes differ: {:?} vs {:?}",
                va.shape, vb.shape
            )));
        }
        let data: Vec<f64> = va
            .data
            .iter()
            .zip(&vb.data)
            .map(|(&x, &y)| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / clamp_denominator(y),
            })
            .collect();
        let value = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let rg = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(value, rg, Op::Binary { kind, a: a.0, b: b.0 }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }
    /// Elementwise division; denominators are clamped to magnitude >= 1e-7.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn binary_scalar(&mut self, kind: BinaryScalarKind, a: Var, s: f64) -> Var {
        let va = &self.nodes[a.0].value;
        let data: Vec<f64> = va
            .data
            .iter()
            .map(|&x| match kind {
                BinaryScalarKind::Add => x + s,
                BinaryScalarKind::Sub => x - s,
                BinaryScalarKind::SubFrom => s - x,
                BinaryScalarKind::Mul => x * s,
            })
            .collect();
        let value = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let rg = self.requires(a.0);
        self.push(value, rg, Op::BinaryScalar { kind, a: a.0, s })
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.binary_scalar(BinaryScalarKind::Add, a, s)
    }
    pub fn sub_scalar(&mut self, a: Var, s: f64) -> Var {
        self.binary_scalar(BinaryScalarKind::Sub, a, s)
    }
    /// `s - a`, elementwise.
    pub fn rsub_scalar(&mut self, a: Var, s: f64) -> Var {
        self.binary_scalar(BinaryScalarKind::SubFrom, a, s)
    }
    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        self.binary_scalar(BinaryScalarKind::Mul, a, s)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let data: Vec<f64> = va
            .data
            .iter()
            .map(|&x| match kind {
                UnaryKind::Log => x.clamp(LOG_RANGE.0, LOG_RANGE.1).ln(),
                UnaryKind::Exp => x.exp(),
                UnaryKind::Abs => x.abs(),
                UnaryKind::Neg => -x,
                UnaryKind::Relu => x.max(0.0),
                UnaryKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            })
            .collect();
        let value = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let rg = self.requires(a.0);
        self.push(value, rg, Op::Unary { kind, a: a.0 })
    }

    /// Natural log with the argument clamped into [1e-7, 1].
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Log, a)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Abs, a)
    }
    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Neg, a)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let va = &self.nodes[a.0].value;
        let value = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|&x| x.clamp(lo, hi)).collect(),
        };
        let rg = self.requires(a.0);
        self.push(value, rg, Op::Clamp { a: a.0, lo, hi })
    }

    fn reduce(&mut self, kind: ReduceKind, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if va.is_empty() {
            return Err(Error::Shape("reduce over empty tensor".into()));
        }
        let sum: f64 = va.data.iter().sum();
        let value = match kind {
            ReduceKind::Sum => Tensor::scalar(sum),
            ReduceKind::Mean => Tensor::scalar(sum / va.data.len() as f64),
        };
        let rg = self.requires(a.0);
        Ok(self.push(value, rg, Op::Reduce { kind, a: a.0 }))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(ReduceKind::Sum, a)
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(ReduceKind::Mean, a)
    }

    /// Reverse pass from a scalar loss. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State("backward called twice on one graph".into()));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Shape(format!(
                "backward target must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        self.backward_done = true;
        self.ensure_grad(loss.0);
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = 1.0;

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            let op = self.nodes[id].op.clone();
            let out_grad = self.nodes[id].grad.clone().unwrap();
            match op {
                Op::Leaf => {}
                Op::Binary { kind, a, b } => self.backward_binary(kind, a, b, &out_grad),
                Op::BinaryScalar { kind, a, s } => {
                    if self.requires(a) {
                        self.ensure_grad(a);
                        let g = self.nodes[a].grad.as_mut().unwrap();
                        match kind {
                            BinaryScalarKind::Add | BinaryScalarKind::Sub => {
                                for (gi, &og) in g.iter_mut().zip(&out_grad) {
                                    *gi += og;
                                }
                            }
                            BinaryScalarKind::SubFrom => {
                                for (gi, &og) in g.iter_mut().zip(&out_grad) {
                                    *gi -= og;
                                }
                            }
                            BinaryScalarKind::Mul => {
                                for (gi, &og) in g.iter_mut().zip(&out_grad) {
                                    *gi += s * og;
                                }
                            }
                        }
                    }
                }
                Op::Unary { kind, a } => self.backward_unary(kind, a, id, &out_grad),
                Op::Clamp { a, lo, hi } => {
                    if self.requires(a) {
                        let input: Vec<f64> = self.nodes[a].value.data.clone();
                        self.ensure_grad(a);
                        let g = self.nodes[a].grad.as_mut().unwrap();
                        for ((gi, &og), &x) in g.iter_mut().zip(&out_grad).zip(&input) {
                            if x >= lo && x <= hi {
                                *gi += og;
                            }
                        }
                    }
                }
                Op::Reduce { kind, a } => {
                    if self.requires(a) {
                        let n = self.nodes[a].value.data.len() as f64;
                        let contrib = match kind {
                            ReduceKind::Sum => out_grad[0],
                            ReduceKind::Mean => out_grad[0] / n,
                        };
                        self.ensure_grad(a);
                        let g = self.nodes[a].grad.as_mut().unwrap();
                        for gi in g.iter_mut() {
                            *gi += contrib;
                        }
                    }
                }
                Op::Conv2d {
                    input,
                    weights,
                    bias,
                } => crate::nn::backward_conv2d(self, input, weights, bias, id, &out_grad),
                Op::TransposeConv2d {
                    input,
                    weights,
                    bias,
                } => crate::nn::backward_transpose_conv2d(self, input, weights, bias, id, &out_grad),
                Op::MaxPool2d { input, ref argmax } => {
                    if self.requires(input) {
                        self.ensure_grad(input);
                        let g = self.nodes[input].grad.as_mut().unwrap();
                        for (&src, &og) in argmax.iter().zip(&out_grad) {
                            g[src] += og;
                        }
                    }
                }
                Op::Concat { a, b } => crate::nn::backward_concat(self, a, b, id, &out_grad),
            }
        }
        Ok(())
    }

    fn backward_binary(&mut self, kind: BinaryKind, a: usize, b: usize, out_grad: &[f64]) {
        let (ra, rb) = (self.requires(a), self.requires(b));
        if !ra && !rb {
            return;
        }
        let va: Vec<f64> = self.nodes[a].value.data.clone();
        let vb: Vec<f64> = self.nodes[b].value.data.clone();
        if ra {
            self.ensure_grad(a);
            let g = self.nodes[a].grad.as_mut().unwrap();
            for i in 0..out_grad.len() {
                g[i] += match kind {
                    BinaryKind::Add | BinaryKind::Sub => out_grad[i],
                    BinaryKind::Mul => vb[i] * out_grad[i],
                    BinaryKind::Div => out_grad[i] / clamp_denominator(vb[i]),
                };
            }
        }
        if rb {
            self.ensure_grad(b);
            let g = self.nodes[b].grad.as_mut().unwrap();
            for i in 0..out_grad.len() {
                g[i] += match kind {
                    BinaryKind::Add => out_grad[i],
                    BinaryKind::Sub => -out_grad[i],
                    BinaryKind::Mul => va[i] * out_grad[i],
                    BinaryKind::Div => {
                        // zero derivative inside the clamped region
                        if vb[i].abs() >= EPS_CLAMP {
                            let d = clamp_denominator(vb[i]);
                            -va[i] / (d * d) * out_grad[i]
                        } else {
                            0.0
                        }
                    }
                };
            }
        }
    }

    fn backward_unary(&mut self, kind: UnaryKind, a: usize, out_id: usize, out_grad: &[f64]) {
        if !self.requires(a) {
            return;
        }
        let input: Vec<f64> = self.nodes[a].value.data.clone();
        let output: Vec<f64> = self.nodes[out_id].value.data.clone();
        self.ensure_grad(a);
        let g = self.nodes[a].grad.as_mut().unwrap();
        for i in 0..out_grad.len() {
            let d = match kind {
                UnaryKind::Log => {
                    let x = input[i];
                    if x >= LOG_RANGE.0 && x <= LOG_RANGE.1 {
                        1.0 / x
                    } else {
                        0.0
                    }
                }
                UnaryKind::Exp => output[i],
                UnaryKind::Abs => {
                    if input[i] > 0.0 {
                        1.0
                    } else if input[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }
                UnaryKind::Neg => -1.0,
                UnaryKind::Relu => {
                    if input[i] > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                UnaryKind::Sigmoid => output[i] * (1.0 - output[i]),
            };
            g[i] += d * out_grad[i];
        }
    }

    pub(crate) fn ensure_grad(&mut self, id: usize) {
        if self.nodes[id].grad.is_none() {
            let n = self.nodes[id].value.data.len();
            self.nodes[id].grad = Some(vec![0.0; n]);
        }
    }
}
