//! Reverse-mode differentiation over a Wengert list.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar walks the list once in reverse. Several
//! forward passes can be recorded on the same tape (the guidance gradient
//! chains two denoiser evaluations) and are differentiated together.
//!
//! Every recorded op checks its output for NaN/Inf and fails with
//! [`Error::NonFinite`] instead of letting it propagate.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product for an op defined outside this module.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradient with respect to each input, given the upstream gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Result<Vec<Tensor>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Axpby(Var, f64, Var, f64),
    Silu(Var),
    Tanh(Var),
    ConcatCols(Var, Var),
    Gather(Var, Arc<[usize]>),
    ScatterAdd(Var, Arc<[usize]>, Arc<[f64]>),
    Sum(Var),
    SumSquares(Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// An input treated as a constant by `backward`.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// A constant copy of `v`'s current value (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = self.value(a).add_row(self.value(bias))?;
        self.push("add_row", out, Op::AddRow(a, bias), &[a, bias])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).scale(c);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    /// `ca * a + cb * b`.
    pub fn axpby(&mut self, ca: f64, a: Var, cb: f64, b: Var) -> Result<Var> {
        let out = self.value(a).axpby(ca, self.value(b), cb)?;
        self.push("axpby", out, Op::Axpby(a, ca, b, cb), &[a, b])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(silu);
        self.push("silu", out, Op::Silu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push("tanh", out, Op::Tanh(a), &[a])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).concat_cols(self.value(b))?;
        self.push("concat_cols", out, Op::ConcatCols(a, b), &[a, b])
    }

    pub fn gather(&mut self, a: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).gather(&index, shape)?;
        self.push("gather", out, Op::Gather(a, index), &[a])
    }

    pub fn scatter_add(&mut self, a: Var, index: Arc<[usize]>, weight: Arc<[f64]>, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).scatter_add(&index, &weight, shape)?;
        self.push("scatter_add", out, Op::ScatterAdd(a, index, weight), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum_squares());
        self.push("sum_squares", out, Op::SumSquares(a), &[a])
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let name = op.name();
        self.push(name, value, Op::Custom(inputs.to_vec(), op), inputs)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (g, node) in grads.iter().zip(&self.nodes) {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFinite { op: "backward" });
                }
                debug_assert_eq!(g.len(), node.value.len());
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, contrib: Tensor| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            let shape = self.nodes[v.0].value.shape().to_vec();
            let contrib = contrib.reshape(&shape)?;
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
            Ok(())
        };
        let rg = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if rg(*a) {
                    acc(*a, g.matmul_t(val(*b))?)?;
                }
                if rg(*b) {
                    acc(*b, val(*a).t_matmul(g)?)?;
                }
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.clone())?;
                if rg(*bias) {
                    acc(*bias, g.sum_rows())?;
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                if rg(*b) {
                    acc(*b, g.scale(-1.0))?;
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    acc(*a, g.mul(val(*b))?)?;
                }
                if rg(*b) {
                    acc(*b, g.mul(val(*a))?)?;
                }
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c))?,
            Op::Axpby(a, ca, b, cb) => {
                if rg(*a) {
                    acc(*a, g.scale(*ca))?;
                }
                if rg(*b) {
                    acc(*b, g.scale(*cb))?;
                }
            }
            Op::Silu(a) => acc(*a, g.zip_map(val(*a), "silu_grad", |g, x| g * silu_grad(x))?)?,
            Op::Tanh(a) => acc(*a, g.zip_map(&node.value, "tanh_grad", |g, y| g * (1.0 - y * y))?)?,
            Op::ConcatCols(a, b) => {
                let p = val(*a).cols();
                let q = val(*b).cols();
                let m = g.rows();
                if rg(*a) {
                    let mut ga = Vec::with_capacity(m * p);
                    for i in 0..m {
                        ga.extend_from_slice(&g.row(i)[..p]);
                    }
                    acc(*a, Tensor::new(vec![m, p], ga)?)?;
                }
                if rg(*b) {
                    let rows_b = val(*b).rows();
                    let mut gb = vec![0.0; rows_b * q];
                    for i in 0..m {
                        let r = if rows_b == 1 { 0 } else { i };
                        for (o, v) in gb[r * q..(r + 1) * q].iter_mut().zip(&g.row(i)[p..]) {
                            *o += v;
                        }
                    }
                    acc(*b, Tensor::new(vec![rows_b, q], gb)?)?;
                }
            }
            Op::Gather(a, index) => {
                let n = val(*a).len();
                let ones = vec![1.0; index.len()];
                acc(*a, g.scatter_add(index, &ones, &[n])?)?;
            }
            Op::ScatterAdd(a, index, weight) => {
                let src = val(*a);
                let data = index
                    .iter()
                    .zip(weight.iter())
                    .map(|(&i, &w)| w * g.data()[i])
                    .collect();
                acc(*a, Tensor::new(src.shape().to_vec(), data)?)?;
            }
            Op::Sum(a) => {
                let s = g.item();
                acc(*a, Tensor::full(val(*a).shape(), s))?;
            }
            Op::SumSquares(a) => {
                let s = g.item();
                acc(*a, val(*a).scale(2.0 * s))?;
            }
            Op::Custom(inputs, op) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let gin = op.backward(&ins, &node.value, g)?;
                if gin.len() != inputs.len() {
                    return Err(Error::Usage(format!(
                        "{} returned {} gradients for {} inputs",
                        op.name(),
                        gin.len(),
                        inputs.len()
                    )));
                }
                for (v, gi) in inputs.iter().zip(gin) {
                    acc(*v, gi)?;
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}
