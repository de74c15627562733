//! Tape-based reverse-mode automatic differentiation.
//!
//! Ops execute eagerly and record themselves; `backward` walks the tape in
//! reverse insertion order (which is a topological order by construction)
//! and accumulates gradients into every `requires_grad` leaf. One backward
//! per tape: the graph is consumed, higher-order gradients are out of
//! scope.

use super::data::{finite_checks_enabled, Tensor};
use super::kernels;
use super::scalar::Scalar;
use super::shape::{ConvSpec, PoolSpec, Shape};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<E: Scalar> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<u32>,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<E>,
        inv_std: Vec<E>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: Tensor<E>,
        running_var: Tensor<E>,
        eps: f64,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
    BatchedMatmul {
        a: Var,
        b: Var,
    },
    TransposeMat {
        input: Var,
    },
    ToPositions {
        input: Var,
    },
    FromPositions {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddChannel {
        a: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Scale {
        input: Var,
        factor: E,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    Bce {
        pred: Var,
        target: Var,
    },
}

struct Node<E: Scalar> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
    grad: Option<Tensor<E>>,
}

pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
    consumed: bool,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Drop all recorded nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a node after `backward`, if one was accumulated.
    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<E>> {
        self.nodes[v.0].grad.take()
    }

    fn check_open(&self) -> Result<()> {
        if self.consumed {
            return Err(Error::Usage(
                "tape already consumed by backward; reset it or build a new one".into(),
            ));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> Result<Var> {
        if finite_checks_enabled() {
            value.assert_finite("op output")?;
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    // -- recorded operations -------------------------------------------------

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    ) -> Result<Var> {
        self.check_open()?;
        let out = kernels::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &spec,
        )?;
        let rg = self.requires_grad(input)
            || self.requires_grad(weight)
            || bias.is_some_and(|b| self.requires_grad(b));
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            },
            rg,
        )
    }

    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    ) -> Result<Var> {
        self.check_open()?;
        let out = kernels::conv_transpose2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &spec,
        )?;
        let rg = self.requires_grad(input)
            || self.requires_grad(weight)
            || bias.is_some_and(|b| self.requires_grad(b));
        self.push(
            out,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                spec,
            },
            rg,
        )
    }

    pub fn maxpool2d(&mut self, input: Var, spec: PoolSpec) -> Result<Var> {
        self.check_open()?;
        let pooled = kernels::maxpool2d(self.value(input), &spec)?;
        let rg = self.requires_grad(input);
        self.push(
            pooled.output,
            Op::MaxPool2d {
                input,
                argmax: pooled.argmax,
            },
            rg,
        )
    }

    /// Train-mode batch norm. Returns the output var plus updated running
    /// statistics; the caller owns those (the tape does not mutate model
    /// state).
    pub fn batchnorm2d_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<E>,
        running_var: &Tensor<E>,
        eps: f64,
        momentum: f64,
    ) -> Result<(Var, Tensor<E>, Tensor<E>)> {
        self.check_open()?;
        let fwd = kernels::batchnorm2d_train(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
            momentum,
        )?;
        let rg = self.requires_grad(input) || self.requires_grad(gamma) || self.requires_grad(beta);
        let out = self.push(
            fwd.output,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                mean: fwd.mean,
                inv_std: fwd.inv_std,
            },
            rg,
        )?;
        Ok((out, fwd.running_mean, fwd.running_var))
    }

    pub fn batchnorm2d_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<E>,
        running_var: &Tensor<E>,
        eps: f64,
    ) -> Result<Var> {
        self.check_open()?;
        let out = kernels::batchnorm2d_eval(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        )?;
        let rg = self.requires_grad(input) || self.requires_grad(gamma) || self.requires_grad(beta);
        self.push(
            out,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                running_mean: running_mean.clone(),
                running_var: running_var.clone(),
                eps,
            },
            rg,
        )
    }

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        self.check_open()?;
        let out = kernels::softmax(self.value(input), axis)?;
        let rg = self.requires_grad(input);
        self.push(out, Op::Softmax { input, axis }, rg)
    }

    pub fn batched_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let out = kernels::batched_matmul(self.value(a), self.value(b))?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(out, Op::BatchedMatmul { a, b }, rg)
    }

    pub fn transpose_mat(&mut self, input: Var) -> Result<Var> {
        self.check_open()?;
        let out = kernels::transpose_mat(self.value(input));
        let rg = self.requires_grad(input);
        self.push(out, Op::TransposeMat { input }, rg)
    }

    pub fn to_positions(&mut self, input: Var) -> Result<Var> {
        self.check_open()?;
        let out = kernels::nchw_to_positions(self.value(input));
        let rg = self.requires_grad(input);
        self.push(out, Op::ToPositions { input }, rg)
    }

    /// Inverse of [`Tape::to_positions`]; spatial extents are recovered
    /// from the given channel count.
    pub fn from_positions(&mut self, input: Var, c: usize, h: usize, w: usize) -> Result<Var> {
        self.check_open()?;
        let s = self.shape(input);
        if s.height() != h * w || s.width() != c {
            return Err(Error::Shape(format!(
                "positions matrix {s} does not reshape to ({c}, {h}, {w})"
            )));
        }
        let out = kernels::positions_to_nchw(self.value(input), c, h, w);
        let rg = self.requires_grad(input);
        self.push(out, Op::FromPositions { input }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let out = kernels::add(self.value(a), self.value(b))?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(out, Op::Add { a, b }, rg)
    }

    pub fn add_channel(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.check_open()?;
        let out = kernels::add_channel(self.value(a), self.value(bias))?;
        let rg = self.requires_grad(a) || self.requires_grad(bias);
        self.push(out, Op::AddChannel { a, bias }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let out = kernels::mul(self.value(a), self.value(b))?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(out, Op::Mul { a, b }, rg)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.check_open()?;
        let out = kernels::relu(self.value(input));
        let rg = self.requires_grad(input);
        self.push(out, Op::Relu { input }, rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.check_open()?;
        let out = kernels::sigmoid(self.value(input));
        let rg = self.requires_grad(input);
        self.push(out, Op::Sigmoid { input }, rg)
    }

    pub fn scale(&mut self, input: Var, factor: E) -> Result<Var> {
        self.check_open()?;
        let out = kernels::scale(self.value(input), factor);
        let rg = self.requires_grad(input);
        self.push(out, Op::Scale { input, factor }, rg)
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        self.check_open()?;
        let out = Tensor::scalar(kernels::sum_all(self.value(input)));
        let rg = self.requires_grad(input);
        self.push(out, Op::Sum { input }, rg)
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        self.check_open()?;
        let out = Tensor::scalar(kernels::mean_all(self.value(input)));
        let rg = self.requires_grad(input);
        self.push(out, Op::Mean { input }, rg)
    }

    /// Mean binary cross entropy of probabilities against a {0, 1} target.
    /// The target leg is constant: gradients flow to `pred` only.
    pub fn bce_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.check_open()?;
        if self.requires_grad(target) {
            return Err(Error::Usage(
                "bce target must not require gradients".into(),
            ));
        }
        let loss = kernels::bce_loss(self.value(pred), self.value(target))?;
        let rg = self.requires_grad(pred);
        self.push(Tensor::scalar(loss), Op::Bce { pred, target }, rg)
    }

    // -- backward ------------------------------------------------------------

    /// Populate gradients of every `requires_grad` ancestor of `root`.
    /// `root` must be scalar. Consumes the graph: a second call errors.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Usage(
                "backward already ran on this tape; higher-order gradients are unsupported".into(),
            ));
        }
        let root_node = &self.nodes[root.0];
        if root_node.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar root, got shape {}",
                root_node.value.shape()
            )));
        }
        if !root_node.requires_grad {
            return Err(Error::Usage(
                "backward root does not depend on any requires_grad leaf".into(),
            ));
        }
        self.consumed = true;
        self.nodes[root.0].grad = Some(Tensor::scalar(E::one()));

        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            // Detach this node's grad while reading sibling values.
            let grad_out = self.nodes[id].grad.take().expect("checked above");
            let contributions = self.contributions(id, &grad_out)?;
            for (pid, g) in contributions {
                self.accumulate(pid, g);
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Per-op vector-Jacobian products: pairs of (parent, gradient).
    fn contributions(&self, id: usize, grad_out: &Tensor<E>) -> Result<Vec<(Var, Tensor<E>)>> {
        let mut out = Vec::with_capacity(2);
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let grads = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    bias.is_some(),
                    spec,
                    grad_out,
                    self.needs(*input),
                );
                if let Some(gi) = grads.input {
                    out.push((*input, gi));
                }
                if self.needs(*weight) {
                    out.push((*weight, grads.weight));
                }
                if let (Some(b), Some(gb)) = (bias, grads.bias) {
                    if self.needs(*b) {
                        out.push((*b, gb));
                    }
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let grads = kernels::conv_transpose2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    bias.is_some(),
                    spec,
                    grad_out,
                    self.needs(*input),
                );
                if let Some(gi) = grads.input {
                    out.push((*input, gi));
                }
                if self.needs(*weight) {
                    out.push((*weight, grads.weight));
                }
                if let (Some(b), Some(gb)) = (bias, grads.bias) {
                    if self.needs(*b) {
                        out.push((*b, gb));
                    }
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if self.needs(*input) {
                    let gi = kernels::maxpool2d_backward(
                        self.value(*input).shape(),
                        argmax,
                        grad_out,
                    );
                    out.push((*input, gi));
                }
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let grads = kernels::batchnorm2d_train_backward(
                    self.value(*input),
                    self.value(*gamma),
                    mean,
                    inv_std,
                    grad_out,
                );
                if self.needs(*input) {
                    out.push((*input, grads.input));
                }
                if self.needs(*gamma) {
                    out.push((*gamma, grads.gamma));
                }
                if self.needs(*beta) {
                    out.push((*beta, grads.beta));
                }
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
            } => {
                let grads = kernels::batchnorm2d_eval_backward(
                    self.value(*input),
                    self.value(*gamma),
                    running_mean,
                    running_var,
                    *eps,
                    grad_out,
                );
                if self.needs(*input) {
                    out.push((*input, grads.input));
                }
                if self.needs(*gamma) {
                    out.push((*gamma, grads.gamma));
                }
                if self.needs(*beta) {
                    out.push((*beta, grads.beta));
                }
            }
            Op::Softmax { input, axis } => {
                if self.needs(*input) {
                    let y = &self.nodes[id].value;
                    out.push((*input, kernels::softmax_backward(y, *axis, grad_out)));
                }
            }
            Op::BatchedMatmul { a, b } => {
                let (ga, gb) =
                    kernels::batched_matmul_backward(self.value(*a), self.value(*b), grad_out);
                if self.needs(*a) {
                    out.push((*a, ga));
                }
                if self.needs(*b) {
                    out.push((*b, gb));
                }
            }
            Op::TransposeMat { input } => {
                if self.needs(*input) {
                    out.push((*input, kernels::transpose_mat(grad_out)));
                }
            }
            Op::ToPositions { input } => {
                if self.needs(*input) {
                    let s = self.value(*input).shape();
                    out.push((
                        *input,
                        kernels::positions_to_nchw(grad_out, s.channels(), s.height(), s.width()),
                    ));
                }
            }
            Op::FromPositions { input } => {
                if self.needs(*input) {
                    out.push((*input, kernels::nchw_to_positions(grad_out)));
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    out.push((*a, grad_out.clone()));
                }
                if self.needs(*b) {
                    out.push((*b, grad_out.clone()));
                }
            }
            Op::AddChannel { a, bias } => {
                if self.needs(*a) {
                    out.push((*a, grad_out.clone()));
                }
                if self.needs(*bias) {
                    out.push((*bias, kernels::reduce_to_channel(grad_out)));
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    out.push((*a, kernels::mul(grad_out, self.value(*b))?));
                }
                if self.needs(*b) {
                    out.push((*b, kernels::mul(grad_out, self.value(*a))?));
                }
            }
            Op::Relu { input } => {
                if self.needs(*input) {
                    let x = self.value(*input);
                    let mut g = grad_out.clone();
                    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
                        if xv <= E::zero() {
                            *gv = E::zero();
                        }
                    }
                    out.push((*input, g));
                }
            }
            Op::Sigmoid { input } => {
                if self.needs(*input) {
                    let y = &self.nodes[id].value;
                    let mut g = grad_out.clone();
                    for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
                        *gv = *gv * yv * (E::one() - yv);
                    }
                    out.push((*input, g));
                }
            }
            Op::Scale { input, factor } => {
                if self.needs(*input) {
                    out.push((*input, kernels::scale(grad_out, *factor)));
                }
            }
            Op::Sum { input } => {
                if self.needs(*input) {
                    let g = grad_out.item()?;
                    out.push((*input, Tensor::full(self.value(*input).shape(), g)));
                }
            }
            Op::Mean { input } => {
                if self.needs(*input) {
                    let n = self.value(*input).numel().max(1);
                    let g = grad_out.item()? * E::from_f64_lossy(1.0 / n as f64);
                    out.push((*input, Tensor::full(self.value(*input).shape(), g)));
                }
            }
            Op::Bce { pred, target } => {
                if self.needs(*pred) {
                    let g = kernels::bce_loss_backward(
                        self.value(*pred),
                        self.value(*target),
                        grad_out.item()?,
                    );
                    out.push((*pred, g));
                }
            }
        }
        Ok(out)
    }

    fn accumulate(&mut self, v: Var, g: Tensor<E>) {
        debug_assert_eq!(self.nodes[v.0].value.shape(), g.shape());
        match &mut self.nodes[v.0].grad {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}
