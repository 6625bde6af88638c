//! Reverse-mode differentiation over a recorded op list.
//!
//! Every call on [`Tape`] evaluates the op immediately and appends a node;
//! [`Tape::backward`] walks the nodes in reverse and applies each op's
//! vector-Jacobian product. Nodes are in topological order by construction.

use super::ops::{self, Geometry, Mode, Padding};
use super::{Real, RngState, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: Geometry,
    },
    Depthwise {
        input: Var,
        kernel: Var,
        geom: Geometry,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu(Var),
    Softmax(Var),
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    GlobalAvgPool(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Var,
        variance: Var,
        eps: f64,
    },
    Add(Var, Var),
    Reshape(Var),
    Sum(Var),
    WeightedSum {
        input: Var,
        weights: Tensor<T>,
    },
    Scce {
        probs: Var,
        labels: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to the leaves that required them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Smallest probability fed to the log in the cross-entropy loss.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
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

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input or parameter. Only leaves created with
    /// `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, padding: Padding, stride: usize) -> Result<Var> {
        let x = self.value(input);
        let [_, h, w, _] = x.dims4("conv2d")?;
        let k = self.value(kernel);
        let (kh, kw) = match k.shape()[..] {
            [kh, kw, _, _] => (kh, kw),
            _ => return Err(Error::shape("conv2d", "kernel rank", 4, k.rank())),
        };
        let geom = Geometry::new("conv2d", h, w, kh, kw, stride, padding)?;
        let out = ops::conv2d_forward(x, k, bias.map(|b| self.value(b)), &geom)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(out, Op::Conv2d { input, kernel, bias, geom }, &inputs))
    }

    pub fn depthwise_conv2d(&mut self, input: Var, kernel: Var, padding: Padding, stride: usize) -> Result<Var> {
        let x = self.value(input);
        let [_, h, w, _] = x.dims4("depthwise_conv2d")?;
        let k = self.value(kernel);
        let (kh, kw) = match k.shape()[..] {
            [kh, kw, _, _] => (kh, kw),
            _ => return Err(Error::shape("depthwise_conv2d", "kernel rank", 4, k.rank())),
        };
        let geom = Geometry::new("depthwise_conv2d", h, w, kh, kw, stride, padding)?;
        let out = ops::depthwise_conv2d_forward(x, k, &geom)?;
        Ok(self.push(out, Op::Depthwise { input, kernel, geom }, &[input, kernel]))
    }

    /// Depthwise filtering followed by a 1x1 pointwise convolution with bias.
    pub fn separable_conv2d(
        &mut self,
        input: Var,
        depthwise: Var,
        pointwise: Var,
        bias: Option<Var>,
        padding: Padding,
        stride: usize,
    ) -> Result<Var> {
        let d = self.depthwise_conv2d(input, depthwise, padding, stride)?;
        self.conv2d(d, pointwise, bias, Padding::Valid, 1)
    }

    pub fn maxpool(&mut self, input: Var, window: usize, stride: usize, padding: Padding) -> Result<Var> {
        let x = self.value(input);
        let [_, h, w, _] = x.dims4("maxpool2d")?;
        let geom = Geometry::new("maxpool2d", h, w, window, window, stride, padding)?;
        let (out, argmax) = ops::maxpool_forward(x, &geom)?;
        Ok(self.push(out, Op::MaxPool { input, argmax }, &[input]))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = ops::dense_forward(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(out, Op::Dense { input, weight, bias }, &inputs))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        self.push(out, Op::Relu(input), &[input])
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let out = ops::softmax(self.value(input))?;
        Ok(self.push(out, Op::Softmax(input), &[input]))
    }

    pub fn dropout(&mut self, input: Var, rate: f64, mode: Mode, rng: &mut RngState) -> Result<Var> {
        let x = self.value(input);
        match ops::dropout_mask::<T>(x.numel(), rate, mode, rng)? {
            None => Ok(input),
            Some(mask) => {
                let data = x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
                let out = Tensor::new(x.shape().to_vec(), data)?;
                Ok(self.push(out, Op::Dropout { input, mask }, &[input]))
            }
        }
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = ops::global_average_pool(self.value(input))?;
        Ok(self.push(out, Op::GlobalAvgPool(input), &[input]))
    }

    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, mean: Var, variance: Var, eps: f64) -> Result<Var> {
        let out = ops::batch_norm_forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            self.value(mean),
            self.value(variance),
            eps,
        )?;
        let op = Op::BatchNorm {
            input,
            gamma,
            beta,
            mean,
            variance,
            eps,
        };
        Ok(self.push(out, op, &[input, gamma, beta]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// `N x ... -> N x (product of the rest)`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let n = x.shape()[0];
        let out = x.clone().reshape(&[n, x.numel() / n])?;
        Ok(self.push(out, Op::Reshape(input), &[input]))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        self.push(out, Op::Sum(input), &[input])
    }

    /// `sum(input * weights)` for a fixed same-shape weight tensor.
    pub fn weighted_sum(&mut self, input: Var, weights: Tensor<T>) -> Result<Var> {
        let x = self.value(input);
        if x.shape() != weights.shape() {
            return Err(Error::shape(
                "weighted_sum",
                "weights shape",
                format!("{:?}", x.shape()),
                format!("{:?}", weights.shape()),
            ));
        }
        let total = x.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum { input, weights }, &[input]))
    }

    /// Mean sparse categorical cross-entropy of an `N x C` probability matrix.
    pub fn scce(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let loss = scce_loss(self.value(probs), labels)?;
        let op = Op::Scce {
            probs,
            labels: labels.to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss), op, &[probs]))
    }

    /// Gradients of the scalar `loss` with respect to every leaf recorded
    /// with `requires_grad`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward called before any forward pass was recorded".into()));
        }
        let Some(root) = self.nodes.get(loss.0) else {
            return Err(Error::Usage(format!("variable {} is not on this tape", loss.0)));
        };
        if root.value.numel() != 1 {
            return Err(Error::shape("backward", "loss elements", 1, root.value.numel()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut send = |var: Var, grad: Tensor<T>| {
                if !self.nodes[var.0].needs_grad {
                    return;
                }
                match &mut grads[var.0] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(grad.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(grad),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { input, kernel, bias, geom } => {
                    let (dx, dk, db) = ops::conv2d_backward(self.value(*input), self.value(*kernel), geom, &g);
                    send(*input, dx);
                    send(*kernel, dk);
                    if let Some(b) = bias {
                        send(*b, db);
                    }
                }
                Op::Depthwise { input, kernel, geom } => {
                    let (dx, dk) = ops::depthwise_conv2d_backward(self.value(*input), self.value(*kernel), geom, &g);
                    send(*input, dx);
                    send(*kernel, dk);
                }
                Op::MaxPool { input, argmax } => {
                    send(*input, ops::maxpool_backward(self.value(*input).shape(), argmax, &g));
                }
                Op::Dense { input, weight, bias } => {
                    let (dx, dw, db) = ops::dense_backward(self.value(*input), self.value(*weight), &g);
                    send(*input, dx);
                    send(*weight, dw);
                    if let Some(b) = bias {
                        send(*b, db);
                    }
                }
                Op::Relu(input) => {
                    let x = self.value(*input);
                    let data = x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    send(*input, Tensor::new(x.shape().to_vec(), data)?);
                }
                Op::Softmax(input) => {
                    send(*input, ops::softmax_backward(&node.value, &g));
                }
                Op::Dropout { input, mask } => {
                    let data = g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                    send(*input, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::GlobalAvgPool(input) => {
                    send(*input, ops::global_average_pool_backward(self.value(*input).shape(), &g));
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    mean,
                    variance,
                    eps,
                } => {
                    let (dx, dg, db) = ops::batch_norm_backward(
                        self.value(*input),
                        self.value(*gamma),
                        self.value(*mean),
                        self.value(*variance),
                        *eps,
                        &g,
                    );
                    send(*input, dx);
                    send(*gamma, dg);
                    send(*beta, db);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Reshape(input) => {
                    send(*input, g.reshape(self.value(*input).shape())?);
                }
                Op::Sum(input) => {
                    let gv = g.data()[0];
                    send(*input, Tensor::full(self.value(*input).shape(), gv));
                }
                Op::WeightedSum { input, weights } => {
                    let gv = g.data()[0];
                    send(*input, weights.map(|w| w * gv));
                }
                Op::Scce { probs, labels } => {
                    let p = self.value(*probs);
                    let c = p.shape()[1];
                    let n = labels.len();
                    let gv = g.data()[0];
                    let clamp = T::lit(PROB_CLAMP);
                    let mut d = vec![T::zero(); p.numel()];
                    for (row, &y) in labels.iter().enumerate() {
                        let pv = p.data()[row * c + y];
                        if pv > clamp {
                            d[row * c + y] = -gv / (T::lit(n as f64) * pv);
                        }
                    }
                    send(*probs, Tensor::new(p.shape().to_vec(), d)?);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// `mean(-ln(max(p[label], 1e-7)))` over the rows of an `N x C` matrix.
pub fn scce_loss<T: Real>(probs: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let [n, c] = probs.dims2("scce")?;
    if labels.len() != n {
        return Err(Error::shape("scce", "label count", n, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Validation(format!("label {bad} out of range for {c} classes")));
    }
    let clamp = T::lit(PROB_CLAMP);
    let total: T = labels
        .iter()
        .enumerate()
        .map(|(row, &y)| -probs.data()[row * c + y].max(clamp).ln())
        .sum();
    Ok(total / T::lit(n as f64))
}
