use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, BatchNormSaved, Conv2dGeometry, PoolGeometry};
use super::{ParamStore, Real, Tensor};
use crate::error::{invalid, shape_err};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Per-layer batch-norm configuration and running statistics. `gamma` and
/// `beta` index into the owning [`ParamStore`].
#[derive(Clone, Debug)]
pub struct BatchNormState<T> {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
    pub mode: Mode,
}

impl<T: Real> BatchNormState<T> {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(gamma: usize, beta: usize, channels: usize) -> Self {
        Self {
            gamma,
            beta,
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::lit(Self::DEFAULT_EPS),
            momentum: T::lit(Self::DEFAULT_MOMENTUM),
            mode: Mode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

enum Op<T> {
    Input,
    Param(usize),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geo: Conv2dGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: BatchNormSaved<T>,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
        geo: PoolGeometry,
    },
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Add(Var, Var),
    WeightedSum {
        input: Var,
        weights: Tensor<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Record of executed operations for reverse-mode differentiation.
///
/// Operations are appended in execution order; [`Tape::backward`] walks them
/// in exact reverse order and can run only once.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if cfg!(debug_assertions)
            && !inputs.is_empty()
            && !value.is_finite()
            && inputs.iter().all(|v| self.nodes[v.0].value.is_finite())
        {
            return Err(Error::NonFinite(format!(
                "op #{} produced NaN/Inf from finite inputs",
                self.nodes.len()
            )));
        }
        let needs_grad = match op {
            Op::Input => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// Records a constant (no gradient flows into it).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, &[]).expect("inputs cannot fail")
    }

    /// Records the current value of `params[index]`; backward writes its
    /// gradient into that parameter.
    pub fn param(&mut self, params: &ParamStore<T>, index: usize) -> Var {
        self.push(params.get(index).value.clone(), Op::Param(index), &[])
            .expect("parameters cannot fail")
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    ) -> Result<Var> {
        let (out, geo) = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
            groups,
        )?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geo,
            },
            &deps,
        )
    }

    /// Batch normalization over `[N, C, ...]`. In train mode the running
    /// statistics of `state` are updated with its momentum (running variance
    /// uses the unbiased batch estimate).
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, state: &mut BatchNormState<T>) -> Result<Var> {
        let x = self.value(input);
        if x.rank() < 2 || x.shape()[1] != state.channels() {
            return Err(invalid!(
                "batch norm has {} channels, input shape is {:?}",
                state.channels(),
                x.shape()
            ));
        }
        let stats = match state.mode {
            Mode::Train => None,
            Mode::Eval => Some((state.running_mean.as_slice(), state.running_var.as_slice())),
        };
        let (out, saved, mean, var) = kernels::batch_norm_forward(
            x,
            self.value(gamma).data(),
            self.value(beta).data(),
            stats,
            state.eps,
        )?;
        if state.mode == Mode::Train {
            let count = x.numel() / state.channels();
            let unbias = T::lit(count as f64 / (count as f64 - 1.0));
            let m = state.momentum;
            for c in 0..state.channels() {
                state.running_mean[c] = (T::one() - m) * state.running_mean[c] + m * mean[c];
                state.running_var[c] = (T::one() - m) * state.running_var[c] + m * var[c] * unbias;
            }
        }
        self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
            },
            &[input, gamma, beta],
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(input), &[input])
    }

    pub fn max_pool2d(
        &mut self,
        input: Var,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let (out, argmax) = kernels::max_pool2d_forward(self.value(input), kernel, stride, padding)?;
        self.push(out, Op::MaxPool { input, argmax }, &[input])
    }

    pub fn avg_pool2d(
        &mut self,
        input: Var,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let geo = PoolGeometry::new(self.value(input).shape(), kernel, stride, padding)?;
        let out = kernels::avg_pool2d_forward(self.value(input), &geo)?;
        self.push(out, Op::AvgPool { input, geo }, &[input])
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = kernels::global_avg_pool_forward(self.value(input))?;
        self.push(out, Op::GlobalAvgPool(input), &[input])
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = kernels::linear_forward(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        self.push(out, Op::Linear { input, weight, bias }, &deps)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err!("add of {:?} and {:?}", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape(), data)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Scalar `sum(input * weights)` for a constant `weights` of the same shape.
    pub fn weighted_sum(&mut self, input: Var, weights: Tensor<T>) -> Result<Var> {
        let x = self.value(input);
        if x.shape() != weights.shape() {
            return Err(shape_err!("weighted sum of {:?} with {:?}", x.shape(), weights.shape()));
        }
        let s: T = x.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        self.push(Tensor::scalar(s), Op::WeightedSum { input, weights }, &[input])
    }

    /// Mean cross-entropy of integer `labels` against `[N, K]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = kernels::softmax_cross_entropy_forward(self.value(logits), labels)?;
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    /// Back-propagates from the scalar `loss`. Every parameter in `params`
    /// ends up holding dLoss/dParam, zero for parameters not on the tape.
    pub fn backward(&mut self, loss: Var, params: &mut ParamStore<T>) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got {:?}", self.value(loss).shape()));
        }
        self.consumed = true;
        params.zero_grads();
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let node = &self.nodes[i];
            let mut emit = |var: Var, t: Tensor<T>| accumulate(&mut grads, var, t);
            match &node.op {
                Op::Input => {}
                Op::Param(index) => {
                    let slot = &mut params.get_mut(*index).grad;
                    if slot.shape() != g.shape() {
                        return Err(shape_err!("parameter {index} changed shape during the pass"));
                    }
                    slot.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geo,
                } => {
                    let want = (
                        self.needs(*input),
                        self.needs(*weight),
                        bias.is_some_and(|b| self.needs(b)),
                    );
                    let r = kernels::conv2d_backward(self.value(*input), self.value(*weight), geo, &g, want)?;
                    if let Some(t) = r.input {
                        emit(*input, t);
                    }
                    if let Some(t) = r.weight {
                        emit(*weight, t);
                    }
                    if let (Some(b), Some(t)) = (bias, r.bias) {
                        emit(*b, t);
                    }
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    saved,
                } => {
                    let shape = self.value(*input).shape();
                    let (dx, dgamma, dbeta) =
                        kernels::batch_norm_backward(shape, self.value(*gamma).data(), saved, &g)?;
                    let c = dgamma.len();
                    if self.needs(*input) {
                        emit(*input, dx);
                    }
                    emit(*gamma, Tensor::new([c], dgamma)?);
                    emit(*beta, Tensor::new([c], dbeta)?);
                }
                Op::Relu(input) => {
                    let x = self.value(*input).data();
                    let data = g
                        .data()
                        .iter()
                        .zip(x)
                        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                        .collect();
                    emit(*input, Tensor::new(g.shape(), data)?);
                }
                Op::MaxPool { input, argmax } => {
                    let dx = kernels::max_pool2d_backward(self.value(*input).shape(), argmax, &g)?;
                    emit(*input, dx);
                }
                Op::AvgPool { input, geo } => emit(*input, kernels::avg_pool2d_backward(geo, &g)?),
                Op::GlobalAvgPool(input) => {
                    emit(*input, kernels::global_avg_pool_backward(self.value(*input).shape(), &g)?)
                }
                Op::Linear { input, weight, bias } => {
                    let want = (
                        self.needs(*input),
                        self.needs(*weight),
                        bias.is_some_and(|b| self.needs(b)),
                    );
                    let (dx, dw, db) = kernels::linear_backward(self.value(*input), self.value(*weight), &g, want);
                    if let Some(t) = dx {
                        emit(*input, t);
                    }
                    if let Some(t) = dw {
                        emit(*weight, t);
                    }
                    if let (Some(b), Some(t)) = (bias, db) {
                        emit(*b, t);
                    }
                }
                Op::Add(a, b) => {
                    emit(*b, g.clone());
                    emit(*a, g);
                }
                Op::WeightedSum { input, weights } => {
                    let up = g.data()[0];
                    emit(*input, weights.map(|w| w * up));
                }
                Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                    let classes = self.value(*logits).shape()[1];
                    emit(
                        *logits,
                        kernels::softmax_cross_entropy_backward(probs, labels, classes, g.data()[0]),
                    );
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], var: Var, t: Tensor<T>) {
    match &mut grads[var.0] {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(t.data())
            .for_each(|(a, &b)| *a += b),
        slot => *slot = Some(t),
    }
}
