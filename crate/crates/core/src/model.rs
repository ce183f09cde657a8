//! Executable models lowered from architecture graphs.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::engine::{BatchNormState, Mode, ParamKind, ParamStore, Parameter, Real, Tape, Tensor, Var};
use crate::graph::{ArchGraph, BlockRef, LayerKind, NodeId, Tag};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InitPolicy {
    pub seed: u64,
    /// Zero the scale of the last BN on every residual branch.
    pub zero_gamma: bool,
    /// Whether BN gamma/beta take part in weight decay.
    pub bn_weight_decay: bool,
}

impl Default for InitPolicy {
    fn default() -> Self {
        Self {
            seed: 0,
            zero_gamma: false,
            bn_weight_decay: true,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Binding {
    None,
    Conv { weight: usize, bias: Option<usize> },
    Bn(usize),
    Linear { weight: usize, bias: usize },
}

/// A graph with allocated parameters and batch-norm state.
#[derive(Clone, Debug)]
pub struct Model<T> {
    graph: ArchGraph,
    params: ParamStore<T>,
    bn: Vec<BatchNormState<T>>,
    bindings: Vec<Binding>,
    mode: Mode,
}

fn pair(v: &[usize]) -> Result<(usize, usize)> {
    match v {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::Unsupported(format!("only 2-d layers execute, got {}-d", v.len()))),
    }
}

/// Last BN inside each block's residual branch.
fn zero_gamma_targets(graph: &ArchGraph) -> Vec<NodeId> {
    let mut last: BTreeMap<Option<BlockRef>, NodeId> = BTreeMap::new();
    for n in &graph.nodes {
        if matches!(n.kind, LayerKind::BatchNorm { .. }) && n.has(Tag::ResidualBranch) {
            last.insert(n.block, n.id);
        }
    }
    last.into_values().collect()
}

impl<T: Real> Model<T> {
    /// Allocates and initializes parameters: He (fan-out) normal for convs,
    /// unit/zero for BN, uniform ±1/√fan-in for linear layers.
    pub fn lower(graph: &ArchGraph, init: InitPolicy) -> Result<Self> {
        if !graph.executable {
            return Err(Error::Unsupported("graph is marked symbolic-only and cannot be executed".into()));
        }
        graph.validate()?;
        if graph.input.0.len() != 3 {
            return Err(Error::Unsupported(format!("only [C, H, W] inputs execute, got {}", graph.input)));
        }
        let zero = zero_gamma_targets(graph);
        let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
        let mut params = ParamStore::new();
        let mut bn = Vec::new();
        let mut bindings = Vec::with_capacity(graph.nodes.len());
        for node in &graph.nodes {
            let id = |suffix: &str| format!("{}.{suffix}", node.name);
            let binding = match &node.kind {
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    groups,
                    bias,
                } => {
                    let (k1, k2) = pair(kernel)?;
                    pair(stride)?;
                    pair(padding)?;
                    let shape = [*out_channels, in_channels / groups, k1, k2];
                    let std = Float::sqrt(2.0 / (*out_channels * k1 * k2) as f64);
                    let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(format!("{e}")))?;
                    let w = Tensor::from_fn(shape, |_| T::lit(dist.sample(&mut rng)));
                    let weight = params.push(Parameter::new(id("weight"), ParamKind::ConvWeight, w))?;
                    let bias = if *bias {
                        Some(params.push(Parameter::new(id("bias"), ParamKind::ConvBias, Tensor::zeros([*out_channels])))?)
                    } else {
                        None
                    };
                    Binding::Conv { weight, bias }
                }
                LayerKind::BatchNorm { channels } => {
                    let g = if init.zero_gamma && zero.contains(&node.id) {
                        T::zero()
                    } else {
                        T::one()
                    };
                    let mut gamma = Parameter::new(id("gamma"), ParamKind::BnGamma, Tensor::full([*channels], g));
                    let mut beta = Parameter::new(id("beta"), ParamKind::BnBeta, Tensor::zeros([*channels]));
                    gamma.decayable = init.bn_weight_decay;
                    beta.decayable = init.bn_weight_decay;
                    let gi = params.push(gamma)?;
                    let bi = params.push(beta)?;
                    bn.push(BatchNormState::new(gi, bi, *channels));
                    Binding::Bn(bn.len() - 1)
                }
                LayerKind::Linear {
                    in_features,
                    out_features,
                } => {
                    let bound = 1.0 / Float::sqrt(*in_features as f64);
                    let mut draw = |_| T::lit(rng.random_range(-bound..bound));
                    let w = Tensor::from_fn([*out_features, *in_features], &mut draw);
                    let b = Tensor::from_fn([*out_features], &mut draw);
                    let weight = params.push(Parameter::new(id("weight"), ParamKind::LinearWeight, w))?;
                    let bias = params.push(Parameter::new(id("bias"), ParamKind::LinearBias, b))?;
                    Binding::Linear { weight, bias }
                }
                LayerKind::MaxPool { kernel, .. } | LayerKind::AvgPool { kernel, .. } => {
                    pair(kernel)?;
                    Binding::None
                }
                _ => Binding::None,
            };
            bindings.push(binding);
        }
        Ok(Self {
            graph: graph.clone(),
            params,
            bn,
            bindings,
            mode: Mode::Train,
        })
    }

    pub fn graph(&self) -> &ArchGraph {
        &self.graph
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn batch_norms(&self) -> &[BatchNormState<T>] {
        &self.bn
    }

    pub fn batch_norms_mut(&mut self) -> &mut [BatchNormState<T>] {
        &mut self.bn
    }

    pub fn num_param_elements(&self) -> usize {
        self.params.num_elements()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        for s in &mut self.bn {
            s.mode = mode;
        }
    }

    pub fn classes(&self) -> usize {
        self.graph.infer_shapes().ok().and_then(|s| s.last().map(|s| s.0[0])).unwrap_or(0)
    }

    /// Records the forward pass of a `[N, C, H, W]` batch and returns the
    /// output variable.
    pub fn forward(&mut self, tape: &mut Tape<T>, input: Tensor<T>) -> Result<Var> {
        let vars = self.forward_nodes(tape, input)?;
        vars.last().copied().ok_or_else(|| Error::InvalidGraph("graph has no output".into()))
    }

    /// Value of every graph node for one batch, indexed by node id.
    pub fn trace(&mut self, input: Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let vars = self.forward_nodes(&mut tape, input)?;
        Ok(vars.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    fn forward_nodes(&mut self, tape: &mut Tape<T>, input: Tensor<T>) -> Result<Vec<Var>> {
        if input.rank() != 4 || input.shape()[1..] != self.graph.input.0[..] {
            return Err(Error::ShapeMismatch(format!(
                "model expects [N, {}] input, got {:?}",
                self.graph.input,
                input.shape()
            )));
        }
        let mut vars: Vec<Option<Var>> = vec![None; self.graph.nodes.len()];
        let mut input = Some(input);
        for (node, binding) in self.graph.nodes.iter().zip(&self.bindings) {
            let arg = |k: usize| vars[node.inputs[k].0].expect("inputs precede their consumers");
            let v = match (&node.kind, *binding) {
                (LayerKind::Input, _) => tape.input(input.take().expect("single input node")),
                (
                    LayerKind::Conv {
                        stride, padding, groups, ..
                    },
                    Binding::Conv { weight, bias },
                ) => {
                    let w = tape.param(&self.params, weight);
                    let b = bias.map(|b| tape.param(&self.params, b));
                    tape.conv2d(arg(0), w, b, pair(stride)?, pair(padding)?, *groups)?
                }
                (LayerKind::BatchNorm { .. }, Binding::Bn(i)) => {
                    let state = &mut self.bn[i];
                    let g = tape.param(&self.params, state.gamma);
                    let b = tape.param(&self.params, state.beta);
                    tape.batch_norm(arg(0), g, b, state)?
                }
                (LayerKind::Relu, _) => tape.relu(arg(0))?,
                (LayerKind::MaxPool { kernel, stride, padding }, _) => {
                    tape.max_pool2d(arg(0), pair(kernel)?, pair(stride)?, pair(padding)?)?
                }
                (LayerKind::AvgPool { kernel, stride, padding }, _) => {
                    tape.avg_pool2d(arg(0), pair(kernel)?, pair(stride)?, pair(padding)?)?
                }
                (LayerKind::GlobalAvgPool, _) => tape.global_avg_pool(arg(0))?,
                (LayerKind::Linear { .. }, Binding::Linear { weight, bias }) => {
                    let w = tape.param(&self.params, weight);
                    let b = tape.param(&self.params, bias);
                    tape.linear(arg(0), w, Some(b))?
                }
                (LayerKind::Add, _) => tape.add(arg(0), arg(1))?,
                (LayerKind::Output, _) => arg(0),
                (kind, _) => return Err(Error::InvalidGraph(format!("node {:?} ({}) is not bound", node.name, kind.name()))),
            };
            vars[node.id.0] = Some(v);
        }
        Ok(vars.into_iter().map(|v| v.expect("every node is visited")).collect())
    }

    /// Output tensor of a batch on a fresh tape.
    pub fn predict(&mut self, input: Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, input)?;
        Ok(tape.value(out).clone())
    }

    /// Runs forward, cross-entropy and backward. Parameter gradients are left
    /// in the store; returns the loss and the logits.
    pub fn loss_and_grad(&mut self, input: Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, input)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        tape.backward(loss, &mut self.params)?;
        let value = tape.value(loss).item().expect("scalar loss");
        Ok((value, tape.value(logits).clone()))
    }

    /// Parameters followed by BN running statistics, keyed by stable ids.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self.params.iter().map(|p| (p.id.clone(), p.value.clone())).collect();
        for s in &self.bn {
            let base = self.params.get(s.gamma).id.trim_end_matches(".gamma");
            let c = s.channels();
            out.push((format!("{base}.running_mean"), Tensor::from_fn([c], |i| s.running_mean[i])));
            out.push((format!("{base}.running_var"), Tensor::from_fn([c], |i| s.running_var[i])));
        }
        out
    }

    /// Inverse of [`Model::named_tensors`]; every id must be present once
    /// with a matching shape.
    pub fn load_named(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        let expected = self.named_tensors();
        if tensors.len() != expected.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        let lookup: BTreeMap<&str, &Tensor<T>> = tensors.iter().map(|(k, v)| (k.as_str(), v)).collect();
        for (id, t) in &expected {
            let found = lookup
                .get(id.as_str())
                .ok_or_else(|| Error::InvalidArgument(format!("missing tensor {id:?}")))?;
            if found.shape() != t.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {id:?} has shape {:?}, expected {:?}",
                    found.shape(),
                    t.shape()
                )));
            }
        }
        for p in self.params.iter_mut() {
            p.value = (*lookup[p.id.as_str()]).clone();
        }
        for i in 0..self.bn.len() {
            let base = String::from(self.params.get(self.bn[i].gamma).id.trim_end_matches(".gamma"));
            let s = &mut self.bn[i];
            s.running_mean = lookup[format!("{base}.running_mean").as_str()].data().to_vec();
            s.running_var = lookup[format!("{base}.running_var").as_str()].data().to_vec();
        }
        Ok(())
    }
}
