//! Symbolic architecture graphs.
//!
//! An [`ArchGraph`] stores its nodes in topological order: every node's
//! inputs refer to earlier nodes, the first node is the single input and the
//! last node is the single output. Shapes exclude the batch axis.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::kernels::output_dim;
use crate::networks::{Family, VariantId};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Per-sample tensor shape: `[C, H, W]`, `[C, T, H, W]` or `[features]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Shape(pub Vec<usize>);

impl Shape {
    pub fn channels(&self) -> usize {
        self.0[0]
    }

    pub fn spatial(&self) -> &[usize] {
        &self.0[1..]
    }

    pub fn numel(&self) -> u64 {
        self.0.iter().map(|&d| d as u64).product()
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("x")?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

impl FromStr for Shape {
    type Err = Error;

    /// Parses `CxHxW` (or any `x`-separated list of positive integers).
    fn from_str(s: &str) -> Result<Self> {
        let dims = s
            .split(['x', 'X', '×'])
            .map(|p| p.trim().parse::<usize>().ok().filter(|&d| d > 0))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::InvalidArgument(format!("cannot parse shape {s:?}")))?;
        if dims.is_empty() {
            return Err(Error::InvalidArgument(format!("empty shape {s:?}")));
        }
        Ok(Self(dims))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Input,
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: Vec<usize>,
        stride: Vec<usize>,
        padding: Vec<usize>,
        groups: usize,
        bias: bool,
    },
    #[serde(rename = "bn")]
    BatchNorm { channels: usize },
    Relu,
    #[serde(rename = "maxpool")]
    MaxPool {
        kernel: Vec<usize>,
        stride: Vec<usize>,
        padding: Vec<usize>,
    },
    #[serde(rename = "avgpool")]
    AvgPool {
        kernel: Vec<usize>,
        stride: Vec<usize>,
        padding: Vec<usize>,
    },
    #[serde(rename = "globalavgpool")]
    GlobalAvgPool,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Add,
    Output,
}

/// Node kind without hyperparameters, used for census maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum KindName {
    Input,
    Conv,
    BatchNorm,
    Relu,
    MaxPool,
    AvgPool,
    GlobalAvgPool,
    Linear,
    Add,
    Output,
}

impl KindName {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Input => "input",
            Self::Conv => "conv",
            Self::BatchNorm => "bn",
            Self::Relu => "relu",
            Self::MaxPool => "maxpool",
            Self::AvgPool => "avgpool",
            Self::GlobalAvgPool => "globalavgpool",
            Self::Linear => "linear",
            Self::Add => "add",
            Self::Output => "output",
        }
    }
}

impl fmt::Display for KindName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl LayerKind {
    pub fn name(&self) -> KindName {
        match self {
            Self::Input => KindName::Input,
            Self::Conv { .. } => KindName::Conv,
            Self::BatchNorm { .. } => KindName::BatchNorm,
            Self::Relu => KindName::Relu,
            Self::MaxPool { .. } => KindName::MaxPool,
            Self::AvgPool { .. } => KindName::AvgPool,
            Self::GlobalAvgPool => KindName::GlobalAvgPool,
            Self::Linear { .. } => KindName::Linear,
            Self::Add => KindName::Add,
            Self::Output => KindName::Output,
        }
    }

    fn arity(&self) -> usize {
        match self {
            Self::Input => 0,
            Self::Add => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Tag {
    MainPath,
    ResidualBranch,
    Projection,
    Stage(u8),
    StartBlock,
    MiddleBlock,
    EndBlock,
    Stem,
    Head,
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::MainPath => f.write_str("main-path"),
            Self::ResidualBranch => f.write_str("residual-branch"),
            Self::Projection => f.write_str("projection"),
            Self::Stage(k) => write!(f, "stage-{k}"),
            Self::StartBlock => f.write_str("start-block"),
            Self::MiddleBlock => f.write_str("middle-block"),
            Self::EndBlock => f.write_str("end-block"),
            Self::Stem => f.write_str("stem"),
            Self::Head => f.write_str("head"),
        }
    }
}

impl FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "main-path" => Self::MainPath,
            "residual-branch" => Self::ResidualBranch,
            "projection" => Self::Projection,
            "start-block" => Self::StartBlock,
            "middle-block" => Self::MiddleBlock,
            "end-block" => Self::EndBlock,
            "stem" => Self::Stem,
            "head" => Self::Head,
            other => match other.strip_prefix("stage-").and_then(|k| k.parse().ok()) {
                Some(k) => Self::Stage(k),
                None => return Err(Error::InvalidArgument(format!("unknown tag {other:?}"))),
            },
        })
    }
}

impl From<Tag> for String {
    fn from(tag: Tag) -> Self {
        tag.to_string()
    }
}

impl TryFrom<String> for Tag {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Position of a residual block inside a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockRef {
    pub stage: u8,
    pub index: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNode {
    pub id: NodeId,
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
    pub tags: BTreeSet<Tag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<BlockRef>,
}

impl LayerNode {
    pub fn has(&self, tag: Tag) -> bool {
        self.tags.contains(&tag)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchMeta {
    pub family: Family,
    pub variant: VariantId,
    pub depth: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchGraph {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<ArchMeta>,
    pub input: Shape,
    /// Whether the graph may be lowered onto the engine.
    pub executable: bool,
    pub nodes: Vec<LayerNode>,
}

impl ArchGraph {
    pub fn node(&self, id: NodeId) -> &LayerNode {
        &self.nodes[id.0]
    }

    pub fn output(&self) -> &LayerNode {
        self.nodes.last().expect("validated graphs are non-empty")
    }

    pub fn find(&self, name: &str) -> Option<&LayerNode> {
        self.nodes.iter().find(|n| n.name == name)
    }

    /// Consumers of every node.
    pub fn successors(&self) -> Vec<Vec<NodeId>> {
        let mut succ = vec![Vec::new(); self.nodes.len()];
        for n in &self.nodes {
            for &i in &n.inputs {
                succ[i.0].push(n.id);
            }
        }
        succ
    }

    /// Checks structure (ids, ordering, arity, single input/output, no dead
    /// ends) and that shapes propagate from the declared input.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidGraph(msg));
        if self.nodes.len() < 2 {
            return bad("a graph needs at least an input and an output".into());
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id.0 != i {
                return bad(format!("node {:?} has id {} at position {i}", n.name, n.id));
            }
            if n.inputs.len() != n.kind.arity() {
                return bad(format!(
                    "node {:?} ({}) has {} inputs, expected {}",
                    n.name,
                    n.kind.name(),
                    n.inputs.len(),
                    n.kind.arity()
                ));
            }
            if let Some(src) = n.inputs.iter().find(|s| s.0 >= i) {
                return bad(format!("node {:?} reads {src}, which does not precede it", n.name));
            }
            let is_first = i == 0;
            let is_last = i == self.nodes.len() - 1;
            match n.kind {
                LayerKind::Input if !is_first => return bad(format!("extra input node {:?}", n.name)),
                LayerKind::Output if !is_last => return bad(format!("extra output node {:?}", n.name)),
                _ if is_first && n.kind != LayerKind::Input => return bad("first node must be the input".into()),
                _ if is_last && n.kind != LayerKind::Output => return bad("last node must be the output".into()),
                _ => {}
            }
        }
        let mut names = BTreeSet::new();
        for n in &self.nodes {
            if !names.insert(n.name.as_str()) {
                return bad(format!("duplicate node name {:?}", n.name));
            }
        }
        let succ = self.successors();
        if let Some(n) = self
            .nodes
            .iter()
            .take(self.nodes.len() - 1)
            .find(|n| succ[n.id.0].is_empty())
        {
            return bad(format!("node {:?} feeds nothing", n.name));
        }
        self.infer_shapes().map(|_| ())
    }

    pub fn infer_shapes(&self) -> Result<Vec<Shape>> {
        self.infer_shapes_at(&self.input)
    }

    /// Output shape of every node for a given input shape.
    pub fn infer_shapes_at(&self, input: &Shape) -> Result<Vec<Shape>> {
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let src = n.inputs.first().map(|i| &shapes[i.0]);
            let shape = propagate(n, src, n.inputs.get(1).map(|i| &shapes[i.0]), input)
                .map_err(|e| Error::InvalidGraph(format!("at node {:?}: {e}", n.name)))?;
            shapes.push(shape);
        }
        Ok(shapes)
    }
}

fn windowed(src: &Shape, kernel: &[usize], stride: &[usize], padding: &[usize], channels: usize) -> Result<Shape> {
    let spatial = src.spatial();
    if spatial.len() != kernel.len() || stride.len() != kernel.len() || padding.len() != kernel.len() {
        return Err(Error::ShapeMismatch(format!(
            "{}-d window on a {}-d input",
            kernel.len(),
            spatial.len()
        )));
    }
    let mut dims = vec![channels];
    for (axis, &len) in spatial.iter().enumerate() {
        let out = output_dim(len, kernel[axis], stride[axis], padding[axis]).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "axis {axis}: window {}/{} pad {} does not fit length {len}",
                kernel[axis], stride[axis], padding[axis]
            ))
        })?;
        dims.push(out);
    }
    Ok(Shape(dims))
}

fn propagate(node: &LayerNode, src: Option<&Shape>, other: Option<&Shape>, input: &Shape) -> Result<Shape> {
    let src = match (&node.kind, src) {
        (LayerKind::Input, _) => return Ok(input.clone()),
        (_, Some(s)) => s,
        (_, None) => return Err(Error::InvalidGraph("missing input".into())),
    };
    match &node.kind {
        LayerKind::Input => unreachable!(),
        LayerKind::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
            ..
        } => {
            if src.0.len() < 2 || src.channels() != *in_channels {
                return Err(Error::ShapeMismatch(format!(
                    "conv expects {in_channels} input channels, got shape {src}"
                )));
            }
            if *groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
                return Err(Error::InvalidArgument(format!(
                    "conv channels {in_channels}->{out_channels} not divisible by groups {groups}"
                )));
            }
            windowed(src, kernel, stride, padding, *out_channels)
        }
        LayerKind::BatchNorm { channels } => {
            if src.channels() != *channels {
                return Err(Error::ShapeMismatch(format!("bn over {channels} channels, got shape {src}")));
            }
            Ok(src.clone())
        }
        LayerKind::Relu | LayerKind::Output => Ok(src.clone()),
        LayerKind::MaxPool { kernel, stride, padding } | LayerKind::AvgPool { kernel, stride, padding } => {
            windowed(src, kernel, stride, padding, src.channels())
        }
        LayerKind::GlobalAvgPool => {
            if src.0.len() < 2 {
                return Err(Error::ShapeMismatch(format!("global pooling of flat shape {src}")));
            }
            Ok(Shape(vec![src.channels()]))
        }
        LayerKind::Linear { in_features, out_features } => {
            if src.0.as_slice() != [*in_features] {
                return Err(Error::ShapeMismatch(format!(
                    "linear expects [{in_features}], got shape {src}"
                )));
            }
            Ok(Shape(vec![*out_features]))
        }
        LayerKind::Add => {
            let other = other.ok_or_else(|| Error::InvalidGraph("add needs two inputs".into()))?;
            if src != other {
                return Err(Error::ShapeMismatch(format!("add of {src} and {other}")));
            }
            Ok(src.clone())
        }
    }
}

/// Incrementally assembles an [`ArchGraph`].
///
/// Nodes created while a scope is active get the scope's name prefix, tags
/// and block reference.
#[derive(Debug)]
pub struct GraphBuilder {
    nodes: Vec<LayerNode>,
    input: Shape,
    prefix: String,
    scope_tags: BTreeSet<Tag>,
    block: Option<BlockRef>,
}

impl GraphBuilder {
    /// Starts a graph whose first node is the input.
    pub fn new(input: Shape) -> (Self, NodeId) {
        let mut b = Self {
            nodes: Vec::new(),
            input,
            prefix: String::new(),
            scope_tags: BTreeSet::new(),
            block: None,
        };
        let id = b.push("input", LayerKind::Input, &[], &[]);
        (b, id)
    }

    /// Sets the naming prefix, tags and block applied to subsequent nodes.
    pub fn scope(&mut self, prefix: &str, tags: &[Tag], block: Option<BlockRef>) {
        self.prefix = prefix.into();
        self.scope_tags = tags.iter().copied().collect();
        self.block = block;
    }

    pub fn clear_scope(&mut self) {
        self.scope(&String::new(), &[], None);
    }

    pub fn push(&mut self, name: &str, kind: LayerKind, inputs: &[NodeId], tags: &[Tag]) -> NodeId {
        let id = NodeId(self.nodes.len());
        let name = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let mut all = self.scope_tags.clone();
        all.extend(tags.iter().copied());
        self.nodes.push(LayerNode {
            id,
            name,
            kind,
            inputs: inputs.to_vec(),
            tags: all,
            block: self.block,
        });
        id
    }

    pub fn node(&self, id: NodeId) -> &LayerNode {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    /// Appends the output node and validates the result.
    pub fn finish(mut self, from: NodeId, meta: Option<ArchMeta>, executable: bool) -> Result<ArchGraph> {
        self.clear_scope();
        self.push("output", LayerKind::Output, &[from], &[]);
        let graph = ArchGraph {
            meta,
            input: self.input,
            executable,
            nodes: self.nodes,
        };
        graph.validate()?;
        Ok(graph)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ArchGraph {
        let (mut b, x) = GraphBuilder::new(Shape(vec![4, 8, 8]));
        let c = b.push(
            "conv",
            LayerKind::Conv {
                in_channels: 4,
                out_channels: 8,
                kernel: vec![3, 3],
                stride: vec![2, 2],
                padding: vec![1, 1],
                groups: 2,
                bias: false,
            },
            &[x],
            &[],
        );
        b.finish(c, None, true).unwrap()
    }

    #[test]
    fn shapes_propagate() {
        let g = tiny();
        let shapes = g.infer_shapes().unwrap();
        assert_eq!(shapes[1], Shape(vec![8, 4, 4]));
    }

    #[test]
    fn rejects_forward_reference() {
        let mut g = tiny();
        g.nodes[1].inputs = vec![NodeId(2)];
        assert!(matches!(g.validate(), Err(Error::InvalidGraph(_))));
    }

    #[test]
    fn rejects_bad_add_arity() {
        let mut g = tiny();
        g.nodes[1].kind = LayerKind::Add;
        assert!(g.validate().is_err());
    }

    #[test]
    fn tag_strings_round_trip() {
        for t in [Tag::MainPath, Tag::Stage(3), Tag::EndBlock, Tag::Projection] {
            assert_eq!(t.to_string().parse::<Tag>().unwrap(), t);
        }
        assert!("stage-x".parse::<Tag>().is_err());
    }

    #[test]
    fn parses_shapes() {
        assert_eq!("3x224x224".parse::<Shape>().unwrap(), Shape(vec![3, 224, 224]));
        assert!("3x0x2".parse::<Shape>().is_err());
        assert!("abc".parse::<Shape>().is_err());
    }
}
