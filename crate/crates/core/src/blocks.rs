//! Residual block and projection shortcut builders.
//!
//! Builders append nodes to a [`GraphBuilder`] and return the block output.
//! Add nodes always list the residual branch first and the shortcut second.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::graph::{ArchGraph, GraphBuilder, LayerKind, NodeId, Shape, Tag};
use crate::{Error, Result};

/// Kernel of the middle convolution in every bottleneck.
pub const MIDDLE_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockVariant {
    Baseline,
    Preact,
    ResstageStart,
    ResstageMiddle,
    ResstageEnd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionKind {
    /// Strided 1×1 conv + BN.
    Original,
    /// 3×3 max pool (when strided), then 1×1 conv + BN.
    Improved,
    /// 2×2 average pool (when strided), then 1×1 conv + BN.
    AvgPool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub variant: BlockVariant,
    pub in_ch: usize,
    pub mid_ch: usize,
    pub out_ch: usize,
    /// Spatial stride, applied to H and W.
    pub stride: usize,
    /// Temporal stride; `Some` makes the block three-dimensional.
    pub temporal_stride: Option<usize>,
    pub groups: usize,
    pub projection: Option<ProjectionKind>,
    pub drop_first_bn: bool,
}

impl BlockSpec {
    pub fn new(variant: BlockVariant, in_ch: usize, mid_ch: usize, out_ch: usize, stride: usize) -> Self {
        let projection = (in_ch != out_ch || stride != 1).then_some(ProjectionKind::Original);
        Self {
            variant,
            in_ch,
            mid_ch,
            out_ch,
            stride,
            temporal_stride: None,
            groups: 1,
            projection,
            drop_first_bn: false,
        }
    }

    /// Number of spatial axes (2 or 3).
    pub fn dims(&self) -> usize {
        if self.temporal_stride.is_some() {
            3
        } else {
            2
        }
    }

    /// Per-axis stride of the middle conv.
    pub fn strides(&self) -> Vec<usize> {
        match self.temporal_stride {
            Some(t) => vec![t, self.stride, self.stride],
            None => vec![self.stride, self.stride],
        }
    }

    pub fn downsamples(&self) -> bool {
        self.strides().iter().any(|&s| s != 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(format!("{msg} ({self:?})")));
        if self.in_ch == 0 || self.mid_ch == 0 || self.out_ch == 0 {
            return bad("channel counts must be positive");
        }
        if !self.strides().iter().all(|s| matches!(s, 1 | 2)) {
            return bad("strides must be 1 or 2");
        }
        if self.groups == 0 || self.mid_ch % self.groups != 0 {
            return bad("groups must divide mid_ch");
        }
        let needs = self.in_ch != self.out_ch || self.downsamples();
        if needs != self.projection.is_some() {
            return bad("a projection is required exactly when channels or resolution change");
        }
        if self.drop_first_bn && !matches!(self.variant, BlockVariant::ResstageMiddle | BlockVariant::ResstageEnd) {
            return bad("drop_first_bn applies only to non-start resstage blocks");
        }
        match self.variant {
            BlockVariant::ResstageStart if self.projection.is_none() => bad("a start block needs a projection"),
            BlockVariant::ResstageMiddle | BlockVariant::ResstageEnd if self.projection.is_some() => {
                bad("middle and end blocks take an identity shortcut")
            }
            _ => Ok(()),
        }
    }
}

fn conv(in_ch: usize, out_ch: usize, kernel: usize, strides: &[usize], groups: usize) -> LayerKind {
    let dims = strides.len();
    LayerKind::Conv {
        in_channels: in_ch,
        out_channels: out_ch,
        kernel: vec![kernel; dims],
        stride: strides.to_vec(),
        padding: vec![kernel / 2; dims],
        groups,
        bias: false,
    }
}

fn ones(dims: usize) -> Vec<usize> {
    vec![1; dims]
}

/// Appends a shortcut projection for an input with `in_ch` channels.
pub fn build_projection(
    b: &mut GraphBuilder,
    x: NodeId,
    kind: ProjectionKind,
    in_ch: usize,
    out_ch: usize,
    strides: &[usize],
) -> Result<NodeId> {
    if in_ch == 0 || out_ch == 0 {
        return Err(Error::InvalidArgument(format!("projection {in_ch}->{out_ch} needs positive channels")));
    }
    let dims = strides.len();
    let strided = strides.iter().any(|&s| s != 1);
    let tags = [Tag::Projection, Tag::MainPath];
    let mut cur = x;
    let conv_stride = match kind {
        ProjectionKind::Original => strides.to_vec(),
        ProjectionKind::Improved if strided => {
            let pool = LayerKind::MaxPool {
                kernel: vec![MIDDLE_KERNEL; dims],
                stride: strides.to_vec(),
                padding: vec![MIDDLE_KERNEL / 2; dims],
            };
            cur = b.push("proj_pool", pool, &[cur], &tags);
            ones(dims)
        }
        ProjectionKind::AvgPool if strided => {
            let pool = LayerKind::AvgPool {
                kernel: strides.to_vec(),
                stride: strides.to_vec(),
                padding: vec![0; dims],
            };
            cur = b.push("proj_pool", pool, &[cur], &tags);
            ones(dims)
        }
        ProjectionKind::Improved | ProjectionKind::AvgPool => ones(dims),
    };
    cur = b.push("proj_conv", conv(in_ch, out_ch, 1, &conv_stride, 1), &[cur], &tags);
    Ok(b.push("proj_bn", LayerKind::BatchNorm { channels: out_ch }, &[cur], &tags))
}

fn shortcut(b: &mut GraphBuilder, x: NodeId, spec: &BlockSpec) -> Result<NodeId> {
    match spec.projection {
        Some(kind) => build_projection(b, x, kind, spec.in_ch, spec.out_ch, &spec.strides()),
        None => Ok(x),
    }
}

/// Appends the three convolutions of a bottleneck branch. `pre` adds BN·ReLU
/// before each conv; otherwise BN follows each conv and ReLU the first two.
fn branch(b: &mut GraphBuilder, x: NodeId, spec: &BlockSpec, pre: bool, skip_first_bn: bool) -> NodeId {
    let r = [Tag::ResidualBranch];
    let d = spec.dims();
    let convs = [
        conv(spec.in_ch, spec.mid_ch, 1, &ones(d), 1),
        conv(spec.mid_ch, spec.mid_ch, MIDDLE_KERNEL, &spec.strides(), spec.groups),
        conv(spec.mid_ch, spec.out_ch, 1, &ones(d), 1),
    ];
    let channels_in = [spec.in_ch, spec.mid_ch, spec.mid_ch];
    let mut cur = x;
    for (i, c) in convs.into_iter().enumerate() {
        let k = i + 1;
        let out_ch = match &c {
            LayerKind::Conv { out_channels, .. } => *out_channels,
            _ => unreachable!(),
        };
        if pre {
            if !(i == 0 && skip_first_bn) {
                cur = b.push(&format!("bn{k}"), LayerKind::BatchNorm { channels: channels_in[i] }, &[cur], &r);
            }
            cur = b.push(&format!("relu{k}"), LayerKind::Relu, &[cur], &r);
            cur = b.push(&format!("conv{k}"), c, &[cur], &r);
        } else {
            cur = b.push(&format!("conv{k}"), c, &[cur], &r);
            cur = b.push(&format!("bn{k}"), LayerKind::BatchNorm { channels: out_ch }, &[cur], &r);
            if i < 2 {
                cur = b.push(&format!("relu{k}"), LayerKind::Relu, &[cur], &r);
            }
        }
    }
    cur
}

fn check(spec: &BlockSpec, allowed: &[BlockVariant]) -> Result<()> {
    if !allowed.contains(&spec.variant) {
        return Err(Error::InvalidArgument(format!(
            "builder does not accept {:?} blocks",
            spec.variant
        )));
    }
    spec.validate()
}

pub fn build_bottleneck_baseline(b: &mut GraphBuilder, x: NodeId, spec: &BlockSpec) -> Result<NodeId> {
    check(spec, &[BlockVariant::Baseline])?;
    let f = branch(b, x, spec, false, false);
    let s = shortcut(b, x, spec)?;
    let sum = b.push("add", LayerKind::Add, &[f, s], &[Tag::MainPath]);
    Ok(b.push("relu_out", LayerKind::Relu, &[sum], &[Tag::MainPath]))
}

pub fn build_bottleneck_preact(b: &mut GraphBuilder, x: NodeId, spec: &BlockSpec) -> Result<NodeId> {
    check(spec, &[BlockVariant::Preact])?;
    let f = branch(b, x, spec, true, false);
    let s = shortcut(b, x, spec)?;
    Ok(b.push("add", LayerKind::Add, &[f, s], &[Tag::MainPath]))
}

pub fn build_resstage_block(b: &mut GraphBuilder, x: NodeId, spec: &BlockSpec) -> Result<NodeId> {
    check(
        spec,
        &[BlockVariant::ResstageStart, BlockVariant::ResstageMiddle, BlockVariant::ResstageEnd],
    )?;
    let pre = spec.variant != BlockVariant::ResstageStart;
    let f = branch(b, x, spec, pre, spec.drop_first_bn);
    let s = shortcut(b, x, spec)?;
    let sum = b.push("add", LayerKind::Add, &[f, s], &[Tag::MainPath]);
    if spec.variant != BlockVariant::ResstageEnd {
        return Ok(sum);
    }
    let bn = b.push("bn_out", LayerKind::BatchNorm { channels: spec.out_ch }, &[sum], &[Tag::MainPath]);
    Ok(b.push("relu_out", LayerKind::Relu, &[bn], &[Tag::MainPath]))
}

/// Grouped bottleneck with the widest channels at the 3×3 conv.
pub fn build_resgroup_block(b: &mut GraphBuilder, x: NodeId, spec: &BlockSpec) -> Result<NodeId> {
    if spec.mid_ch != 2 * spec.out_ch {
        return Err(Error::InvalidArgument(format!(
            "resgroup blocks need mid_ch == 2*out_ch, got {} and {}",
            spec.mid_ch, spec.out_ch
        )));
    }
    build_block(b, x, spec)
}

/// Dispatches on the spec's variant.
pub fn build_block(b: &mut GraphBuilder, x: NodeId, spec: &BlockSpec) -> Result<NodeId> {
    match spec.variant {
        BlockVariant::Baseline => build_bottleneck_baseline(b, x, spec),
        BlockVariant::Preact => build_bottleneck_preact(b, x, spec),
        _ => build_resstage_block(b, x, spec),
    }
}

/// Wraps a single block in its own graph with input shape `[in_ch, spatial...]`.
pub fn standalone_block(spec: &BlockSpec, spatial: &[usize]) -> Result<ArchGraph> {
    if spatial.len() != spec.dims() {
        return Err(Error::InvalidArgument(format!(
            "{}-d block needs {} spatial sizes, got {}",
            spec.dims(),
            spec.dims(),
            spatial.len()
        )));
    }
    let mut dims = vec![spec.in_ch];
    dims.extend_from_slice(spatial);
    let (mut b, x) = GraphBuilder::new(Shape(dims));
    b.scope("block", &[], None);
    let y = build_block(&mut b, x, spec)?;
    b.finish(y, None, spec.dims() == 2)
}
