//! Complete architectures for every family, depth and variant.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocks::{build_block, BlockSpec, BlockVariant, ProjectionKind};
use crate::graph::{ArchGraph, ArchMeta, BlockRef, GraphBuilder, LayerKind, NodeId, Shape, Tag};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Imagenet,
    Cifar,
    Video3d,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Imagenet, Family::Cifar, Family::Video3d];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Imagenet => "imagenet",
            Self::Cifar => "cifar",
            Self::Video3d => "video3d",
        }
    }

    /// Default per-sample input shape.
    pub fn input_shape(self) -> Shape {
        match self {
            Self::Imagenet => Shape(vec![3, 224, 224]),
            Self::Cifar => Shape(vec![3, 32, 32]),
            Self::Video3d => Shape(vec![3, 16, 224, 224]),
        }
    }

    pub fn default_classes(self) -> usize {
        match self {
            Self::Imagenet => 1000,
            Self::Cifar => 10,
            Self::Video3d => 400,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown family {s:?} (imagenet, cifar, video3d)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantId {
    Baseline,
    Preact,
    Resstage,
    Iresnet,
    Resmax,
    Resgroup,
    Resgroupfix,
    Iresgroup,
    Iresgroupfix,
    AvgprojComparison,
    /// ResNeXt 32x4d reference point of the group tables.
    Resnext,
}

/// Placement of BN and ReLU within and around blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ordering {
    Baseline,
    Preact,
    Stage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelPlan {
    Bottleneck,
    /// 32 channels per group at every stage.
    Group,
    /// 64 groups at every stage.
    GroupFix,
    Resnext,
}

impl VariantId {
    pub const ALL: [VariantId; 11] = [
        Self::Baseline,
        Self::Preact,
        Self::Resstage,
        Self::Iresnet,
        Self::Resmax,
        Self::Resgroup,
        Self::Resgroupfix,
        Self::Iresgroup,
        Self::Iresgroupfix,
        Self::AvgprojComparison,
        Self::Resnext,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Preact => "preact",
            Self::Resstage => "resstage",
            Self::Iresnet => "iresnet",
            Self::Resmax => "resmax",
            Self::Resgroup => "resgroup",
            Self::Resgroupfix => "resgroupfix",
            Self::Iresgroup => "iresgroup",
            Self::Iresgroupfix => "iresgroupfix",
            Self::AvgprojComparison => "avgproj-comparison",
            Self::Resnext => "resnext",
        }
    }

    pub fn ordering(self) -> Ordering {
        match self {
            Self::Preact => Ordering::Preact,
            Self::Resstage | Self::Iresnet | Self::Iresgroup | Self::Iresgroupfix => Ordering::Stage,
            _ => Ordering::Baseline,
        }
    }

    pub fn projection(self) -> ProjectionKind {
        match self {
            Self::Iresnet | Self::Resmax | Self::Iresgroup | Self::Iresgroupfix => ProjectionKind::Improved,
            Self::AvgprojComparison => ProjectionKind::AvgPool,
            _ => ProjectionKind::Original,
        }
    }

    pub fn channel_plan(self) -> ChannelPlan {
        match self {
            Self::Resgroup | Self::Iresgroup => ChannelPlan::Group,
            Self::Resgroupfix | Self::Iresgroupfix => ChannelPlan::GroupFix,
            Self::Resnext => ChannelPlan::Resnext,
            _ => ChannelPlan::Bottleneck,
        }
    }

    /// Whether the network drops the stem max pool and downsamples in the
    /// first stage's projection instead.
    pub fn pools_in_first_projection(self) -> bool {
        self.projection() == ProjectionKind::Improved
    }

    pub fn supports(self, family: Family) -> bool {
        match family {
            Family::Imagenet => true,
            Family::Cifar => self.channel_plan() == ChannelPlan::Bottleneck,
            Family::Video3d => matches!(self, Self::Baseline | Self::Iresnet),
        }
    }
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|v| v.as_str()).collect();
            Error::InvalidArgument(format!("unknown variant {s:?} (one of {})", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub blocks: usize,
    pub in_ch: usize,
    pub mid_ch: usize,
    pub out_ch: usize,
    pub groups: usize,
    pub stride: usize,
    pub temporal_stride: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StagePlan {
    pub family: Family,
    pub depth: usize,
    pub blocks_per_stage: Vec<usize>,
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
}

pub const IMAGENET_DEPTHS: [usize; 6] = [50, 101, 152, 200, 302, 404];
pub const CIFAR_DEPTHS: [usize; 4] = [164, 1001, 2000, 3002];

fn blocks_for(family: Family, depth: usize) -> Result<Vec<usize>> {
    let unsupported = |allowed: &str| {
        Err(Error::InvalidArgument(format!(
            "unsupported {family} depth {depth}; supported: {allowed}"
        )))
    };
    match family {
        Family::Imagenet => Ok(match depth {
            50 => vec![3, 4, 6, 3],
            101 => vec![3, 4, 23, 3],
            152 => vec![3, 8, 36, 3],
            200 => vec![3, 24, 36, 3],
            302 => vec![4, 34, 58, 4],
            404 => vec![4, 46, 80, 4],
            _ => return unsupported("50, 101, 152, 200, 302, 404"),
        }),
        Family::Video3d if depth == 50 => Ok(vec![3, 4, 6, 3]),
        Family::Video3d => unsupported("50"),
        Family::Cifar if depth == 3002 => Ok(vec![333, 334, 333]),
        Family::Cifar if depth >= 11 && (depth - 2) % 9 == 0 => Ok(vec![(depth - 2) / 9; 3]),
        Family::Cifar => unsupported("164, 1001, 2000, 3002 or any 9n+2"),
    }
}

/// Block counts, bottleneck channel plan and strides of a family at a depth.
pub fn stage_plan(family: Family, depth: usize) -> Result<StagePlan> {
    let blocks = blocks_for(family, depth)?;
    let (stem, mids): (usize, &[usize]) = match family {
        Family::Cifar => (16, &[16, 32, 64]),
        _ => (64, &[64, 128, 256, 512]),
    };
    let mut in_ch = stem;
    let stages = blocks
        .iter()
        .zip(mids)
        .enumerate()
        .map(|(k, (&n, &mid))| {
            let (stride, temporal_stride) = match (family, k) {
                (_, 0) => (1, (family == Family::Video3d).then_some(1)),
                (Family::Video3d, 1) => (2, Some(1)),
                (Family::Video3d, _) => (2, Some(2)),
                _ => (2, None),
            };
            let spec = StageSpec {
                blocks: n,
                in_ch,
                mid_ch: mid,
                out_ch: 4 * mid,
                groups: 1,
                stride,
                temporal_stride,
            };
            in_ch = spec.out_ch;
            spec
        })
        .collect();
    let plan = StagePlan {
        family,
        depth,
        blocks_per_stage: blocks,
        stem_channels: stem,
        stages,
    };
    debug_assert_eq!(3 * plan.blocks_per_stage.iter().sum::<usize>() + 2, depth);
    Ok(plan)
}

/// Stage plan adjusted for a variant's channel plan and stage-1 stride.
pub fn variant_plan(family: Family, variant: VariantId, depth: usize) -> Result<StagePlan> {
    if !variant.supports(family) {
        return Err(Error::InvalidArgument(format!(
            "variant {variant} is not defined for the {family} family"
        )));
    }
    let mut plan = stage_plan(family, depth)?;
    if variant.ordering() == Ordering::Stage && plan.blocks_per_stage.iter().any(|&n| n < 2) {
        return Err(Error::InvalidArgument(format!(
            "variant {variant} needs at least 2 blocks per stage (start and end), depth {depth} has {:?}",
            plan.blocks_per_stage
        )));
    }
    let mut in_ch = plan.stem_channels;
    for (k, s) in plan.stages.iter_mut().enumerate() {
        let base_mid = s.mid_ch;
        match variant.channel_plan() {
            ChannelPlan::Bottleneck => {}
            ChannelPlan::Resnext => {
                s.mid_ch = 2 * base_mid;
                s.groups = 32;
            }
            ChannelPlan::Group | ChannelPlan::GroupFix => {
                s.mid_ch = 4 * base_mid;
                s.out_ch = 2 * base_mid;
                s.groups = if variant.channel_plan() == ChannelPlan::GroupFix {
                    64
                } else {
                    s.mid_ch / 32
                };
            }
        }
        s.in_ch = in_ch;
        in_ch = s.out_ch;
        if k == 0 && variant.pools_in_first_projection() && family != Family::Cifar {
            s.stride = 2;
        }
    }
    Ok(plan)
}

fn check_classes(family: Family, classes: usize) -> Result<()> {
    let ok = match family {
        Family::Imagenet => classes >= 1,
        Family::Cifar => matches!(classes, 10 | 100),
        Family::Video3d => matches!(classes, 400 | 174),
    };
    if ok {
        Ok(())
    } else {
        let allowed = match family {
            Family::Imagenet => "at least 1",
            Family::Cifar => "10 or 100",
            Family::Video3d => "400 or 174",
        };
        Err(Error::InvalidArgument(format!(
            "{family} networks take {allowed} classes, got {classes}"
        )))
    }
}

fn stem(b: &mut GraphBuilder, x: NodeId, family: Family, channels: usize, keep_pool: bool) -> NodeId {
    b.scope("stem", &[Tag::Stem], None);
    let (kernel, stride, padding, pool) = match family {
        Family::Cifar => (vec![3, 3], vec![1, 1], vec![1, 1], None),
        Family::Imagenet => (
            vec![7, 7],
            vec![2, 2],
            vec![3, 3],
            Some((vec![3, 3], vec![2, 2], vec![1, 1])),
        ),
        Family::Video3d => (
            vec![5, 7, 7],
            vec![1, 2, 2],
            vec![2, 3, 3],
            Some((vec![1, 3, 3], vec![1, 2, 2], vec![0, 1, 1])),
        ),
    };
    let conv = LayerKind::Conv {
        in_channels: 3,
        out_channels: channels,
        kernel,
        stride,
        padding,
        groups: 1,
        bias: false,
    };
    let mut cur = b.push("conv", conv, &[x], &[]);
    cur = b.push("bn", LayerKind::BatchNorm { channels }, &[cur], &[]);
    cur = b.push("relu", LayerKind::Relu, &[cur], &[]);
    if let (true, Some((kernel, stride, padding))) = (keep_pool, pool) {
        cur = b.push("pool", LayerKind::MaxPool { kernel, stride, padding }, &[cur], &[]);
    }
    cur
}

fn block_spec(variant: VariantId, stage: &StageSpec, index: usize, in_ch: usize) -> BlockSpec {
    let first = index == 0;
    let last = index + 1 == stage.blocks;
    let block_variant = match variant.ordering() {
        Ordering::Baseline => BlockVariant::Baseline,
        Ordering::Preact => BlockVariant::Preact,
        Ordering::Stage if first => BlockVariant::ResstageStart,
        Ordering::Stage if last => BlockVariant::ResstageEnd,
        Ordering::Stage => BlockVariant::ResstageMiddle,
    };
    let (stride, temporal_stride) = if first {
        (stage.stride, stage.temporal_stride)
    } else {
        (1, stage.temporal_stride.map(|_| 1))
    };
    let mut spec = BlockSpec::new(block_variant, in_ch, stage.mid_ch, stage.out_ch, stride);
    spec.temporal_stride = temporal_stride;
    spec.groups = stage.groups;
    if spec.projection.is_some() || spec.downsamples() {
        spec.projection = Some(variant.projection());
    }
    spec.drop_first_bn = variant.ordering() == Ordering::Stage && index == 1;
    spec
}

/// Builds any supported network.
pub fn build_network(family: Family, variant: VariantId, depth: usize, classes: usize) -> Result<ArchGraph> {
    check_classes(family, classes)?;
    let plan = variant_plan(family, variant, depth)?;
    let (mut b, x) = GraphBuilder::new(family.input_shape());
    let keep_pool = !(variant.pools_in_first_projection() && family != Family::Cifar);
    let mut cur = stem(&mut b, x, family, plan.stem_channels, keep_pool);
    let mut in_ch = plan.stem_channels;
    for (k, stage) in plan.stages.iter().enumerate() {
        let stage_tag = Tag::Stage(k as u8 + 1);
        for i in 0..stage.blocks {
            let role = if i == 0 {
                Tag::StartBlock
            } else if i + 1 == stage.blocks {
                Tag::EndBlock
            } else {
                Tag::MiddleBlock
            };
            let block = BlockRef {
                stage: k as u8 + 1,
                index: i as u32,
            };
            b.scope(&format!("s{}.b{i}", k + 1), &[stage_tag, role], Some(block));
            let spec = block_spec(variant, stage, i, in_ch);
            cur = build_block(&mut b, cur, &spec)?;
            in_ch = stage.out_ch;
        }
    }
    b.scope("head", &[Tag::Head], None);
    cur = b.push("pool", LayerKind::GlobalAvgPool, &[cur], &[]);
    cur = b.push(
        "fc",
        LayerKind::Linear {
            in_features: in_ch,
            out_features: classes,
        },
        &[cur],
        &[],
    );
    let meta = ArchMeta {
        family,
        variant,
        depth,
        classes,
    };
    b.finish(cur, Some(meta), family != Family::Video3d)
}

pub fn build_imagenet(variant: VariantId, depth: usize, classes: usize) -> Result<ArchGraph> {
    build_network(Family::Imagenet, variant, depth, classes)
}

pub fn build_cifar(variant: VariantId, depth: usize, classes: usize) -> Result<ArchGraph> {
    build_network(Family::Cifar, variant, depth, classes)
}

/// Symbolic 3-D network; counted but never executed.
pub fn build_video3d(variant: VariantId, depth: usize, classes: usize) -> Result<ArchGraph> {
    build_network(Family::Video3d, variant, depth, classes)
}

/// Short human-readable identifier such as `imagenet/iresnet-50`.
pub fn arch_label(meta: &ArchMeta) -> String {
    format!("{}/{}-{}", meta.family, meta.variant, meta.depth)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for v in VariantId::ALL {
            assert_eq!(v.as_str().parse::<VariantId>().unwrap(), v);
        }
        for f in Family::ALL {
            assert_eq!(f.as_str().parse::<Family>().unwrap(), f);
        }
        assert!("resnet".parse::<VariantId>().is_err());
    }

    #[test]
    fn rejects_unsupported_combinations() {
        assert!(build_imagenet(VariantId::Baseline, 51, 1000).is_err());
        assert!(build_cifar(VariantId::Resgroup, 164, 10).is_err());
        assert!(build_cifar(VariantId::Iresnet, 11, 10).is_err());
        assert!(build_cifar(VariantId::Baseline, 20, 7).is_err());
        assert!(build_video3d(VariantId::Preact, 50, 400).is_err());
    }

    #[test]
    fn small_cifar_builds() {
        let g = build_cifar(VariantId::Iresnet, 20, 10).unwrap();
        assert!(g.executable);
        assert_eq!(g.infer_shapes().unwrap().last().unwrap(), &Shape(vec![10]));
    }
}
