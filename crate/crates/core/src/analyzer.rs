//! Parameter, FLOP and structural census of architecture graphs.
//!
//! FLOP convention: conv and linear count one per multiply-accumulate, BN two
//! per output element, ReLU and add one, pools their window size per output
//! element (global pooling: the whole input).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use num_traits::float::FloatCore;

use crate::graph::{ArchGraph, KindName, LayerKind, LayerNode, NodeId, Shape, Tag};
use crate::networks::{build_network, Family, VariantId};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeCount {
    pub id: NodeId,
    pub name: String,
    pub kind: KindName,
    pub output: Shape,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountReport {
    pub input: Shape,
    pub nodes: Vec<NodeCount>,
    pub total_params: u64,
    pub total_flops: u64,
    pub census: BTreeMap<KindName, usize>,
    /// `None` when the graph carries no main-path tags.
    pub main_path_relus: Option<usize>,
}

fn prod(dims: &[usize]) -> u64 {
    dims.iter().map(|&d| d as u64).product()
}

pub fn node_params(node: &LayerNode) -> u64 {
    match &node.kind {
        LayerKind::Conv {
            in_channels,
            out_channels,
            kernel,
            groups,
            bias,
            ..
        } => {
            let w = (in_channels / groups) as u64 * *out_channels as u64 * prod(kernel);
            w + if *bias { *out_channels as u64 } else { 0 }
        }
        LayerKind::BatchNorm { channels } => 2 * *channels as u64,
        LayerKind::Linear {
            in_features,
            out_features,
        } => (*in_features as u64 + 1) * *out_features as u64,
        _ => 0,
    }
}

/// FLOPs of one node given its input and output shapes.
pub fn node_flops(node: &LayerNode, input: Option<&Shape>, output: &Shape) -> u64 {
    match &node.kind {
        LayerKind::Conv {
            in_channels,
            out_channels,
            kernel,
            groups,
            ..
        } => (in_channels / groups) as u64 * *out_channels as u64 * prod(kernel) * prod(output.spatial()),
        LayerKind::Linear {
            in_features,
            out_features,
        } => *in_features as u64 * *out_features as u64,
        LayerKind::BatchNorm { .. } => 2 * output.numel(),
        LayerKind::Relu | LayerKind::Add => output.numel(),
        LayerKind::MaxPool { kernel, .. } | LayerKind::AvgPool { kernel, .. } => prod(kernel) * output.numel(),
        LayerKind::GlobalAvgPool => input.map_or(0, Shape::numel),
        LayerKind::Input | LayerKind::Output => 0,
    }
}

pub fn count_params(graph: &ArchGraph) -> u64 {
    graph.nodes.iter().map(node_params).sum()
}

pub fn count_flops(graph: &ArchGraph, input: &Shape) -> Result<u64> {
    Ok(per_node(graph, input)?.iter().map(|n| n.flops).sum())
}

/// FLOPs of convolution nodes only.
pub fn conv_flops(graph: &ArchGraph, input: &Shape) -> Result<u64> {
    Ok(per_node(graph, input)?
        .iter()
        .filter(|n| n.kind == KindName::Conv)
        .map(|n| n.flops)
        .sum())
}

fn per_node(graph: &ArchGraph, input: &Shape) -> Result<Vec<NodeCount>> {
    let shapes = graph.infer_shapes_at(input)?;
    Ok(graph
        .nodes
        .iter()
        .map(|n| NodeCount {
            id: n.id,
            name: n.name.clone(),
            kind: n.kind.name(),
            output: shapes[n.id.0].clone(),
            params: node_params(n),
            flops: node_flops(n, n.inputs.first().map(|i| &shapes[i.0]), &shapes[n.id.0]),
        })
        .collect())
}

pub fn component_census(graph: &ArchGraph) -> BTreeMap<KindName, usize> {
    let mut census = BTreeMap::new();
    for n in &graph.nodes {
        *census.entry(n.kind.name()).or_insert(0) += 1;
    }
    census
}

/// Nodes on the route from the classifier back to the stem that crosses
/// every addition through its shortcut input.
pub fn main_path(graph: &ArchGraph) -> Result<Vec<NodeId>> {
    if !graph.nodes.iter().any(|n| n.has(Tag::MainPath)) {
        return Err(Error::InvalidGraph("graph carries no main-path tags".into()));
    }
    let mut path = Vec::new();
    let mut cur = graph.output().id;
    loop {
        let node = graph.node(cur);
        if node.kind == LayerKind::Input || node.has(Tag::Stem) {
            break;
        }
        path.push(cur);
        cur = match node.kind {
            LayerKind::Add => node.inputs[1],
            _ => node.inputs[0],
        };
    }
    path.reverse();
    Ok(path)
}

pub fn main_path_relu_count(graph: &ArchGraph) -> Result<usize> {
    Ok(main_path(graph)?
        .into_iter()
        .filter(|&id| graph.node(id).kind == LayerKind::Relu)
        .count())
}

pub fn analyze(graph: &ArchGraph, input: &Shape) -> Result<CountReport> {
    let nodes = per_node(graph, input)?;
    Ok(CountReport {
        input: input.clone(),
        total_params: nodes.iter().map(|n| n.params).sum(),
        total_flops: nodes.iter().map(|n| n.flops).sum(),
        nodes,
        census: component_census(graph),
        main_path_relus: main_path_relu_count(graph).ok(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    /// Millions of parameters, compared at the printed precision.
    Params { decimals: u8 },
    /// GFLOPs at a square input side (or the video clip), ±2%.
    Gflops { side: usize },
    /// Conv-only FLOPs at 320 over 224, against (320/224)² within 0.5%.
    ConvRatio,
}

impl Metric {
    pub const FLOP_TOLERANCE: f64 = 0.02;
    pub const RATIO_TOLERANCE: f64 = 0.005;

    fn input(self, family: Family) -> Shape {
        match self {
            Self::Gflops { side } if family != Family::Video3d => Shape(alloc::vec![3, side, side]),
            _ => family.input_shape(),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Params { .. } => f.write_str("params_m"),
            Self::Gflops { side } => write!(f, "gflops@{side}"),
            Self::ConvRatio => f.write_str("conv_ratio_320_224"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GoldenCell {
    pub family: Family,
    pub variant: VariantId,
    pub depth: usize,
    pub classes: usize,
    pub metric: Metric,
    pub reported: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyRow {
    pub cell: GoldenCell,
    pub computed: f64,
    /// `computed - reported`.
    pub delta: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub rows: Vec<VerifyRow>,
    pub notes: Vec<String>,
}

impl VerifyReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &VerifyRow> {
        self.rows.iter().filter(|r| !r.pass)
    }
}

fn cell(family: Family, variant: VariantId, depth: usize, classes: usize, metric: Metric, reported: f64) -> GoldenCell {
    GoldenCell {
        family,
        variant,
        depth,
        classes,
        metric,
        reported,
    }
}

/// Every params/GFLOPs cell of the published complexity tables.
pub fn golden_cells() -> Vec<GoldenCell> {
    use Family::*;
    use VariantId::*;
    let p2 = Metric::Params { decimals: 2 };
    let g224 = Metric::Gflops { side: 224 };
    let g320 = Metric::Gflops { side: 320 };
    let mut cells = Vec::new();

    let params = [(50, 25.56), (101, 44.55), (152, 60.19), (200, 64.67)];
    for v in [Baseline, Resstage, Iresnet] {
        for (d, r) in params {
            cells.push(cell(Imagenet, v, d, 1000, p2, r));
        }
    }
    cells.push(cell(Imagenet, Iresnet, 302, 1000, p2, 96.59));
    cells.push(cell(Imagenet, Iresnet, 404, 1000, Metric::Params { decimals: 1 }, 124.5));
    for (v, vals) in [
        (Resgroupfix, [23.37, 43.79, 60.61]),
        (Resgroup, [24.89, 47.81, 66.99]),
        (Resnext, [25.03, 44.18, 59.95]),
    ] {
        for (d, r) in [50, 101, 152].into_iter().zip(vals) {
            cells.push(cell(Imagenet, v, d, 1000, p2, r));
        }
    }
    for (classes, vals) in [(10, [1.70, 10.33, 20.62, 30.93]), (100, [1.73, 10.35, 20.65, 30.96])] {
        for (d, r) in [164, 1001, 2000, 3002].into_iter().zip(vals) {
            cells.push(cell(Cifar, Iresnet, d, classes, p2, r));
        }
    }
    cells.push(cell(Video3d, Baseline, 50, 400, p2, 47.00));
    cells.push(cell(Video3d, Baseline, 50, 174, p2, 46.54));

    for (d, base, imp) in [
        (50, 4.14, 4.18),
        (101, 7.88, 7.92),
        (152, 11.62, 11.65),
        (200, 15.16, 15.19),
    ] {
        cells.push(cell(Imagenet, Baseline, d, 1000, g224, base));
        cells.push(cell(Imagenet, Iresnet, d, 1000, g224, imp));
    }
    cells.push(cell(Imagenet, Iresnet, 302, 1000, g224, 22.67));
    cells.push(cell(Imagenet, Iresnet, 404, 1000, g224, 30.15));
    for (v, vals) in [
        (Resgroupfix, [Some(4.30), Some(8.33), Some(12.35)]),
        (Resgroup, [Some(5.43), Some(9.94), Some(14.70)]),
        (Iresgroupfix, [Some(4.47), Some(8.49), Some(12.53)]),
        (Iresgroup, [Some(5.60), Some(10.11), Some(14.87)]),
        (Resnext, [None, Some(8.07), Some(11.84)]),
    ] {
        for (d, r) in [50, 101, 152].into_iter().zip(vals) {
            if let Some(r) = r {
                cells.push(cell(Imagenet, v, d, 1000, g224, r));
            }
        }
    }
    for (d, base, imp) in [
        (50, 8.45, 8.53),
        (101, 16.07, 16.15),
        (152, 23.71, 23.78),
        (200, 30.93, 30.99),
    ] {
        cells.push(cell(Imagenet, Baseline, d, 1000, g320, base));
        cells.push(cell(Imagenet, Iresnet, d, 1000, g320, imp));
    }
    cells.push(cell(Video3d, Baseline, 50, 400, g224, 93.26));
    cells.push(cell(Video3d, Iresnet, 50, 400, g224, 93.93));

    let ratio = (320.0 / 224.0) * (320.0 / 224.0);
    cells.push(cell(Imagenet, Baseline, 50, 1000, Metric::ConvRatio, ratio));
    cells.push(cell(Imagenet, Iresnet, 50, 1000, Metric::ConvRatio, ratio));
    cells
}

fn round_to(x: f64, decimals: u8) -> f64 {
    let scale = FloatCore::powi(10.0f64, decimals as i32);
    FloatCore::round(x * scale) / scale
}

fn evaluate_cell(graph: &ArchGraph, c: &GoldenCell) -> Result<VerifyRow> {
    let (computed, pass) = match c.metric {
        Metric::Params { decimals } => {
            let m = count_params(graph) as f64 / 1e6;
            (m, FloatCore::abs(round_to(m, decimals) - c.reported) < 1e-9)
        }
        Metric::Gflops { .. } => {
            let g = count_flops(graph, &c.metric.input(c.family))? as f64 / 1e9;
            (g, FloatCore::abs(g - c.reported) <= Metric::FLOP_TOLERANCE * c.reported)
        }
        Metric::ConvRatio => {
            let hi = conv_flops(graph, &Shape(alloc::vec![3, 320, 320]))? as f64;
            let lo = conv_flops(graph, &Shape(alloc::vec![3, 224, 224]))? as f64;
            let r = hi / lo;
            (r, FloatCore::abs(r - c.reported) <= Metric::RATIO_TOLERANCE * c.reported)
        }
    };
    Ok(VerifyRow {
        cell: c.clone(),
        computed,
        delta: computed - c.reported,
        pass,
    })
}

/// Checks the given cells, building each distinct network once.
pub fn verify_cells(cells: &[GoldenCell]) -> Result<VerifyReport> {
    let mut graphs: BTreeMap<(Family, VariantId, usize, usize), ArchGraph> = BTreeMap::new();
    let mut report = VerifyReport::default();
    for c in cells {
        let key = (c.family, c.variant, c.depth, c.classes);
        if !graphs.contains_key(&key) {
            graphs.insert(key, build_network(c.family, c.variant, c.depth, c.classes)?);
        }
        report.rows.push(evaluate_cell(&graphs[&key], c)?);
    }
    let at = |v| graphs.get(&(Family::Imagenet, v, 50, 1000));
    if let (Some(base), Some(imp)) = (at(VariantId::Baseline), at(VariantId::Iresnet)) {
        let input = Family::Imagenet.input_shape();
        let delta = (count_flops(imp, &input)? as f64 - count_flops(base, &input)? as f64) / 1e9;
        report.notes.push(format!(
            "iresnet-50 minus baseline-50 at 224: {delta:+.3} GFLOPs (published +0.04); the improved networks \
             drop the stem max pool and pool inside the stage-1 projection instead"
        ));
    }
    Ok(report)
}

pub fn verify_tables() -> Result<VerifyReport> {
    verify_cells(&golden_cells())
}
