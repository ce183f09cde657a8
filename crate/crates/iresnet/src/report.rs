//! Text and CSV renderings of analyzer results.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use iresnet_core::analyzer::{count_params, main_path_relu_count, component_census, CountReport, GoldenCell, Metric, VerifyReport};
use iresnet_core::graph::{ArchGraph, KindName};
use iresnet_core::networks::{arch_label, Family, VariantId};

use crate::error::{Error, Result};

pub const VERIFY_HEADER: [&str; 9] =
    ["family", "variant", "depth", "metric", "computed", "reported", "delta", "pass", "classes"];

fn reported_str(c: &GoldenCell) -> String {
    match c.metric {
        Metric::Params { decimals } => format!("{:.*}", decimals as usize, c.reported),
        _ => c.reported.to_string(),
    }
}

pub fn verify_csv(report: &VerifyReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(VERIFY_HEADER).expect("writing to memory");
    for r in &report.rows {
        let c = &r.cell;
        w.write_record([
            c.family.to_string(),
            c.variant.to_string(),
            c.depth.to_string(),
            c.metric.to_string(),
            format!("{:.6}", r.computed),
            reported_str(c),
            format!("{:.6}", r.delta),
            r.pass.to_string(),
            c.classes.to_string(),
        ])
        .expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("csv output is UTF-8")
}

pub fn verify_text(report: &VerifyReport) -> String {
    let mut s = format!(
        "{:<8} {:<13} {:>5} {:>7} {:<18} {:>12} {:>10} {:>10}  {}\n",
        "family", "variant", "depth", "classes", "metric", "computed", "reported", "delta", "result"
    );
    for r in &report.rows {
        let c = &r.cell;
        let _ = writeln!(
            s,
            "{:<8} {:<13} {:>5} {:>7} {:<18} {:>12.4} {:>10} {:>+10.4}  {}",
            c.family.as_str(),
            c.variant.as_str(),
            c.depth,
            c.classes,
            c.metric.to_string(),
            r.computed,
            match c.metric {
                Metric::Params { .. } => reported_str(c),
                _ => format!("{:.4}", c.reported),
            },
            r.delta,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    for n in &report.notes {
        let _ = writeln!(s, "note: {n}");
    }
    let passed = report.rows.iter().filter(|r| r.pass).count();
    let _ = writeln!(s, "{passed}/{} cells pass", report.rows.len());
    s
}

fn parse_metric(s: &str, reported: &str) -> Option<Metric> {
    match s {
        "params_m" => {
            let decimals = reported.split_once('.').map_or(0, |(_, frac)| frac.len());
            Some(Metric::Params {
                decimals: u8::try_from(decimals).ok()?,
            })
        }
        "conv_ratio_320_224" => Some(Metric::ConvRatio),
        _ => s.strip_prefix("gflops@")?.parse().ok().map(|side| Metric::Gflops { side }),
    }
}

/// Reads golden cells from a CSV with at least the columns family, variant,
/// depth, metric and reported; `classes` defaults to the family's default.
/// The parameter precision is taken from the digits of `reported`, so a
/// `verify-tables --csv` output can be edited and fed back in.
pub fn read_golden(text: &str, origin: &Path) -> Result<Vec<GoldenCell>> {
    let err = |line: u64, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line: line as usize,
        column: 1,
        message,
    };
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| err(1, e.to_string()))?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let required = ["family", "variant", "depth", "metric", "reported"];
    let mut idx = [0usize; 5];
    for (slot, name) in idx.iter_mut().zip(required) {
        *slot = col(name).ok_or_else(|| err(1, format!("missing column {name:?}")))?;
    }
    let classes_col = col("classes");
    let mut cells = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| row.get(i).unwrap_or("").trim();
        let bad = |what: &str, v: &str| err(line, format!("bad {what} {v:?}"));
        let family: Family = field(idx[0]).parse().map_err(|e| err(line, format!("{e}")))?;
        let variant: VariantId = field(idx[1]).parse().map_err(|e| err(line, format!("{e}")))?;
        let depth = field(idx[2]).parse().map_err(|_| bad("depth", field(idx[2])))?;
        let reported_s = field(idx[4]);
        let reported = reported_s.parse().map_err(|_| bad("reported value", reported_s))?;
        let metric = parse_metric(field(idx[3]), reported_s).ok_or_else(|| bad("metric", field(idx[3])))?;
        let classes = match classes_col.map(field).filter(|s| !s.is_empty()) {
            Some(s) => s.parse().map_err(|_| bad("classes", s))?,
            None => family.default_classes(),
        };
        cells.push(GoldenCell {
            family,
            variant,
            depth,
            classes,
            metric,
            reported,
        });
    }
    Ok(cells)
}

pub fn format_params(n: u64) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

/// One line: label, parameter count and node census.
pub fn census_line(graph: &ArchGraph) -> String {
    let label = graph.meta.as_ref().map_or_else(|| "custom".to_string(), arch_label);
    let mut s = format!("{label} params={}", format_params(count_params(graph)));
    for (kind, n) in component_census(graph) {
        if !matches!(kind, KindName::Input | KindName::Output) {
            let _ = write!(s, " {kind}={n}");
        }
    }
    if let Ok(n) = main_path_relu_count(graph) {
        let _ = write!(s, " main_path_relus={n}");
    }
    s
}

pub fn summary(graph: &ArchGraph) -> String {
    let mut s = String::new();
    if let Some(m) = &graph.meta {
        let _ = writeln!(s, "arch: {} ({} classes)", arch_label(m), m.classes);
    }
    let _ = writeln!(s, "input: {}", graph.input);
    let _ = writeln!(s, "nodes: {}", graph.nodes.len());
    let mut stages: BTreeMap<u8, BTreeSet<u32>> = BTreeMap::new();
    for b in graph.nodes.iter().filter_map(|n| n.block) {
        stages.entry(b.stage).or_default().insert(b.index);
    }
    if !stages.is_empty() {
        let blocks: Vec<String> = stages.values().map(|b| b.len().to_string()).collect();
        let _ = writeln!(s, "blocks per stage: [{}]", blocks.join(","));
    }
    let _ = writeln!(s, "params: {}", count_params(graph));
    let _ = writeln!(s, "executable: {}", graph.executable);
    let _ = writeln!(s, "{}", census_line(graph));
    s
}

pub fn count_text(report: &CountReport) -> String {
    let mut s = format!(
        "{:<44} {:<14} {:<16} {:>12} {:>16}\n",
        "node", "kind", "output", "params", "flops"
    );
    for n in &report.nodes {
        let _ = writeln!(
            s,
            "{:<44} {:<14} {:<16} {:>12} {:>16}",
            n.name,
            n.kind.as_str(),
            n.output.to_string(),
            n.params,
            n.flops
        );
    }
    let _ = writeln!(s, "input: {}", report.input);
    let _ = writeln!(s, "total params: {} ({})", report.total_params, format_params(report.total_params));
    let _ = writeln!(s, "total flops: {} ({:.2} GFLOPs)", report.total_flops, report.total_flops as f64 / 1e9);
    if let Some(n) = report.main_path_relus {
        let _ = writeln!(s, "main-path relus: {n}");
    }
    s
}

/// One row per node followed by a `total` row.
pub fn count_csv(report: &CountReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "node", "kind", "output", "params", "flops"]).expect("writing to memory");
    for n in &report.nodes {
        w.write_record([
            n.id.0.to_string(),
            n.name.clone(),
            n.kind.as_str().to_string(),
            n.output.to_string(),
            n.params.to_string(),
            n.flops.to_string(),
        ])
        .expect("writing to memory");
    }
    w.write_record([
        String::new(),
        "total".into(),
        String::new(),
        report.input.to_string(),
        report.total_params.to_string(),
        report.total_flops.to_string(),
    ])
    .expect("writing to memory");
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("csv output is UTF-8")
}
