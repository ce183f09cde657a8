//! `.arch.json` architecture documents.
//!
//! A document is a JSON object `{"format": "iresnet-arch", "version": 1,
//! "graph": {...}}` where `graph` is the serde form of [`ArchGraph`]. Keys are
//! written in declaration order, so documents of the same network are
//! byte-identical.

use std::fs;
use std::path::Path;

use iresnet_core::graph::ArchGraph;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT: &str = "iresnet-arch";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "arch.json";

#[derive(Serialize)]
struct DocumentRef<'a> {
    format: &'a str,
    version: u32,
    graph: &'a ArchGraph,
}

#[derive(Deserialize)]
struct Document {
    format: String,
    version: u32,
    graph: ArchGraph,
}

pub fn to_string(graph: &ArchGraph) -> String {
    let doc = DocumentRef {
        format: FORMAT,
        version: VERSION,
        graph,
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("graphs always serialize");
    s.push('\n');
    s
}

/// Parses and validates a document. `origin` only labels error messages.
pub fn from_str(text: &str, origin: &Path) -> Result<ArchGraph> {
    let doc: Document = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: origin.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if doc.format != FORMAT {
        return Err(Error::Usage(format!(
            "{}: expected format \"{FORMAT}\", found \"{}\"",
            origin.display(),
            doc.format
        )));
    }
    if doc.version != VERSION {
        return Err(Error::Usage(format!(
            "{}: unsupported document version {} (this build reads {VERSION})",
            origin.display(),
            doc.version
        )));
    }
    doc.graph.validate()?;
    Ok(doc.graph)
}

pub fn write(path: &Path, graph: &ArchGraph) -> Result<()> {
    fs::write(path, to_string(graph)).map_err(Error::io(path))
}

pub fn read(path: &Path) -> Result<ArchGraph> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    from_str(&text, path)
}
