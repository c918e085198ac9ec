//! Graph ingestion and export.
//!
//! Three files describe a graph:
//!
//! * nodes: `id<TAB>kind<TAB>[label]`, one node per line, ids dense in
//!   `0..n` (any order). `kind` is `doc`/`document` or `user`; documents
//!   carry a class label, users do not.
//! * edges: `src<TAB>dst`; direction is ignored.
//! * features: `MGBF` magic, `u32` rows, `u32` cols, `u32` reserved, then
//!   `rows * cols` little-endian `f32` values, one row per document in
//!   ascending id order.
//!
//! Blank lines and lines starting with `#` are skipped in the text files.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{NodeId, NodeKind, SocialGraph};

pub const FEATURE_MAGIC: &[u8; 4] = b"MGBF";
const HEADER_LEN: usize = 16;

fn data_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = fs::File::open(path).map_err(|e| Error::ingest(path, 0, e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::ingest(path, i + 1, e.to_string()))?;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        out.push((i + 1, trimmed.to_string()));
    }
    Ok(out)
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, what: &str, s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::ingest(path, line, format!("invalid {what} {s:?}")))
}

/// Parsed node table: kinds by id and labels for documents.
fn read_nodes(path: &Path) -> Result<(Vec<NodeKind>, Vec<Option<usize>>)> {
    let lines = data_lines(path)?;
    let n = lines.len();
    let mut kinds = vec![None; n];
    let mut labels = vec![None; n];
    for (line, text) in &lines {
        let fields: Vec<&str> = text.split('\t').collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(Error::ingest(path, *line, "expected id<TAB>kind<TAB>[label]"));
        }
        let id: usize = parse_field(path, *line, "node id", fields[0])?;
        if id >= n {
            return Err(Error::ingest(path, *line, format!("node id {id} not dense in 0..{n}")));
        }
        if kinds[id].is_some() {
            return Err(Error::ingest(path, *line, format!("duplicate node id {id}")));
        }
        let kind = match fields[1].trim().to_ascii_lowercase().as_str() {
            "doc" | "document" => NodeKind::Document,
            "user" => NodeKind::User,
            other => return Err(Error::ingest(path, *line, format!("unknown node kind {other:?}"))),
        };
        let label = fields.get(2).map(|s| s.trim()).filter(|s| !s.is_empty());
        match (kind, label) {
            (NodeKind::Document, Some(s)) => labels[id] = Some(parse_field(path, *line, "label", s)?),
            (NodeKind::Document, None) => {
                return Err(Error::ingest(path, *line, "document without label"));
            }
            (NodeKind::User, Some(_)) => {
                return Err(Error::ingest(path, *line, "user nodes carry no label"));
            }
            (NodeKind::User, None) => {}
        }
        kinds[id] = Some(kind);
    }
    let kinds = kinds.into_iter().map(|k| k.expect("dense ids cover 0..n")).collect();
    Ok((kinds, labels))
}

fn read_edges(path: &Path, n: usize) -> Result<Vec<(NodeId, NodeId)>> {
    let mut edges = Vec::new();
    for (line, text) in data_lines(path)? {
        let mut it = text.split('\t');
        let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
            return Err(Error::ingest(path, line, "expected src<TAB>dst"));
        };
        let a: usize = parse_field(path, line, "source id", a)?;
        let b: usize = parse_field(path, line, "target id", b)?;
        if a >= n || b >= n {
            return Err(Error::ingest(path, line, format!("edge ({a}, {b}) references unknown node")));
        }
        edges.push((NodeId::from(a), NodeId::from(b)));
    }
    Ok(edges)
}

/// Reads a binary feature matrix, returning `(rows, cols, row-major values)`.
pub fn read_features(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::ingest(path, 0, e.to_string()))?;
    if bytes.len() < HEADER_LEN || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::ingest(path, 0, "missing MGBF header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (rows, cols) = (word(4), word(8));
    let expected = HEADER_LEN + rows * cols * 4;
    if bytes.len() != expected {
        return Err(Error::ingest(
            path,
            0,
            format!("{rows}x{cols} matrix needs {expected} bytes, file has {}", bytes.len()),
        ));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, cols, values))
}

pub fn write_features(path: &Path, rows: usize, cols: usize, values: &[f32]) -> Result<()> {
    assert_eq!(values.len(), rows * cols);
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(FEATURE_MAGIC)?;
    out.write_all(&(rows as u32).to_le_bytes())?;
    out.write_all(&(cols as u32).to_le_bytes())?;
    out.write_all(&0u32.to_le_bytes())?;
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Loads a graph from node, edge and feature files. `num_classes` defaults
/// to `max(label) + 1` (at least 2).
pub fn read_graph(
    nodes: &Path,
    edges: &Path,
    features: &Path,
    num_classes: Option<usize>,
) -> Result<SocialGraph> {
    let (kinds, labels) = read_nodes(nodes)?;
    let edges = read_edges(edges, kinds.len())?;
    let (rows, cols, values) = read_features(features)?;
    let doc_labels: Vec<usize> = labels.into_iter().flatten().collect();
    if rows != doc_labels.len() {
        return Err(Error::ingest(
            features,
            0,
            format!("{rows} feature rows for {} documents", doc_labels.len()),
        ));
    }
    let inferred = doc_labels.iter().max().map_or(2, |m| (m + 1).max(2));
    let num_classes = num_classes.unwrap_or(inferred);
    let values = values.into_iter().map(f64::from).collect();
    SocialGraph::new(kinds, edges, values, cols, doc_labels, num_classes)
        .map_err(|e| Error::ingest(nodes, 0, e.to_string()))
}

/// Writes `g` in the ingestion format. Features are narrowed to `f32`.
pub fn write_graph(g: &SocialGraph, nodes: &Path, edges: &Path, features: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(nodes)?);
    for i in 0..g.num_nodes() {
        let v = NodeId::from(i);
        match g.label(v) {
            Some(y) => writeln!(out, "{i}\tdoc\t{y}")?,
            None => writeln!(out, "{i}\tuser")?,
        }
    }
    out.flush()?;
    let mut out = BufWriter::new(fs::File::create(edges)?);
    for (u, v) in g.edges() {
        writeln!(out, "{}\t{}", u.0, v.0)?;
    }
    out.flush()?;
    let values: Vec<f32> = g.feature_matrix().iter().map(|&x| x as f32).collect();
    write_features(features, g.num_docs(), g.feature_dim(), &values)
}
