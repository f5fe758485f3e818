//! Dataset directories.
//!
//! ```text
//! edges.tsv            node_a <TAB> node_b
//! labels.tsv           node_id <TAB> label   (-1 = unlabeled)
//! features_text.bin    binary matrix
//! features_visual.bin  binary matrix
//! splits.json          optional node partition
//! hops/                propagated features, written by `precompute`
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::matrix::{read_matrix, write_matrix};
use crate::error::{Error, Result};
use crate::graphprep::{pad_features, FeatureMatrix, HopStack, Modality};
use crate::trainer::{class_count, Dataset, Prepared, SplitSpec};

pub const EDGES: &str = "edges.tsv";
pub const LABELS: &str = "labels.tsv";
pub const TEXT: &str = "features_text.bin";
pub const VISUAL: &str = "features_visual.bin";
pub const SPLITS: &str = "splits.json";
pub const HOPS: &str = "hops";
const HOPS_META: &str = "meta.json";

/// Self features and labels; everything except the graph.
#[derive(Debug, Clone)]
pub struct NodeData {
    pub x_t: FeatureMatrix,
    pub x_v: FeatureMatrix,
    pub labels: Vec<i64>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, s: &str) -> Result<()> {
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Parses tab-separated integer pairs, skipping blank lines and `#` comments.
fn parse_pairs(path: &Path, field: &str) -> Result<Vec<(i64, i64)>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |why: &str| Error::input(format!("{field} line {}", no + 1), format!("{why}: `{line}`"));
        let mut cols = line.split('\t');
        let (Some(a), Some(b), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(bad("expected two tab-separated columns"));
        };
        let a = a.trim().parse::<i64>().map_err(|_| bad("not an integer"))?;
        let b = b.trim().parse::<i64>().map_err(|_| bad("not an integer"))?;
        out.push((a, b));
    }
    Ok(out)
}

pub fn read_labels(path: &Path) -> Result<Vec<i64>> {
    let pairs = parse_pairs(path, LABELS)?;
    let n = pairs.len();
    let mut labels = vec![None; n];
    for (id, y) in pairs {
        if id < 0 || id as usize >= n {
            return Err(Error::input(LABELS, format!("node id {id} outside [0, {n})")));
        }
        if y < -1 {
            return Err(Error::input(LABELS, format!("label {y} for node {id}; use -1 for unlabeled")));
        }
        if labels[id as usize].replace(y).is_some() {
            return Err(Error::input(LABELS, format!("node {id} listed twice")));
        }
    }
    Ok(labels.into_iter().map(|y| y.expect("ids dense by counting")).collect())
}

pub fn write_labels(path: &Path, labels: &[i64]) -> Result<()> {
    let s: String = labels.iter().enumerate().map(|(i, y)| format!("{i}\t{y}\n")).collect();
    write_text(path, &s)
}

pub fn read_edges(path: &Path, n: usize) -> Result<Vec<(usize, usize)>> {
    parse_pairs(path, EDGES)?
        .into_iter()
        .map(|(a, b)| {
            if a < 0 || b < 0 || a as usize >= n || b as usize >= n {
                Err(Error::input(EDGES, format!("edge ({a}, {b}) outside [0, {n})")))
            } else {
                Ok((a as usize, b as usize))
            }
        })
        .collect()
}

pub fn write_edges(path: &Path, edges: &[(usize, usize)]) -> Result<()> {
    let s: String = edges.iter().map(|(a, b)| format!("{a}\t{b}\n")).collect();
    write_text(path, &s)
}

pub fn read_nodes(dir: &Path) -> Result<NodeData> {
    let labels = read_labels(&dir.join(LABELS))?;
    let x_t = read_matrix(&dir.join(TEXT), Modality::Text)?;
    let x_v = read_matrix(&dir.join(VISUAL), Modality::Visual)?;
    for (name, m) in [(TEXT, &x_t), (VISUAL, &x_v)] {
        if m.n != labels.len() {
            return Err(Error::input(name, format!("{} rows for {} labeled nodes", m.n, labels.len())));
        }
    }
    Ok(NodeData { x_t, x_v, labels })
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let nodes = read_nodes(dir)?;
    let edges = read_edges(&dir.join(EDGES), nodes.labels.len())?;
    Ok(Dataset {
        x_t: nodes.x_t,
        x_v: nodes.x_v,
        labels: nodes.labels,
        edges,
    })
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    create_dir(dir)?;
    write_edges(&dir.join(EDGES), &data.edges)?;
    write_labels(&dir.join(LABELS), &data.labels)?;
    write_matrix(&dir.join(TEXT), &data.x_t)?;
    write_matrix(&dir.join(VISUAL), &data.x_v)
}

pub fn read_splits(path: &Path, n: usize) -> Result<SplitSpec> {
    let split: SplitSpec =
        serde_json::from_str(&read_text(path)?).map_err(|e| Error::input(SPLITS, e.to_string()))?;
    if split.n != n {
        return Err(Error::input(SPLITS, format!("covers {} nodes, dataset has {n}", split.n)));
    }
    split.validate()?;
    Ok(split)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    s.push('\n');
    write_text(path, &s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct HopsMeta {
    k: usize,
    d_in: usize,
}

fn hop_path(dir: &Path, m: Modality, k: usize) -> PathBuf {
    dir.join(HOPS).join(format!("{}_hop{k}.bin", m.as_str()))
}

/// Writes `hops/<modality>_hop<k>.bin` for every hop of both stacks.
pub fn write_hops(dir: &Path, prep: &Prepared) -> Result<()> {
    create_dir(&dir.join(HOPS))?;
    for stack in [&prep.stack_t, &prep.stack_v] {
        for k in 1..=stack.k() {
            write_matrix(&hop_path(dir, stack.modality, k), stack.hop(k))?;
        }
    }
    write_json(
        &dir.join(HOPS).join(HOPS_META),
        &HopsMeta {
            k: prep.k(),
            d_in: prep.d_in(),
        },
    )
}

/// Hop count of the stored stacks, if any.
pub fn stored_hops(dir: &Path) -> Result<Option<usize>> {
    let path = dir.join(HOPS).join(HOPS_META);
    if !path.exists() {
        return Ok(None);
    }
    let meta: HopsMeta =
        serde_json::from_str(&read_text(&path)?).map_err(|e| Error::format(&path, e.to_string()))?;
    Ok(Some(meta.k))
}

/// Training inputs from self features and stored hops. Never opens
/// `edges.tsv`.
pub fn read_prepared(dir: &Path, nodes: &NodeData) -> Result<Prepared> {
    let meta_path = dir.join(HOPS).join(HOPS_META);
    let meta: HopsMeta = serde_json::from_str(&read_text(&meta_path)?)
        .map_err(|e| Error::format(&meta_path, e.to_string()))?;
    let n = nodes.labels.len();
    let stack = |m: Modality| -> Result<HopStack> {
        let hops = (1..=meta.k)
            .map(|k| {
                let path = hop_path(dir, m, k);
                let h = read_matrix(&path, m)?;
                if (h.n, h.d) != (n, meta.d_in) {
                    return Err(Error::input(
                        path.display().to_string(),
                        format!("{}x{} hop, expected {n}x{}", h.n, h.d, meta.d_in),
                    ));
                }
                Ok(h)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(HopStack { modality: m, hops })
    };
    let stack_t = stack(Modality::Text)?;
    let stack_v = stack(Modality::Visual)?;
    Ok(Prepared {
        x_t: pad_features(&nodes.x_t, meta.d_in)?,
        x_v: pad_features(&nodes.x_v, meta.d_in)?,
        stack_t,
        stack_v,
        labels: nodes.labels.clone(),
        classes: class_count(&nodes.labels),
    })
}
