//! Text formats for datasets, coefficients and experiment tables.
//!
//! Floats are written with 17 significant digits so that every value reads
//! back bit-exactly. Node and feature indices are 0-based; classes are
//! 1-based in files and 0-based in memory.
//!
//! A dataset bundle is a TOML manifest:
//!
//! ```toml
//! n = 2
//! d = 1
//! classes = 2
//! edges = "edges.txt"        # `u<TAB>v` lines (space or comma also accepted)
//! features = "features.csv"  # dense rows, or `i,j,value` triplets
//! feature_format = "dense"   # or "triplet"
//! labels = "labels.csv"      # `node,class` lines, every node exactly once
//! mask = "mask.txt"          # optional: visible node ids, one per line
//! ```
//!
//! Relative paths are resolved against the manifest's directory. Blank lines
//! and lines starting with `#` are skipped in every data file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcr::{CoefficientMatrix, Dataset, Labels};
use crate::graph::Graph;
use crate::sim::ExperimentTable;

/// Layout of a feature file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureFormat {
    #[default]
    Dense,
    Triplet,
}

/// Paths and declared shape of a dataset on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetBundle {
    pub n: usize,
    pub d: usize,
    pub classes: usize,
    pub edges: PathBuf,
    pub features: PathBuf,
    #[serde(default)]
    pub feature_format: FeatureFormat,
    pub labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
}

impl DatasetBundle {
    /// Reads a manifest and resolves its relative paths.
    pub fn from_manifest(path: &Path) -> Result<Self> {
        let text = read(path)?;
        let mut bundle: DatasetBundle = toml::from_str(&text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::parse(path, line, e.message())
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut bundle.edges);
        resolve(&mut bundle.features);
        resolve(&mut bundle.labels);
        if let Some(m) = bundle.mask.as_mut() {
            resolve(m);
        }
        Ok(bundle)
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn fields(line: &str) -> Vec<&str> {
    line.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|f| !f.is_empty())
        .collect()
}

fn parse_index(path: &Path, line: usize, field: &str, what: &str, bound: usize) -> Result<usize> {
    let v: usize = field
        .parse()
        .map_err(|_| Error::parse(path, line, format!("invalid {what} '{field}'")))?;
    if v >= bound {
        return Err(Error::parse(path, line, format!("{what} {v} out of range 0..{bound}")));
    }
    Ok(v)
}

fn parse_float(path: &Path, line: usize, field: &str) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| Error::parse(path, line, format!("invalid number '{field}'")))?;
    if !v.is_finite() {
        return Err(Error::parse(path, line, format!("non-finite value '{field}'")));
    }
    Ok(v)
}

fn expect_fields<'a>(path: &Path, line: usize, text: &'a str, count: usize) -> Result<Vec<&'a str>> {
    let f = fields(text);
    if f.len() != count {
        return Err(Error::parse(
            path,
            line,
            format!("expected {count} fields, found {}", f.len()),
        ));
    }
    Ok(f)
}

/// Reads an undirected edge list over `n` nodes.
pub fn load_edges(path: &Path, n: usize) -> Result<Graph> {
    let text = read(path)?;
    let mut seen = std::collections::HashSet::new();
    let mut edges = Vec::new();
    for (line, l) in data_lines(&text) {
        let f = expect_fields(path, line, l, 2)?;
        let u = parse_index(path, line, f[0], "node", n)?;
        let v = parse_index(path, line, f[1], "node", n)?;
        if u == v {
            return Err(Error::parse(path, line, format!("self-loop at node {u}")));
        }
        if !seen.insert((u.min(v), u.max(v))) {
            return Err(Error::parse(path, line, format!("duplicate edge {u}-{v}")));
        }
        edges.push((u, v));
    }
    Graph::from_edges(n, edges)
}

pub fn save_edges(graph: &Graph, path: &Path) -> Result<()> {
    let mut out = String::new();
    for &(u, v) in graph.edges() {
        writeln!(out, "{u}\t{v}").unwrap();
    }
    write(path, &out)
}

pub fn load_dense_features(path: &Path, n: usize, d: usize) -> Result<Array2<f64>> {
    let text = read(path)?;
    let mut x = Array2::zeros((n, d));
    let mut row = 0;
    for (line, l) in data_lines(&text) {
        if row == n {
            return Err(Error::parse(path, line, format!("more than {n} feature rows")));
        }
        let f: Vec<&str> = l.split(',').map(str::trim).collect();
        if f.len() != d {
            return Err(Error::parse(path, line, format!("expected {d} values, found {}", f.len())));
        }
        for (j, v) in f.iter().enumerate() {
            x[[row, j]] = parse_float(path, line, v)?;
        }
        row += 1;
    }
    if row != n {
        return Err(Error::DimensionMismatch {
            context: "feature rows",
            expected: n,
            found: row,
        });
    }
    Ok(x)
}

pub fn load_triplet_features(path: &Path, n: usize, d: usize) -> Result<Array2<f64>> {
    let text = read(path)?;
    let mut x = Array2::zeros((n, d));
    let mut seen = std::collections::HashSet::new();
    for (line, l) in data_lines(&text) {
        let f = expect_fields(path, line, l, 3)?;
        let i = parse_index(path, line, f[0], "node", n)?;
        let j = parse_index(path, line, f[1], "feature", d)?;
        if !seen.insert((i, j)) {
            return Err(Error::parse(path, line, format!("duplicate entry ({i}, {j})")));
        }
        x[[i, j]] = parse_float(path, line, f[2])?;
    }
    Ok(x)
}

/// Reads `node,class` lines with classes `1..=C`; every node must appear once.
pub fn load_labels(path: &Path, n: usize, classes: usize) -> Result<Labels> {
    let text = read(path)?;
    let mut out: Vec<Option<usize>> = vec![None; n];
    for (line, l) in data_lines(&text) {
        let f = expect_fields(path, line, l, 2)?;
        let i = parse_index(path, line, f[0], "node", n)?;
        let c: usize = f[1]
            .parse()
            .map_err(|_| Error::parse(path, line, format!("invalid class '{}'", f[1])))?;
        if c == 0 || c > classes {
            return Err(Error::parse(path, line, format!("class {c} out of range 1..={classes}")));
        }
        if out[i].replace(c - 1).is_some() {
            return Err(Error::parse(path, line, format!("node {i} labelled twice")));
        }
    }
    let labels = out
        .into_iter()
        .enumerate()
        .map(|(i, c)| c.ok_or_else(|| Error::InvalidArgument(format!("{}: node {i} has no label", path.display()))))
        .collect::<Result<Vec<_>>>()?;
    Labels::new(labels, classes)
}

/// Reads visible node ids.
pub fn load_mask(path: &Path, n: usize) -> Result<Vec<bool>> {
    let text = read(path)?;
    let mut mask = vec![false; n];
    for (line, l) in data_lines(&text) {
        let f = expect_fields(path, line, l, 1)?;
        let i = parse_index(path, line, f[0], "node", n)?;
        if std::mem::replace(&mut mask[i], true) {
            return Err(Error::parse(path, line, format!("node {i} listed twice")));
        }
    }
    Ok(mask)
}

/// Reads a node-id list (used for evaluation test sets).
pub fn load_node_list(path: &Path, n: usize) -> Result<Vec<usize>> {
    let mask = load_mask(path, n)?;
    Ok((0..n).filter(|&i| mask[i]).collect())
}

pub fn load_dataset(bundle: &DatasetBundle) -> Result<Dataset> {
    if bundle.classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {}", bundle.classes)));
    }
    let graph = load_edges(&bundle.edges, bundle.n)?;
    let features = match bundle.feature_format {
        FeatureFormat::Dense => load_dense_features(&bundle.features, bundle.n, bundle.d)?,
        FeatureFormat::Triplet => load_triplet_features(&bundle.features, bundle.n, bundle.d)?,
    };
    let labels = load_labels(&bundle.labels, bundle.n, bundle.classes)?;
    let mask = match &bundle.mask {
        Some(p) => load_mask(p, bundle.n)?,
        None => vec![true; bundle.n],
    };
    Dataset::new(graph, features, labels, mask)
}

/// Loads the bundle described by the manifest at `path`.
pub fn load_dataset_manifest(path: &Path) -> Result<Dataset> {
    load_dataset(&DatasetBundle::from_manifest(path)?)
}

fn float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `bundle.toml` plus dense features, edges, labels and mask into
/// `dir` and returns the manifest path.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_edges(&dataset.graph, &dir.join("edges.txt"))?;
    let mut feats = String::new();
    for row in dataset.features.rows() {
        let cells: Vec<String> = row.iter().map(|&v| float(v)).collect();
        feats.push_str(&cells.join(","));
        feats.push('\n');
    }
    write(&dir.join("features.csv"), &feats)?;
    let mut labels = String::new();
    for (i, &c) in dataset.labels.as_slice().iter().enumerate() {
        writeln!(labels, "{i},{}", c + 1).unwrap();
    }
    write(&dir.join("labels.csv"), &labels)?;
    let mut mask = String::new();
    for (i, _) in dataset.mask.iter().enumerate().filter(|(_, &m)| m) {
        writeln!(mask, "{i}").unwrap();
    }
    write(&dir.join("mask.txt"), &mask)?;
    let bundle = DatasetBundle {
        n: dataset.num_nodes(),
        d: dataset.num_features(),
        classes: dataset.num_classes(),
        edges: "edges.txt".into(),
        features: "features.csv".into(),
        feature_format: FeatureFormat::Dense,
        labels: "labels.csv".into(),
        mask: Some("mask.txt".into()),
    };
    let manifest = dir.join("bundle.toml");
    write(&manifest, &toml::to_string(&bundle).expect("bundle serializes"))?;
    Ok(manifest)
}

/// Text form of a coefficient matrix: shape comment, header, nonzero rows.
pub fn format_coefficients(b: &CoefficientMatrix) -> String {
    let mut out = format!("# d={} C={}\nfeature,class,value\n", b.num_features(), b.num_classes());
    for ((j, c), &v) in b.values().indexed_iter() {
        if v != 0.0 {
            writeln!(out, "{j},{},{}", c + 1, float(v)).unwrap();
        }
    }
    out
}

pub fn save_coefficients(b: &CoefficientMatrix, path: &Path) -> Result<()> {
    write(path, &format_coefficients(b))
}

pub fn load_coefficients(path: &Path) -> Result<CoefficientMatrix> {
    let text = read(path)?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (d, classes) = match lines.next() {
        Some((line, l)) => parse_shape(l).ok_or_else(|| Error::parse(path, line, "expected '# d=<d> C=<C>'"))?,
        None => return Err(Error::parse(path, 1, "empty coefficient file")),
    };
    if classes < 2 {
        return Err(Error::parse(path, 1, "C must be at least 2"));
    }
    match lines.next() {
        Some((_, "feature,class,value")) => {}
        Some((line, _)) => return Err(Error::parse(path, line, "expected header 'feature,class,value'")),
        None => return Err(Error::parse(path, 2, "missing header")),
    }
    let mut values = Array2::zeros((d, classes - 1));
    let mut seen = std::collections::HashSet::new();
    for (line, l) in lines.filter(|(_, l)| !l.is_empty()) {
        let f: Vec<&str> = l.split(',').map(str::trim).collect();
        if f.len() != 3 {
            return Err(Error::parse(path, line, format!("expected 3 fields, found {}", f.len())));
        }
        let j = parse_index(path, line, f[0], "feature", d)?;
        let c: usize = f[1]
            .parse()
            .map_err(|_| Error::parse(path, line, format!("invalid class '{}'", f[1])))?;
        if c == 0 || c >= classes {
            return Err(Error::parse(path, line, format!("class {c} out of range 1..{classes}")));
        }
        if !seen.insert((j, c)) {
            return Err(Error::parse(path, line, format!("duplicate entry ({j}, {c})")));
        }
        values[[j, c - 1]] = parse_float(path, line, f[2])?;
    }
    CoefficientMatrix::new(values, classes)
}

fn parse_shape(line: &str) -> Option<(usize, usize)> {
    let rest = line.strip_prefix('#')?.trim();
    let mut parts = rest.split_whitespace();
    let d = parts.next()?.strip_prefix("d=")?.parse().ok()?;
    let c = parts.next()?.strip_prefix("C=")?.parse().ok()?;
    parts.next().is_none().then_some((d, c))
}

pub const TABLE_HEADER: &str = "scenario_param,value,method,replicate,metric,metric_value";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Table CSV. Failed cells appear with metric `error` and the message as
/// value. Rows are sorted lexicographically.
pub fn format_table(table: &ExperimentTable) -> String {
    let mut rows: Vec<String> = table
        .rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{}",
                csv_field(&r.scenario_param),
                csv_field(&r.value),
                csv_field(&r.method),
                r.replicate,
                csv_field(&r.metric),
                float(r.metric_value)
            )
        })
        .chain(table.failures.iter().map(|f| {
            format!(
                "{},{},{},{},error,{}",
                csv_field(&f.scenario_param),
                csv_field(&f.value),
                csv_field(&f.method),
                f.replicate,
                csv_field(&f.message)
            )
        }))
        .collect();
    rows.sort();
    let mut out = String::from(TABLE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

pub fn save_table(table: &ExperimentTable, path: &Path) -> Result<()> {
    write(path, &format_table(table))
}
