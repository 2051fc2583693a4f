//! Dataset directories, synthetic graph generation and result export.
//!
//! A dataset directory holds tab-separated UTF-8 files:
//!
//! * `meta.tsv`: `node_type <name> <count> <feature_dim>`,
//!   `relation <name> <src_type> <dst_type>` and optionally
//!   `time_unit <unit>`, one declaration per line, in order.
//! * `nodes_<type>.tsv`: `node_id t_start t_end features...`, where a
//!   missing time or a missing feature vector is written as `-`.
//! * `edges_<relation>.tsv`: `src_type src_id dst_type dst_id t_start t_end`.
//! * `labels_<name>.tsv`: `type id label`.
//!
//! Lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::ClusterState;
use crate::eval::{LabelKind, LabelSet};
use crate::graph::{GraphBuilder, GraphError, MultimodalGraph, NodeType, RelationType, TimeRange};
use crate::numeric::Matrix;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Parse { file: String, line: usize, message: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    fs::write(path, text).map_err(io_err(path))
}

/// A graph plus its named label sets.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub graph: MultimodalGraph,
    pub labels: BTreeMap<String, LabelSet>,
}

struct Lines<'a> {
    file: String,
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn new(file: &str, text: &'a str) -> Lines<'a> {
        Lines {
            file: file.to_string(),
            iter: text.lines().enumerate(),
        }
    }

    fn error(&self, line: usize, message: impl Into<String>) -> IoError {
        IoError::Parse {
            file: self.file.clone(),
            line,
            message: message.into(),
        }
    }
}

impl<'a> Iterator for Lines<'a> {
    /// 1-based line number and fields.
    type Item = (usize, Vec<&'a str>);

    fn next(&mut self) -> Option<Self::Item> {
        for (i, line) in self.iter.by_ref() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            return Some((i + 1, line.split('\t').collect()));
        }
        None
    }
}

fn parse<T: std::str::FromStr>(lines: &Lines, line: usize, field: &str, what: &str) -> Result<T, IoError>
where
    T::Err: std::fmt::Display,
{
    field
        .parse::<T>()
        .map_err(|e| lines.error(line, format!("bad {what} '{field}': {e}")))
}

fn parse_time(lines: &Lines, line: usize, start: &str, end: &str) -> Result<Option<TimeRange>, IoError> {
    match (start, end) {
        ("-", "-") => Ok(None),
        ("-", _) | (_, "-") => Err(lines.error(line, "time range needs both ends or neither")),
        (s, e) => {
            let s: i64 = parse(lines, line, s, "time")?;
            let e: i64 = parse(lines, line, e, "time")?;
            TimeRange::new(s, e).map(Some).map_err(|err| lines.error(line, err.to_string()))
        }
    }
}

fn type_named(names: &[String], lines: &Lines, line: usize, name: &str) -> Result<NodeType, IoError> {
    names
        .iter()
        .position(|n| n == name)
        .map(|i| NodeType(i as u16))
        .ok_or_else(|| lines.error(line, format!("unknown node type '{name}'")))
}

/// Reads a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset, IoError> {
    let meta_text = read_text(&dir.join("meta.tsv"))?;
    let meta = Lines::new("meta.tsv", &meta_text);
    let mut b = GraphBuilder::new();
    let mut types: Vec<(String, usize, usize)> = Vec::new();
    let mut type_names: Vec<String> = Vec::new();
    let mut relations: Vec<(String, NodeType, NodeType)> = Vec::new();
    let rows: Vec<(usize, Vec<&str>)> = Lines::new("meta.tsv", &meta_text).collect();
    for (line, f) in rows {
        match f.as_slice() {
            ["node_type", name, count, dim] => {
                let count: usize = parse(&meta, line, count, "count")?;
                let dim: usize = parse(&meta, line, dim, "feature dimension")?;
                b.add_node_type(name, count, dim)?;
                types.push((name.to_string(), count, dim));
                type_names.push(name.to_string());
            }
            ["relation", name, src, dst] => {
                let s = type_named(&type_names, &meta, line, src)?;
                let d = type_named(&type_names, &meta, line, dst)?;
                b.add_relation(name, s, d)?;
                relations.push((name.to_string(), s, d));
            }
            ["time_unit", unit] => b.set_time_unit(unit),
            _ => return Err(meta.error(line, format!("unrecognized declaration '{}'", f.join("\t")))),
        }
    }

    for (t, (name, count, dim)) in types.iter().enumerate() {
        let file = format!("nodes_{name}.tsv");
        let path = dir.join(&file);
        if !path.exists() {
            continue;
        }
        let text = read_text(&path)?;
        let lines = Lines::new(&file, &text);
        let rows: Vec<(usize, Vec<&str>)> = Lines::new(&file, &text).collect();
        for (line, f) in rows {
            if f.len() < 4 {
                return Err(lines.error(line, "expected node_id, t_start, t_end and features"));
            }
            let id: usize = parse(&lines, line, f[0], "node id")?;
            if id >= *count {
                return Err(lines.error(line, format!("node id {id} out of range for {count} nodes")));
            }
            let nt = NodeType(t as u16);
            if let Some(time) = parse_time(&lines, line, f[1], f[2])? {
                b.set_node_time(nt, id, time)?;
            }
            let feats = &f[3..];
            if feats == ["-"] {
                continue;
            }
            if feats.len() != *dim {
                return Err(lines.error(line, format!("expected {dim} feature columns, found {}", feats.len())));
            }
            let x = feats
                .iter()
                .map(|v| parse::<f64>(&lines, line, v, "feature"))
                .collect::<Result<Vec<_>, _>>()?;
            b.set_node_features(nt, id, x)?;
        }
    }

    for (r, (name, rs, rd)) in relations.iter().enumerate() {
        let file = format!("edges_{name}.tsv");
        let path = dir.join(&file);
        if !path.exists() {
            continue;
        }
        let text = read_text(&path)?;
        let lines = Lines::new(&file, &text);
        let rows: Vec<(usize, Vec<&str>)> = Lines::new(&file, &text).collect();
        for (line, f) in rows {
            let [st, sid, dt, did, ts, te] = f.as_slice() else {
                return Err(lines.error(line, "expected 6 columns"));
            };
            let s = type_named(&type_names, &lines, line, st)?;
            let d = type_named(&type_names, &lines, line, dt)?;
            let src: usize = parse(&lines, line, sid, "source id")?;
            let dst: usize = parse(&lines, line, did, "target id")?;
            if (s, d) != (*rs, *rd) {
                return Err(lines.error(line, format!("relation '{name}' connects other node types")));
            }
            if src >= types[s.index()].1 || dst >= types[d.index()].1 {
                return Err(lines.error(line, "edge endpoint out of range"));
            }
            let time = parse_time(&lines, line, ts, te)?;
            b.add_edge(RelationType(r as u16), src, dst, time)
                .map_err(|e| lines.error(line, e.to_string()))?;
        }
    }
    let graph = b.build()?;

    let mut labels = BTreeMap::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for path in entries {
        let Some(fname) = path.file_name().and_then(|f| f.to_str()) else { continue };
        let Some(label_name) = fname.strip_prefix("labels_").and_then(|f| f.strip_suffix(".tsv")) else {
            continue;
        };
        let text = read_text(&path)?;
        let lines = Lines::new(fname, &text);
        let rows: Vec<(usize, Vec<&str>)> = Lines::new(fname, &text).collect();
        let mut pairs = Vec::new();
        for (line, f) in rows {
            let [t, id, label] = f.as_slice() else {
                return Err(lines.error(line, "expected type, id and label"));
            };
            let nt = graph
                .node_type_by_name(t)
                .ok_or_else(|| lines.error(line, format!("unknown node type '{t}'")))?;
            let id: usize = parse(&lines, line, id, "node id")?;
            if id >= graph.node_count(nt) {
                return Err(lines.error(line, format!("node id {id} out of range")));
            }
            pairs.push((graph.global_id(nt, id), label.to_string()));
        }
        let kind = if label_name.contains("time") {
            LabelKind::Temporal
        } else {
            LabelKind::GroundTruth
        };
        labels.insert(label_name.to_string(), LabelSet::from_named(kind, pairs));
    }
    Ok(Dataset { graph, labels })
}

fn fmt_time(t: Option<TimeRange>) -> String {
    match t {
        Some(t) => format!("{}\t{}", t.start, t.end),
        None => "-\t-".to_string(),
    }
}

/// Writes `data` in the directory format, creating `dir` if needed.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let g = &data.graph;
    let mut meta = String::new();
    for info in g.node_types() {
        writeln!(meta, "node_type\t{}\t{}\t{}", info.name, info.count, info.feature_dim).unwrap();
    }
    for info in g.relations() {
        let (s, d) = (&g.node_types()[info.src.index()].name, &g.node_types()[info.dst.index()].name);
        writeln!(meta, "relation\t{}\t{s}\t{d}", info.name).unwrap();
    }
    if let Some(unit) = g.time_unit() {
        writeln!(meta, "time_unit\t{unit}").unwrap();
    }
    write_text(&dir.join("meta.tsv"), &meta)?;

    for (t, info) in g.node_types().iter().enumerate() {
        let mut out = String::new();
        for local in 0..info.count {
            let v = g.global_id(NodeType(t as u16), local);
            let feats = match g.feature(v) {
                Some(x) => x.iter().map(|f| f.to_string()).collect::<Vec<_>>().join("\t"),
                None => "-".to_string(),
            };
            writeln!(out, "{local}\t{}\t{feats}", fmt_time(g.node_time(v))).unwrap();
        }
        write_text(&dir.join(format!("nodes_{}.tsv", info.name)), &out)?;
    }

    for (r, info) in g.relations().iter().enumerate() {
        let rel = RelationType(r as u16);
        let (sn, dn) = (&g.node_types()[info.src.index()].name, &g.node_types()[info.dst.index()].name);
        let mut out = String::new();
        for i in 0..g.relation_edge_count(rel) {
            let (u, v) = g.edge(rel, i);
            writeln!(out, "{sn}\t{}\t{dn}\t{}\t{}", g.local_id(u), g.local_id(v), fmt_time(g.edge_time(rel, i))).unwrap();
        }
        write_text(&dir.join(format!("edges_{}.tsv", info.name)), &out)?;
    }

    for (name, set) in &data.labels {
        let mut out = String::new();
        for (&v, &y) in set.nodes.iter().zip(&set.labels) {
            let tn = &g.node_types()[g.node_type(v).index()].name;
            writeln!(out, "{tn}\t{}\t{}", g.local_id(v), set.vocab[y]).unwrap();
        }
        write_text(&dir.join(format!("labels_{name}.tsv")), &out)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypeConfig {
    pub name: String,
    pub count: usize,
    pub feature_dim: usize,
    /// Fraction of nodes written without features.
    #[serde(default)]
    pub missing_features: f64,
    /// Whether nodes of this type carry timestamps.
    #[serde(default = "yes")]
    pub timestamped: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationConfig {
    pub name: String,
    pub src: String,
    pub dst: String,
    /// Edge probability between nodes of the same block.
    pub p_in: f64,
    /// Edge probability between nodes of different blocks.
    pub p_out: f64,
}

/// Stochastic block model with block-dependent features and time bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub node_types: Vec<TypeConfig>,
    pub relations: Vec<RelationConfig>,
    pub blocks: usize,
    pub time_bins: usize,
    /// Total number of time ticks.
    pub time_span: i64,
    /// Draw time bins independently of blocks; otherwise bin = block mod bins.
    pub independent_time: bool,
    /// Distance scale of the per-block feature means (unit noise).
    pub feature_separation: f64,
}

impl SyntheticConfig {
    /// One node type, one relation, `n` nodes.
    pub fn sbm(n: usize, blocks: usize, p_in: f64, p_out: f64, time_bins: usize) -> SyntheticConfig {
        SyntheticConfig {
            node_types: vec![TypeConfig {
                name: "node".into(),
                count: n,
                feature_dim: 0,
                missing_features: 0.0,
                timestamped: true,
            }],
            relations: vec![RelationConfig {
                name: "link".into(),
                src: "node".into(),
                dst: "node".into(),
                p_in,
                p_out,
            }],
            blocks,
            time_bins,
            time_span: 1000,
            independent_time: true,
            feature_separation: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), IoError> {
        let bad = |m: String| Err(IoError::Invalid(m));
        if self.blocks == 0 || self.time_bins == 0 {
            return bad("blocks and time_bins must be positive".into());
        }
        if self.time_span < self.time_bins as i64 {
            return bad("time_span must be at least time_bins".into());
        }
        for t in &self.node_types {
            if !(0.0..=1.0).contains(&t.missing_features) {
                return bad(format!("missing_features of '{}' outside [0, 1]", t.name));
            }
        }
        for r in &self.relations {
            if !(0.0..=1.0).contains(&r.p_in) || !(0.0..=1.0).contains(&r.p_out) {
                return bad(format!("edge probabilities of '{}' outside [0, 1]", r.name));
            }
            if r.p_in <= r.p_out {
                log::warn!("relation '{}' has p_in <= p_out; blocks will not be separable", r.name);
            }
            for end in [&r.src, &r.dst] {
                if !self.node_types.iter().any(|t| &t.name == end) {
                    return bad(format!("relation '{}' names unknown type '{end}'", r.name));
                }
            }
        }
        Ok(())
    }
}

/// Generated dataset with its block and time-bin labels (`block`,
/// `time`) attached.
pub fn gen_synthetic<R: Rng>(cfg: &SyntheticConfig, rng: &mut R) -> Result<Dataset, IoError> {
    cfg.validate()?;
    let mut b = GraphBuilder::new();
    let mut block_of: Vec<Vec<usize>> = Vec::new();
    let mut bin_of: Vec<Vec<usize>> = Vec::new();
    for t in &cfg.node_types {
        let nt = b.add_node_type(&t.name, t.count, t.feature_dim)?;
        let mut blocks: Vec<usize> = (0..t.count).map(|i| i * cfg.blocks / t.count.max(1)).collect();
        blocks.shuffle(rng);
        let bins: Vec<usize> = blocks
            .iter()
            .map(|&k| {
                if cfg.independent_time {
                    rng.random_range(0..cfg.time_bins)
                } else {
                    k % cfg.time_bins
                }
            })
            .collect();
        let width = cfg.time_span / cfg.time_bins as i64;
        if t.timestamped {
            for (i, &bin) in bins.iter().enumerate() {
                let tick = bin as i64 * width + rng.random_range(0..width);
                b.set_node_time(nt, i, TimeRange::point(tick))?;
            }
        }
        if t.feature_dim > 0 {
            let means: Vec<Vec<f64>> = (0..cfg.blocks)
                .map(|_| {
                    (0..t.feature_dim)
                        .map(|_| {
                            let e: f64 = StandardNormal.sample(rng);
                            cfg.feature_separation * e
                        })
                        .collect::<Vec<f64>>()
                })
                .collect();
            let missing = (t.missing_features * t.count as f64).round() as usize;
            let mut order: Vec<usize> = (0..t.count).collect();
            order.shuffle(rng);
            let mut has = vec![true; t.count];
            for &i in &order[..missing] {
                has[i] = false;
            }
            for i in 0..t.count {
                let noise: Vec<f64> = (0..t.feature_dim).map(|_| StandardNormal.sample(rng)).collect();
                if has[i] {
                    let x = means[blocks[i]].iter().zip(noise).map(|(m, e)| m + e).collect();
                    b.set_node_features(nt, i, x)?;
                }
            }
        }
        block_of.push(blocks);
        bin_of.push(bins);
    }
    let type_index = |name: &str| cfg.node_types.iter().position(|t| t.name == name).expect("validated");
    for r in &cfg.relations {
        let (s, d) = (type_index(&r.src), type_index(&r.dst));
        let rel = b.add_relation(&r.name, NodeType(s as u16), NodeType(d as u16))?;
        let members = |t: usize| -> Vec<Vec<usize>> {
            let mut m = vec![Vec::new(); cfg.blocks];
            for (i, &k) in block_of[t].iter().enumerate() {
                m[k].push(i);
            }
            m
        };
        let (ms, md) = (members(s), members(d));
        for ks in 0..cfg.blocks {
            for kd in 0..cfg.blocks {
                if s == d && kd < ks {
                    continue;
                }
                let p = if ks == kd { r.p_in } else { r.p_out };
                let (a, c) = (&ms[ks], &md[kd]);
                let pairs = if s == d && ks == kd {
                    (a.len() * a.len().saturating_sub(1) / 2) as u64
                } else {
                    (a.len() * c.len()) as u64
                };
                if pairs == 0 || p == 0.0 {
                    continue;
                }
                let m = Binomial::new(pairs, p).map_err(|e| IoError::Invalid(e.to_string()))?.sample(rng);
                let mut seen = std::collections::HashSet::new();
                while (seen.len() as u64) < m {
                    let u = a[rng.random_range(0..a.len())];
                    let v = c[rng.random_range(0..c.len())];
                    if s == d && u == v {
                        continue;
                    }
                    let key = if s == d && ks == kd { (u.min(v), u.max(v)) } else { (u, v) };
                    if seen.insert(key) {
                        b.add_edge(rel, key.0, key.1, None)?;
                    }
                }
            }
        }
    }
    b.set_time_unit("tick");
    let graph = b.build()?;
    let mut labels = BTreeMap::new();
    let mut blocks = Vec::new();
    let mut timed_nodes = Vec::new();
    for (t, info) in cfg.node_types.iter().enumerate() {
        for i in 0..info.count {
            let v = graph.global_id(NodeType(t as u16), i);
            blocks.push((v, format!("b{}", block_of[t][i])));
            if info.timestamped {
                timed_nodes.push((v, format!("t{}", bin_of[t][i])));
            }
        }
    }
    labels.insert("block".to_string(), LabelSet::from_named(LabelKind::GroundTruth, blocks));
    if !timed_nodes.is_empty() {
        labels.insert("time".to_string(), LabelSet::from_named(LabelKind::Temporal, timed_nodes));
    }
    Ok(Dataset { graph, labels })
}

/// Embeddings as TSV rows: global node id followed by the values.
pub fn embeddings_to_tsv(z: &Matrix, nodes: &[usize]) -> String {
    let mut out = String::new();
    for (r, v) in nodes.iter().enumerate() {
        out.push_str(&v.to_string());
        for x in z.row(r) {
            write!(out, "\t{x}").unwrap();
        }
        out.push('\n');
    }
    out
}

const EMBEDDING_MAGIC: &[u8; 8] = b"MMCDEMB1";

/// Little-endian binary export: magic, row and column counts as `u64`,
/// the node ids as `u64`, then the row-major values as `f64`.
pub fn write_embeddings_binary(path: &Path, z: &Matrix, nodes: &[usize]) -> Result<(), IoError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(io_err(path));
    put(EMBEDDING_MAGIC)?;
    put(&(z.rows() as u64).to_le_bytes())?;
    put(&(z.cols() as u64).to_le_bytes())?;
    for &v in nodes {
        put(&(v as u64).to_le_bytes())?;
    }
    for x in z.data() {
        put(&x.to_le_bytes())?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_embeddings_binary(path: &Path) -> Result<(Vec<usize>, Matrix), IoError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    let bad = || IoError::Invalid(format!("{}: not an embedding file", path.display()));
    if bytes.len() < 24 || &bytes[..8] != EMBEDDING_MAGIC {
        return Err(bad());
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
    let (rows, cols) = (word(8) as usize, word(16) as usize);
    if bytes.len() != 24 + 8 * rows + 8 * rows * cols {
        return Err(bad());
    }
    let nodes = (0..rows).map(|r| word(24 + 8 * r) as usize).collect();
    let base = 24 + 8 * rows;
    let data = (0..rows * cols)
        .map(|i| f64::from_le_bytes(bytes[base + 8 * i..base + 8 * i + 8].try_into().unwrap()))
        .collect();
    let z = Matrix::from_vec(rows, cols, data).map_err(|e| IoError::Invalid(e.to_string()))?;
    Ok((nodes, z))
}

/// `node_id cluster_id` rows.
pub fn assignments_to_tsv(nodes: &[usize], assignment: &[usize]) -> String {
    let mut out = String::new();
    for (v, k) in nodes.iter().zip(assignment) {
        writeln!(out, "{v}\t{k}").unwrap();
    }
    out
}

/// Mixture parameters in plain text: `K`, then per cluster its weight,
/// member count, mean and covariance rows.
pub fn cluster_params_text(state: &ClusterState) -> String {
    let mut out = format!("K\t{}\n", state.k());
    let join = |xs: &[f64]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("\t");
    for (k, c) in state.clusters.iter().enumerate() {
        writeln!(out, "cluster\t{k}\tweight\t{}\tcount\t{}", c.weight, c.count).unwrap();
        writeln!(out, "mean\t{}", join(c.gaussian.mean())).unwrap();
        for r in 0..c.gaussian.dim() {
            writeln!(out, "cov\t{}", join(c.gaussian.cov().row(r))).unwrap();
        }
    }
    out
}
