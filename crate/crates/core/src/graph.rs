//! Immutable typed multimodal graph store.
//!
//! Nodes carry a global id in `0..num_nodes()`. Ids are contiguous per node
//! type, so a node type owns the half-open range returned by
//! [`MultimodalGraph::type_range`]. Every node may optionally carry a time
//! range and a feature vector; nodes additionally carry an `is_seen` flag that
//! marks whether they took part in training.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Global node index.
pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeType(pub u16);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationType(pub u16);

impl NodeType {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationType {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Closed interval of integer ticks. A point event has `start == end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeRange {
    pub start: i64,
    pub end: i64,
}

impl TimeRange {
    pub const UNBOUNDED: TimeRange = TimeRange {
        start: i64::MIN,
        end: i64::MAX,
    };

    pub fn new(start: i64, end: i64) -> Result<Self, GraphError> {
        if start > end {
            return Err(GraphError::InvalidTimeRange { start, end });
        }
        Ok(TimeRange { start, end })
    }

    pub fn point(t: i64) -> Self {
        TimeRange { start: t, end: t }
    }

    /// Window of total width `width` centered on `t`.
    pub fn centered(t: i64, width: i64) -> Self {
        let half = width.max(0) / 2;
        TimeRange {
            start: t.saturating_sub(half),
            end: t.saturating_add(half),
        }
    }

    pub fn intersects(&self, other: &TimeRange) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    pub fn contains(&self, t: i64) -> bool {
        self.start <= t && t <= self.end
    }

    pub fn len(&self) -> i64 {
        self.end.saturating_sub(self.start)
    }

    pub fn is_point(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("edge {edge} of relation '{relation}' references {side} node {local} of type '{node_type}', which has only {count} nodes")]
    DanglingEndpoint {
        relation: String,
        edge: usize,
        side: &'static str,
        node_type: String,
        local: usize,
        count: usize,
    },
    #[error("node {local} of type '{node_type}' has a feature vector of width {got}, expected {expected}")]
    FeatureWidth {
        node_type: String,
        local: usize,
        expected: usize,
        got: usize,
    },
    #[error("node {local} of type '{node_type}' is out of range ({count} nodes)")]
    NodeOutOfRange {
        node_type: String,
        local: usize,
        count: usize,
    },
    #[error("unknown node type id {0}")]
    UnknownNodeType(u16),
    #[error("unknown relation id {0}")]
    UnknownRelation(u16),
    #[error("duplicate name '{0}'")]
    DuplicateName(String),
    #[error("invalid time range [{start}, {end}]")]
    InvalidTimeRange { start: i64, end: i64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeTypeInfo {
    pub name: String,
    pub count: usize,
    pub offset: usize,
    /// Width of the feature vectors of this type, 0 when the type has none.
    pub feature_dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelationInfo {
    pub name: String,
    pub src: NodeType,
    pub dst: NodeType,
}

/// Compressed sparse rows over global node ids.
#[derive(Debug, Clone, Default)]
pub struct Csr {
    offsets: Vec<usize>,
    targets: Vec<u32>,
}

impl Csr {
    fn from_pairs(num_nodes: usize, pairs: impl Iterator<Item = (usize, usize)> + Clone) -> Self {
        let mut offsets = vec![0usize; num_nodes + 1];
        for (s, _) in pairs.clone() {
            offsets[s + 1] += 1;
        }
        for i in 0..num_nodes {
            offsets[i + 1] += offsets[i];
        }
        let mut fill = offsets.clone();
        let mut targets = vec![0u32; offsets[num_nodes]];
        for (s, t) in pairs {
            targets[fill[s]] = t as u32;
            fill[s] += 1;
        }
        for i in 0..num_nodes {
            targets[offsets[i]..offsets[i + 1]].sort_unstable();
        }
        Csr { offsets, targets }
    }

    pub fn row(&self, v: NodeId) -> &[u32] {
        &self.targets[self.offsets[v]..self.offsets[v + 1]]
    }
}

/// One entry of the undirected neighbor list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Neighbor {
    pub node: u32,
    pub relation: RelationType,
    /// True when the stored edge points from the neighbor to the owner.
    pub reverse: bool,
}

#[derive(Debug, Clone)]
struct RelationEdges {
    src: Vec<NodeId>,
    dst: Vec<NodeId>,
    time: Vec<Option<TimeRange>>,
    forward: Csr,
    backward: Csr,
}

/// Per node type dense feature rows plus a presence mask.
#[derive(Debug, Clone, Default)]
pub struct FeatureTable {
    dims: Vec<usize>,
    values: Vec<Vec<f64>>,
    present: Vec<Vec<bool>>,
}

impl FeatureTable {
    pub fn dim(&self, t: NodeType) -> usize {
        self.dims[t.index()]
    }

    /// Feature row of the `local`-th node of type `t`, if present.
    pub fn row(&self, t: NodeType, local: usize) -> Option<&[f64]> {
        let d = self.dims[t.index()];
        if d == 0 || !self.present[t.index()][local] {
            return None;
        }
        Some(&self.values[t.index()][local * d..(local + 1) * d])
    }
}

/// Sorted index of timestamped nodes by range start.
#[derive(Debug, Clone, Default)]
struct TemporalIndex {
    entries: Vec<(i64, i64, u32)>,
    max_len: i64,
}

impl TemporalIndex {
    fn build(times: &[Option<TimeRange>]) -> Self {
        let mut entries: Vec<(i64, i64, u32)> = times
            .iter()
            .enumerate()
            .filter_map(|(v, t)| t.map(|t| (t.start, t.end, v as u32)))
            .collect();
        entries.sort_unstable();
        let max_len = entries.iter().map(|e| e.1.saturating_sub(e.0)).max().unwrap_or(0);
        TemporalIndex { entries, max_len }
    }

    fn query(&self, w: &TimeRange) -> Vec<NodeId> {
        let lo = w.start.saturating_sub(self.max_len);
        let first = self.entries.partition_point(|e| e.0 < lo);
        let last = self.entries.partition_point(|e| e.0 <= w.end);
        let mut out: Vec<NodeId> = self.entries[first..last.max(first)]
            .iter()
            .filter(|e| e.1 >= w.start)
            .map(|e| e.2 as usize)
            .collect();
        out.sort_unstable();
        out
    }
}

#[derive(Debug, Clone)]
pub struct MultimodalGraph {
    node_types: Vec<NodeTypeInfo>,
    relations: Vec<RelationInfo>,
    type_of: Vec<NodeType>,
    edges: Vec<RelationEdges>,
    adjacency_offsets: Vec<usize>,
    adjacency: Vec<Neighbor>,
    adjacency_ids: Vec<u32>,
    node_time: Vec<Option<TimeRange>>,
    features: FeatureTable,
    has_feature: Vec<bool>,
    is_seen: Vec<bool>,
    temporal: TemporalIndex,
    time_unit: Option<String>,
}

impl MultimodalGraph {
    pub fn num_nodes(&self) -> usize {
        self.type_of.len()
    }

    pub fn num_node_types(&self) -> usize {
        self.node_types.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.iter().map(|e| e.src.len()).sum()
    }

    pub fn node_types(&self) -> &[NodeTypeInfo] {
        &self.node_types
    }

    pub fn relations(&self) -> &[RelationInfo] {
        &self.relations
    }

    pub fn node_type_by_name(&self, name: &str) -> Option<NodeType> {
        self.node_types
            .iter()
            .position(|t| t.name == name)
            .map(|i| NodeType(i as u16))
    }

    pub fn relation_by_name(&self, name: &str) -> Option<RelationType> {
        self.relations
            .iter()
            .position(|r| r.name == name)
            .map(|i| RelationType(i as u16))
    }

    pub fn node_type(&self, v: NodeId) -> NodeType {
        self.type_of[v]
    }

    pub fn type_range(&self, t: NodeType) -> Range<NodeId> {
        let info = &self.node_types[t.index()];
        info.offset..info.offset + info.count
    }

    pub fn node_count(&self, t: NodeType) -> usize {
        self.node_types[t.index()].count
    }

    pub fn global_id(&self, t: NodeType, local: usize) -> NodeId {
        self.node_types[t.index()].offset + local
    }

    pub fn local_id(&self, v: NodeId) -> usize {
        v - self.node_types[self.type_of[v].index()].offset
    }

    pub fn relation_edge_count(&self, r: RelationType) -> usize {
        self.edges[r.index()].src.len()
    }

    /// Stored `(src, dst)` endpoints of the `i`-th edge of relation `r`.
    pub fn edge(&self, r: RelationType, i: usize) -> (NodeId, NodeId) {
        let e = &self.edges[r.index()];
        (e.src[i], e.dst[i])
    }

    pub fn edge_time(&self, r: RelationType, i: usize) -> Option<TimeRange> {
        self.edges[r.index()].time[i]
    }

    pub fn relation_edges(&self, r: RelationType) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        let e = &self.edges[r.index()];
        e.src.iter().copied().zip(e.dst.iter().copied())
    }

    /// Stored-direction successors of `v` under relation `r`.
    pub fn forward(&self, r: RelationType, v: NodeId) -> &[u32] {
        self.edges[r.index()].forward.row(v)
    }

    /// Stored-direction predecessors of `v` under relation `r`.
    pub fn backward(&self, r: RelationType, v: NodeId) -> &[u32] {
        self.edges[r.index()].backward.row(v)
    }

    /// Undirected neighbor entries of `v`, sorted by neighbor id then relation.
    pub fn neighbors(&self, v: NodeId) -> &[Neighbor] {
        &self.adjacency[self.adjacency_offsets[v]..self.adjacency_offsets[v + 1]]
    }

    /// Neighbor ids of `v` (with multiplicity), sorted ascending.
    pub fn neighbor_ids(&self, v: NodeId) -> &[u32] {
        &self.adjacency_ids[self.adjacency_offsets[v]..self.adjacency_offsets[v + 1]]
    }

    pub fn degree(&self, v: NodeId) -> usize {
        self.adjacency_offsets[v + 1] - self.adjacency_offsets[v]
    }

    pub fn adjacent(&self, u: NodeId, v: NodeId) -> bool {
        self.neighbor_ids(u).binary_search(&(v as u32)).is_ok()
    }

    /// Neighbors of `v` through relation `r` (or all relations), in both
    /// stored directions, sorted by id.
    pub fn out_neighbors(&self, v: NodeId, r: Option<RelationType>) -> Vec<NodeId> {
        self.neighbors(v)
            .iter()
            .filter(|n| r.is_none_or(|r| n.relation == r))
            .map(|n| n.node as NodeId)
            .collect()
    }

    pub fn node_time(&self, v: NodeId) -> Option<TimeRange> {
        self.node_time[v]
    }

    pub fn has_time(&self, v: NodeId) -> bool {
        self.node_time[v].is_some()
    }

    pub fn has_feature(&self, v: NodeId) -> bool {
        self.has_feature[v]
    }

    pub fn is_seen(&self, v: NodeId) -> bool {
        self.is_seen[v]
    }

    pub fn feature(&self, v: NodeId) -> Option<&[f64]> {
        self.features.row(self.type_of[v], self.local_id(v))
    }

    pub fn feature_dim(&self, t: NodeType) -> usize {
        self.features.dim(t)
    }

    pub fn features(&self) -> &FeatureTable {
        &self.features
    }

    pub fn time_unit(&self) -> Option<&str> {
        self.time_unit.as_deref()
    }

    /// Timestamped nodes whose range intersects `w`, sorted by id. Static
    /// nodes are never returned.
    pub fn nodes_in_window(&self, w: &TimeRange) -> Vec<NodeId> {
        self.temporal.query(w)
    }

    pub fn num_timestamped(&self) -> usize {
        self.temporal.entries.len()
    }

    /// Smallest range covering every node time range.
    pub fn time_span(&self) -> Option<TimeRange> {
        let start = self.temporal.entries.first()?.0;
        let end = self.temporal.entries.iter().map(|e| e.1).max()?;
        Some(TimeRange { start, end })
    }

    /// Copy of the graph with a replaced `is_seen` mask.
    pub fn with_seen(&self, seen: Vec<bool>) -> MultimodalGraph {
        assert_eq!(seen.len(), self.num_nodes(), "seen mask length");
        let mut g = self.clone();
        g.is_seen = seen;
        g
    }

    /// Copy of the graph keeping only the edges selected by `keep`.
    pub fn filter_edges(&self, mut keep: impl FnMut(RelationType, usize) -> bool) -> MultimodalGraph {
        let mut edges = Vec::with_capacity(self.edges.len());
        for (ri, e) in self.edges.iter().enumerate() {
            let r = RelationType(ri as u16);
            let mut kept = RawEdges::default();
            for i in 0..e.src.len() {
                if keep(r, i) {
                    kept.src.push(e.src[i]);
                    kept.dst.push(e.dst[i]);
                    kept.time.push(e.time[i]);
                }
            }
            edges.push(kept);
        }
        assemble(
            self.node_types.clone(),
            self.relations.clone(),
            edges,
            self.node_time.clone(),
            self.features.clone(),
            self.is_seen.clone(),
            self.time_unit.clone(),
        )
    }
}

#[derive(Debug, Default, Clone)]
struct RawEdges {
    src: Vec<NodeId>,
    dst: Vec<NodeId>,
    time: Vec<Option<TimeRange>>,
}

fn assemble(
    node_types: Vec<NodeTypeInfo>,
    relations: Vec<RelationInfo>,
    raw: Vec<RawEdges>,
    node_time: Vec<Option<TimeRange>>,
    features: FeatureTable,
    is_seen: Vec<bool>,
    time_unit: Option<String>,
) -> MultimodalGraph {
    let n: usize = node_types.iter().map(|t| t.count).sum();
    let mut type_of = Vec::with_capacity(n);
    for (i, t) in node_types.iter().enumerate() {
        type_of.extend(std::iter::repeat_n(NodeType(i as u16), t.count));
    }

    let mut edges = Vec::with_capacity(raw.len());
    let mut degree = vec![0usize; n + 1];
    for r in &raw {
        for (&s, &d) in r.src.iter().zip(&r.dst) {
            degree[s + 1] += 1;
            degree[d + 1] += 1;
        }
    }
    for i in 0..n {
        degree[i + 1] += degree[i];
    }
    let adjacency_offsets = degree;
    let mut fill = adjacency_offsets.clone();
    let mut adjacency = vec![
        Neighbor {
            node: 0,
            relation: RelationType(0),
            reverse: false
        };
        adjacency_offsets[n]
    ];
    for (ri, r) in raw.into_iter().enumerate() {
        let rel = RelationType(ri as u16);
        for (&s, &d) in r.src.iter().zip(&r.dst) {
            adjacency[fill[s]] = Neighbor {
                node: d as u32,
                relation: rel,
                reverse: false,
            };
            fill[s] += 1;
            adjacency[fill[d]] = Neighbor {
                node: s as u32,
                relation: rel,
                reverse: true,
            };
            fill[d] += 1;
        }
        let forward = Csr::from_pairs(n, r.src.iter().copied().zip(r.dst.iter().copied()));
        let backward = Csr::from_pairs(n, r.dst.iter().copied().zip(r.src.iter().copied()));
        edges.push(RelationEdges {
            src: r.src,
            dst: r.dst,
            time: r.time,
            forward,
            backward,
        });
    }
    for v in 0..n {
        adjacency[adjacency_offsets[v]..adjacency_offsets[v + 1]]
            .sort_unstable_by_key(|nb| (nb.node, nb.relation, nb.reverse));
    }
    let adjacency_ids = adjacency.iter().map(|nb| nb.node).collect();

    let mut has_feature = vec![false; n];
    for (ti, t) in node_types.iter().enumerate() {
        if features.dims[ti] > 0 {
            for local in 0..t.count {
                has_feature[t.offset + local] = features.present[ti][local];
            }
        }
    }
    let temporal = TemporalIndex::build(&node_time);

    MultimodalGraph {
        node_types,
        relations,
        type_of,
        edges,
        adjacency_offsets,
        adjacency,
        adjacency_ids,
        node_time,
        features,
        has_feature,
        is_seen,
        temporal,
        time_unit,
    }
}

/// Incremental description of a graph, validated by [`GraphBuilder::build`].
#[derive(Debug, Default, Clone)]
pub struct GraphBuilder {
    types: Vec<(String, usize, usize)>,
    relations: Vec<RelationInfo>,
    edges: Vec<Vec<(usize, usize, Option<TimeRange>)>>,
    times: Vec<Vec<Option<TimeRange>>>,
    features: Vec<Vec<Option<Vec<f64>>>>,
    unseen: Vec<(NodeType, usize)>,
    time_unit: Option<String>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a node type with `count` nodes and feature width
    /// `feature_dim` (0 for a featureless type).
    pub fn add_node_type(&mut self, name: &str, count: usize, feature_dim: usize) -> Result<NodeType, GraphError> {
        if self.types.iter().any(|t| t.0 == name) {
            return Err(GraphError::DuplicateName(name.to_string()));
        }
        self.types.push((name.to_string(), count, feature_dim));
        self.times.push(vec![None; count]);
        self.features.push(vec![None; if feature_dim > 0 { count } else { 0 }]);
        Ok(NodeType((self.types.len() - 1) as u16))
    }

    pub fn add_relation(&mut self, name: &str, src: NodeType, dst: NodeType) -> Result<RelationType, GraphError> {
        self.check_type(src)?;
        self.check_type(dst)?;
        if self.relations.iter().any(|r| r.name == name) {
            return Err(GraphError::DuplicateName(name.to_string()));
        }
        self.relations.push(RelationInfo {
            name: name.to_string(),
            src,
            dst,
        });
        self.edges.push(Vec::new());
        Ok(RelationType((self.relations.len() - 1) as u16))
    }

    /// Adds an edge between type-local node indices. Endpoints are checked
    /// at build time.
    pub fn add_edge(&mut self, r: RelationType, src: usize, dst: usize, time: Option<TimeRange>) -> Result<(), GraphError> {
        let edges = self
            .edges
            .get_mut(r.index())
            .ok_or(GraphError::UnknownRelation(r.0))?;
        edges.push((src, dst, time));
        Ok(())
    }

    pub fn set_node_time(&mut self, t: NodeType, local: usize, time: TimeRange) -> Result<(), GraphError> {
        self.check_node(t, local)?;
        self.times[t.index()][local] = Some(time);
        Ok(())
    }

    pub fn set_node_features(&mut self, t: NodeType, local: usize, x: Vec<f64>) -> Result<(), GraphError> {
        self.check_node(t, local)?;
        let (name, _, dim) = &self.types[t.index()];
        if x.len() != *dim {
            return Err(GraphError::FeatureWidth {
                node_type: name.clone(),
                local,
                expected: *dim,
                got: x.len(),
            });
        }
        self.features[t.index()][local] = Some(x);
        Ok(())
    }

    pub fn set_unseen(&mut self, t: NodeType, local: usize) -> Result<(), GraphError> {
        self.check_node(t, local)?;
        self.unseen.push((t, local));
        Ok(())
    }

    pub fn set_time_unit(&mut self, unit: &str) {
        self.time_unit = Some(unit.to_string());
    }

    fn check_type(&self, t: NodeType) -> Result<(), GraphError> {
        if t.index() >= self.types.len() {
            return Err(GraphError::UnknownNodeType(t.0));
        }
        Ok(())
    }

    fn check_node(&self, t: NodeType, local: usize) -> Result<(), GraphError> {
        self.check_type(t)?;
        let (name, count, _) = &self.types[t.index()];
        if local >= *count {
            return Err(GraphError::NodeOutOfRange {
                node_type: name.clone(),
                local,
                count: *count,
            });
        }
        Ok(())
    }

    pub fn build(self) -> Result<MultimodalGraph, GraphError> {
        let mut node_types = Vec::with_capacity(self.types.len());
        let mut offset = 0;
        for (name, count, dim) in &self.types {
            node_types.push(NodeTypeInfo {
                name: name.clone(),
                count: *count,
                offset,
                feature_dim: *dim,
            });
            offset += count;
        }
        let n = offset;

        let mut raw = Vec::with_capacity(self.relations.len());
        for (ri, rel) in self.relations.iter().enumerate() {
            let src_t = &node_types[rel.src.index()];
            let dst_t = &node_types[rel.dst.index()];
            let mut r = RawEdges::default();
            for (i, &(s, d, time)) in self.edges[ri].iter().enumerate() {
                for (side, local, t) in [("source", s, src_t), ("target", d, dst_t)] {
                    if local >= t.count {
                        return Err(GraphError::DanglingEndpoint {
                            relation: rel.name.clone(),
                            edge: i,
                            side,
                            node_type: t.name.clone(),
                            local,
                            count: t.count,
                        });
                    }
                }
                r.src.push(src_t.offset + s);
                r.dst.push(dst_t.offset + d);
                r.time.push(time);
            }
            raw.push(r);
        }

        let node_time: Vec<Option<TimeRange>> = self.times.into_iter().flatten().collect();

        let mut table = FeatureTable::default();
        for (ti, rows) in self.features.into_iter().enumerate() {
            let (_, count, dim) = self.types[ti];
            let mut values = vec![0.0; count * dim];
            let mut present = vec![false; count];
            for (local, row) in rows.into_iter().enumerate() {
                if let Some(x) = row {
                    values[local * dim..(local + 1) * dim].copy_from_slice(&x);
                    present[local] = true;
                }
            }
            table.dims.push(dim);
            table.values.push(values);
            table.present.push(present);
        }

        let mut is_seen = vec![true; n];
        for (t, local) in self.unseen {
            is_seen[node_types[t.index()].offset + local] = false;
        }

        Ok(assemble(
            node_types,
            self.relations,
            raw,
            node_time,
            table,
            is_seen,
            self.time_unit,
        ))
    }
}
