//! Typed attention encoder, task heads and training losses.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{MultimodalGraph, NodeId};
use crate::numeric::{glorot, Matrix, NumericError, ParamId, ParamStore, Tape, Tensor};
use crate::sampling::{budget_sample, SampledSubgraph};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("node {node} is seen and featureless but has no embedding row")]
    MissingEmbeddingRow { node: NodeId },
    #[error("node {node} has {got} features, the model expects {expected}")]
    FeatureWidth { node: NodeId, expected: usize, got: usize },
    #[error("graph has {got} node types / relations, the model was built for {expected}")]
    SchemaMismatch { expected: String, got: String },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("invalid loss weights: {0}")]
    LossWeights(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Dropout rate applied to embedding-table rows in training mode.
    pub embed_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            layers: 2,
            heads: 4,
            embed_dropout: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dim == 0 {
            return Err(ModelError::Config("dim must be positive".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "heads ({}) must divide dim ({})",
                self.heads, self.dim
            )));
        }
        if !(0.0..1.0).contains(&self.embed_dropout) {
            return Err(ModelError::Config(format!(
                "embed dropout {} outside [0, 1)",
                self.embed_dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        Linear {
            w: store.add(format!("{name}.w"), glorot(din, dout, rng)),
            b: store.add(format!("{name}.b"), Matrix::zeros(1, dout)),
        }
    }

    pub fn apply(&self, store: &ParamStore, tape: &mut Tape, x: Tensor) -> Result<Tensor, NumericError> {
        let w = store.leaf(tape, self.w);
        let b = store.leaf(tape, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

/// Parameters of one convolution layer. Projections are per node type;
/// attention matrices are per relation and direction (slot `2r` carries
/// messages along stored edges of relation `r`, slot `2r + 1` against them).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub query: Vec<ParamId>,
    pub key: Vec<ParamId>,
    pub value: Vec<ParamId>,
    pub output: Vec<ParamId>,
    pub attention: Vec<ParamId>,
}

/// Per-node gate applied to primary embeddings for one task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskHead {
    /// The `h` head projections `d -> d/h`, stored side by side as one
    /// `d × d` map.
    pub gate: Linear,
}

impl TaskHead {
    pub fn apply(&self, store: &ParamStore, tape: &mut Tape, z: Tensor) -> Result<Tensor, NumericError> {
        let logits = self.gate.apply(store, tape, z)?;
        let gate = tape.sigmoid(logits);
        tape.elementwise_mul(z, gate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    feature_dims: Vec<usize>,
    num_relations: usize,
    input: Vec<Option<Linear>>,
    embedding: Option<ParamId>,
    embedding_rows: Vec<u32>,
    layers: Vec<ConvLayer>,
    pub topo_head: TaskHead,
    pub temporal_head: TaskHead,
}

const NO_ROW: u32 = u32::MAX;

/// Subgraph bookkeeping shared by every layer of one forward pass.
struct Plan {
    n: usize,
    /// local indices per node type
    by_type: Vec<Rc<Vec<usize>>>,
    /// maps local index to its row in the type-ordered concatenation
    unpermute: Rc<Vec<usize>>,
    /// (slot, sources, targets) of attention edges
    slots: Vec<(usize, Rc<Vec<usize>>, Rc<Vec<usize>>)>,
    all_targets: Rc<Vec<usize>>,
}

impl Plan {
    fn new(sub: &SampledSubgraph, num_types: usize, num_relations: usize) -> Plan {
        let n = sub.len();
        let mut by_type = vec![Vec::new(); num_types];
        for i in 0..n {
            by_type[sub.node_types[i].index()].push(i);
        }
        let mut unpermute = vec![0; n];
        let mut k = 0;
        for rows in &by_type {
            for &i in rows {
                unpermute[i] = k;
                k += 1;
            }
        }
        let mut src = vec![Vec::new(); 2 * num_relations];
        let mut dst = vec![Vec::new(); 2 * num_relations];
        for e in &sub.edges {
            let r = e.relation.index();
            src[2 * r].push(e.src as usize);
            dst[2 * r].push(e.dst as usize);
            src[2 * r + 1].push(e.dst as usize);
            dst[2 * r + 1].push(e.src as usize);
        }
        let mut slots = Vec::new();
        let mut all_targets = Vec::new();
        for (s, (a, b)) in src.into_iter().zip(dst).enumerate() {
            if !a.is_empty() {
                all_targets.extend_from_slice(&b);
                slots.push((s, Rc::new(a), Rc::new(b)));
            }
        }
        Plan {
            n,
            by_type: by_type.into_iter().map(Rc::new).collect(),
            unpermute: Rc::new(unpermute),
            slots,
            all_targets: Rc::new(all_targets),
        }
    }
}

/// Embeddings of a batch recorded on a tape.
pub struct Forward {
    pub tape: Tape,
    /// `|batch| × d` primary embeddings, in batch order.
    pub z: Tensor,
    pub subgraph: SampledSubgraph,
}

fn block_mask(dim: usize, heads: usize) -> Matrix {
    let w = dim / heads;
    Matrix::from_fn(dim, dim, |i, j| if i / w == j / w { 1.0 } else { 0.0 })
}

impl Model {
    /// Fresh parameters for `g`. Every seen node without features gets an
    /// embedding-table row.
    pub fn new<R: Rng>(g: &MultimodalGraph, config: ModelConfig, rng: &mut R) -> Result<Model, ModelError> {
        config.validate()?;
        let d = config.dim;
        let mut params = ParamStore::new();
        let feature_dims: Vec<usize> = g.node_types().iter().map(|t| t.feature_dim).collect();
        let input = g
            .node_types()
            .iter()
            .map(|t| {
                (t.feature_dim > 0)
                    .then(|| Linear::new(&mut params, &format!("input.{}", t.name), t.feature_dim, d, rng))
            })
            .collect();
        let mut embedding_rows = vec![NO_ROW; g.num_nodes()];
        let mut rows = 0u32;
        for (v, slot) in embedding_rows.iter_mut().enumerate() {
            if g.is_seen(v) && !g.has_feature(v) {
                *slot = rows;
                rows += 1;
            }
        }
        let embedding = (rows > 0).then(|| {
            let table = Matrix::from_fn(rows as usize, d, |_, _| rng.random_range(-0.1..0.1));
            params.add("embedding", table)
        });
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let per_type = |kind: &str, params: &mut ParamStore, rng: &mut R| -> Vec<ParamId> {
                g.node_types()
                    .iter()
                    .map(|t| params.add(format!("conv{l}.{kind}.{}", t.name), glorot(d, d, rng)))
                    .collect()
            };
            let query = per_type("query", &mut params, rng);
            let key = per_type("key", &mut params, rng);
            let value = per_type("value", &mut params, rng);
            let output = per_type("output", &mut params, rng);
            let attention = (0..2 * g.num_relations())
                .map(|s| params.add(format!("conv{l}.attention.{s}"), Matrix::identity(d)))
                .collect();
            layers.push(ConvLayer {
                query,
                key,
                value,
                output,
                attention,
            });
        }
        let topo_head = TaskHead {
            gate: Linear::new(&mut params, "head.topological", d, d, rng),
        };
        let temporal_head = TaskHead {
            gate: Linear::new(&mut params, "head.temporal", d, d, rng),
        };
        Ok(Model {
            config,
            params,
            feature_dims,
            num_relations: g.num_relations(),
            input,
            embedding,
            embedding_rows,
            layers,
            topo_head,
            temporal_head,
        })
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn input_projection(&self, t: usize) -> Option<Linear> {
        self.input[t]
    }

    pub fn embedding_table(&self) -> Option<ParamId> {
        self.embedding
    }

    pub fn embedding_row(&self, v: NodeId) -> Option<usize> {
        self.embedding_rows
            .get(v)
            .copied()
            .filter(|&r| r != NO_ROW)
            .map(|r| r as usize)
    }

    pub fn check_schema(&self, g: &MultimodalGraph) -> Result<(), ModelError> {
        let dims: Vec<usize> = g.node_types().iter().map(|t| t.feature_dim).collect();
        if dims != self.feature_dims || g.num_relations() != self.num_relations {
            return Err(ModelError::SchemaMismatch {
                expected: format!("feature dims {:?}, {} relations", self.feature_dims, self.num_relations),
                got: format!("feature dims {:?}, {} relations", dims, g.num_relations()),
            });
        }
        Ok(())
    }

    /// Layer-0 representation of every subgraph node: projected features,
    /// an embedding-table row (dropout in training) for seen featureless
    /// nodes, and zeros otherwise.
    pub fn initial_features<R: Rng>(
        &self,
        g: &MultimodalGraph,
        sub: &SampledSubgraph,
        tape: &mut Tape,
        train: bool,
        rng: &mut R,
    ) -> Result<Tensor, ModelError> {
        let plan = Plan::new(sub, g.num_node_types(), g.num_relations());
        self.initial_from_plan(g, sub, &plan, tape, train, rng)
    }

    fn initial_from_plan<R: Rng>(
        &self,
        g: &MultimodalGraph,
        sub: &SampledSubgraph,
        plan: &Plan,
        tape: &mut Tape,
        train: bool,
        rng: &mut R,
    ) -> Result<Tensor, ModelError> {
        let d = self.config.dim;
        let mut parts = Vec::new();
        let mut order = Vec::with_capacity(sub.len());
        for (t, locals) in plan.by_type.iter().enumerate() {
            let mut featured = Vec::new();
            let mut table = Vec::new();
            let mut zero = Vec::new();
            for &i in locals.iter() {
                let v = sub.nodes[i];
                if g.has_feature(v) {
                    featured.push(i);
                } else if g.is_seen(v) {
                    table.push(i);
                } else {
                    zero.push(i);
                }
            }
            if !featured.is_empty() {
                let dim = self.feature_dims[t];
                let mut x = Vec::with_capacity(featured.len() * dim);
                for &i in &featured {
                    let v = sub.nodes[i];
                    let row = g.feature(v).unwrap_or(&[]);
                    if row.len() != dim {
                        return Err(ModelError::FeatureWidth {
                            node: v,
                            expected: dim,
                            got: row.len(),
                        });
                    }
                    x.extend_from_slice(row);
                }
                let x = tape.leaf(Matrix::from_vec(featured.len(), dim, x)?);
                let lin = self.input[t].ok_or(ModelError::FeatureWidth {
                    node: sub.nodes[featured[0]],
                    expected: 0,
                    got: dim,
                })?;
                parts.push(lin.apply(&self.params, tape, x)?);
                order.extend_from_slice(&featured);
            }
            if !table.is_empty() {
                let mut rows = Vec::with_capacity(table.len());
                for &i in &table {
                    let v = sub.nodes[i];
                    rows.push(self.embedding_row(v).ok_or(ModelError::MissingEmbeddingRow { node: v })?);
                }
                let e = self.params.leaf(tape, self.embedding.expect("table rows exist"));
                let mut h = tape.gather_rows(e, Rc::new(rows))?;
                let rate = self.config.embed_dropout;
                if train && rate > 0.0 {
                    let keep: Vec<bool> = (0..table.len() * d).map(|_| rng.random::<f64>() >= rate).collect();
                    h = tape.dropout(h, &keep, rate)?;
                }
                parts.push(h);
                order.extend_from_slice(&table);
            }
            if !zero.is_empty() {
                parts.push(tape.leaf(Matrix::zeros(zero.len(), d)));
                order.extend_from_slice(&zero);
            }
        }
        let stacked = tape.concat_rows(&parts, d)?;
        let mut position = vec![0; sub.len()];
        for (k, &i) in order.iter().enumerate() {
            position[i] = k;
        }
        Ok(tape.gather_rows(stacked, Rc::new(position))?)
    }

    /// Applies per-type projections `ids[t]` to the rows of `h`.
    fn typed_projection(&self, tape: &mut Tape, plan: &Plan, h: Tensor, ids: &[ParamId]) -> Result<Tensor, NumericError> {
        let mut parts = Vec::new();
        for (t, locals) in plan.by_type.iter().enumerate() {
            if locals.is_empty() {
                continue;
            }
            let rows = tape.gather_rows(h, locals.clone())?;
            let w = self.params.leaf(tape, ids[t]);
            parts.push(tape.matmul(rows, w)?);
        }
        let stacked = tape.concat_rows(&parts, self.config.dim)?;
        tape.gather_rows(stacked, plan.unpermute.clone())
    }

    fn conv(&self, tape: &mut Tape, plan: &Plan, layer: &ConvLayer, h: Tensor, mask: &Rc<Matrix>) -> Result<Tensor, NumericError> {
        let d = self.config.dim;
        let heads = self.config.heads;
        if plan.slots.is_empty() {
            return Ok(tape.gelu(h));
        }
        let q = self.typed_projection(tape, plan, h, &layer.query)?;
        let k = self.typed_projection(tape, plan, h, &layer.key)?;
        let v = self.typed_projection(tape, plan, h, &layer.value)?;
        let mut scores = Vec::new();
        let mut messages = Vec::new();
        for (slot, src, dst) in &plan.slots {
            let att = self.params.leaf(tape, layer.attention[*slot]);
            let att = tape.mul_const(att, mask.clone())?;
            let ks = tape.gather_rows(k, src.clone())?;
            let ks = tape.matmul(ks, att)?;
            let qt = tape.gather_rows(q, dst.clone())?;
            scores.push(tape.head_dot(ks, qt, heads)?);
            messages.push(tape.gather_rows(v, src.clone())?);
        }
        let scores = tape.concat_rows(&scores, heads)?;
        let scores = tape.scale(scores, 1.0 / ((d / heads) as f64).sqrt());
        let alpha = tape.segment_softmax(scores, plan.all_targets.clone(), plan.n)?;
        let messages = tape.concat_rows(&messages, d)?;
        let weighted = tape.head_scale(alpha, messages)?;
        let agg = tape.scatter_add_rows(weighted, plan.all_targets.clone(), plan.n)?;
        let out = self.typed_projection(tape, plan, agg, &layer.output)?;
        let res = tape.add(h, out)?;
        Ok(tape.gelu(res))
    }

    /// All layers over an already sampled subgraph; returns embeddings of
    /// every subgraph node.
    pub fn encode_subgraph<R: Rng>(
        &self,
        g: &MultimodalGraph,
        sub: &SampledSubgraph,
        tape: &mut Tape,
        train: bool,
        rng: &mut R,
    ) -> Result<Tensor, ModelError> {
        self.check_schema(g)?;
        let plan = Plan::new(sub, g.num_node_types(), g.num_relations());
        let mut h = self.initial_from_plan(g, sub, &plan, tape, train, rng)?;
        let mask = Rc::new(block_mask(self.config.dim, self.config.heads));
        for layer in &self.layers {
            h = self.conv(tape, &plan, layer, h, &mask)?;
        }
        Ok(h)
    }

    /// Primary embeddings of `batch`: budget sampling, layer-0 features and
    /// all convolution layers, keeping only the batch rows.
    pub fn embed_primary<R: Rng>(
        &self,
        g: &MultimodalGraph,
        batch: &[NodeId],
        budgets: &[usize],
        train: bool,
        rng: &mut R,
    ) -> Result<Forward, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let budgets = &budgets[..budgets.len().min(self.config.layers)];
        let sub = budget_sample(g, batch, budgets, rng);
        let mut tape = Tape::new();
        let h = self.encode_subgraph(g, &sub, &mut tape, train, rng)?;
        let first: HashMap<NodeId, usize> = sub.nodes[..sub.batch_len]
            .iter()
            .enumerate()
            .map(|(i, &v)| (v, i))
            .collect();
        let rows: Vec<usize> = batch.iter().map(|v| first[v]).collect();
        let z = if rows.len() == sub.len() && rows.iter().enumerate().all(|(i, &r)| i == r) {
            h
        } else {
            tape.gather_rows(h, Rc::new(rows))?
        };
        Ok(Forward { tape, z, subgraph: sub })
    }

    /// Primary embeddings in evaluation mode, computed in chunks.
    pub fn embed_nodes<R: Rng>(
        &self,
        g: &MultimodalGraph,
        nodes: &[NodeId],
        budgets: &[usize],
        chunk: usize,
        rng: &mut R,
    ) -> Result<Matrix, ModelError> {
        let d = self.config.dim;
        let mut out = Matrix::zeros(nodes.len(), d);
        for (c, part) in nodes.chunks(chunk.max(1)).enumerate() {
            let mut uniq = part.to_vec();
            uniq.sort_unstable();
            uniq.dedup();
            let fwd = self.embed_primary(g, &uniq, budgets, false, rng)?;
            let z = fwd.tape.value(fwd.z);
            for (k, v) in part.iter().enumerate() {
                let r = uniq.binary_search(v).expect("deduplicated");
                out.row_mut(c * chunk.max(1) + k).copy_from_slice(z.row(r));
            }
        }
        Ok(out)
    }
}

/// Task loss weights and the hinge margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub topological: f64,
    pub temporal: f64,
    pub cluster: f64,
    pub margin: f64,
}

impl LossWeights {
    pub fn new(topological: f64, temporal: f64, cluster: f64, margin: f64) -> Result<Self, ModelError> {
        let w = LossWeights {
            topological,
            temporal,
            cluster,
            margin,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let all = [self.topological, self.temporal, self.cluster];
        if all.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(ModelError::LossWeights(format!("weights {all:?} must be finite and non-negative")));
        }
        if all.iter().all(|&b| b == 0.0) {
            return Err(ModelError::LossWeights("at least one weight must be positive".into()));
        }
        if !self.margin.is_finite() {
            return Err(ModelError::LossWeights("margin must be finite".into()));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            topological: 1.0,
            temporal: 1.0,
            cluster: 0.01,
            margin: 0.1,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Hinge loss of one query: the worst negative affinity against the mean
/// positive affinity, `max(0, max_n z_q·z_n - mean_p z_q·z_p + margin)`.
pub fn mm_loss(zq: &[f64], positives: &[&[f64]], negatives: &[&[f64]], margin: f64) -> f64 {
    assert!(!positives.is_empty() && !negatives.is_empty(), "empty context");
    let mean_pos = positives.iter().map(|p| dot(zq, p)).sum::<f64>() / positives.len() as f64;
    negatives
        .iter()
        .map(|n| dot(zq, n) - mean_pos + margin)
        .fold(0.0, f64::max)
}

pub fn cluster_loss(z: &[f64], mu: &[f64]) -> f64 {
    z.iter().zip(mu).map(|(a, b)| (a - b).powi(2)).sum()
}

pub fn combined_loss(topological: f64, temporal: f64, cluster: f64, w: &LossWeights) -> f64 {
    w.topological * topological + w.temporal * temporal + w.cluster * cluster
}

/// Context of one query as row indices into a batch embedding matrix.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueryContext {
    pub query: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Mean hinge loss over the queries that have both positives and
/// negatives; `None` if there is no such query.
pub fn mm_loss_tape(tape: &mut Tape, z: Tensor, contexts: &[QueryContext], margin: f64) -> Result<Option<Tensor>, NumericError> {
    let usable: Vec<&QueryContext> = contexts
        .iter()
        .filter(|c| !c.positives.is_empty() && !c.negatives.is_empty())
        .collect();
    if usable.is_empty() {
        return Ok(None);
    }
    let (mut pq, mut pp, mut pseg) = (Vec::new(), Vec::new(), Vec::new());
    let (mut nq, mut nn, mut nseg) = (Vec::new(), Vec::new(), Vec::new());
    for (s, c) in usable.iter().enumerate() {
        for &p in &c.positives {
            pq.push(c.query);
            pp.push(p);
            pseg.push(s);
        }
        for &n in &c.negatives {
            nq.push(c.query);
            nn.push(n);
            nseg.push(s);
        }
    }
    let k = usable.len();
    let a = tape.gather_rows(z, Rc::new(pq))?;
    let b = tape.gather_rows(z, Rc::new(pp))?;
    let pos = tape.row_dot(a, b)?;
    let mean_pos = tape.segment_mean(pos, Rc::new(pseg), k)?;
    let a = tape.gather_rows(z, Rc::new(nq))?;
    let b = tape.gather_rows(z, Rc::new(nn))?;
    let neg = tape.row_dot(a, b)?;
    let base = tape.gather_rows(mean_pos, Rc::new(nseg.clone()))?;
    let gap = tape.sub(neg, base)?;
    let gap = tape.add_scalar(gap, margin);
    let per_query = tape.hinge_max(gap, &nseg, k)?;
    Ok(Some(tape.reduce_mean(per_query)?))
}

/// Mean squared distance of rows `rows` of `z` to the matching rows of
/// `centers`.
pub fn cluster_loss_tape(tape: &mut Tape, z: Tensor, rows: &[usize], centers: Matrix) -> Result<Option<Tensor>, NumericError> {
    if rows.is_empty() {
        return Ok(None);
    }
    let zr = tape.gather_rows(z, Rc::new(rows.to_vec()))?;
    let mu = tape.leaf(centers);
    let diff = tape.sub(zr, mu)?;
    let sq = tape.l2_norm_sq(diff);
    Ok(Some(tape.reduce_mean(sq)?))
}

/// `β_E L_E + β_T L_T + β_C L_C` over the terms that are present.
pub fn combined_loss_tape(tape: &mut Tape, terms: [Option<Tensor>; 3], w: &LossWeights) -> Result<Option<Tensor>, NumericError> {
    let weights = [w.topological, w.temporal, w.cluster];
    let mut total: Option<Tensor> = None;
    for (t, &b) in terms.iter().zip(&weights) {
        let Some(t) = t else { continue };
        if b == 0.0 {
            continue;
        }
        let s = tape.scale(*t, b);
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    Ok(total)
}
