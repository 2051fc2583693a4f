//! Training: pretraining of the encoder, then alternating rounds of
//! encoder optimization and mixture clustering, plus inference for nodes
//! not seen during training.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{kmeans_init, m_step, run_clustering, ClusterError, ClusterState, NWPrior, PriorParams};
use crate::graph::{MultimodalGraph, NodeId};
use crate::io::{read_text, write_text, IoError};
use crate::model::{
    cluster_loss_tape, combined_loss_tape, mm_loss_tape, LossWeights, Model, ModelConfig, ModelError, QueryContext,
};
use crate::numeric::{accumulate, Adam, Matrix, NumericError};
use crate::sampling::{ballroom_walk, node2vec_walk, rng_for, Batch, SamplerRng};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Every hyperparameter of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub embed_dropout: f64,
    /// Per-layer neighbor budgets as multiples of the batch size.
    pub budgets: Vec<usize>,
    pub walks_per_node: usize,
    /// Hops of a topological walk and length of a temporal context path.
    pub walk_length: usize,
    pub p: f64,
    pub q: f64,
    /// The temporal window is the time span divided by this.
    pub omega_partitions: usize,
    /// Negative contexts per query, shared by both tasks.
    pub negatives: usize,
    pub margin: f64,
    pub beta_e: f64,
    pub beta_t: f64,
    pub beta_c: f64,
    pub alpha: f64,
    pub kappa: f64,
    /// Prior degrees of freedom minus the embedding dimension.
    pub nu_offset: f64,
    pub sigma_scale: f64,
    pub k_init: usize,
    /// Outer iterations of embedding followed by clustering.
    pub epochs: usize,
    /// Passes over the query nodes per outer iteration.
    pub embed_epochs: usize,
    /// Clustering steps per outer iteration.
    pub cluster_steps: usize,
    pub pretrain_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Nodes per forward pass when embedding without gradients.
    pub eval_chunk: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 64,
            layers: 2,
            heads: 4,
            embed_dropout: 0.5,
            budgets: vec![8, 4],
            walks_per_node: 10,
            walk_length: 10,
            p: 1.0,
            q: 0.5,
            omega_partitions: 20,
            negatives: 10,
            margin: 0.1,
            beta_e: 1.0,
            beta_t: 1.0,
            beta_c: 0.01,
            alpha: 10.0,
            kappa: 1.0,
            nu_offset: 1.0,
            sigma_scale: 0.05,
            k_init: 2,
            epochs: 5,
            embed_epochs: 1,
            cluster_steps: 20,
            pretrain_epochs: 10,
            learning_rate: 0.01,
            batch_size: 128,
            eval_chunk: 512,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            embed_dropout: self.embed_dropout,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            topological: self.beta_e,
            temporal: self.beta_t,
            cluster: self.beta_c,
            margin: self.margin,
        }
    }

    pub fn prior_params(&self) -> PriorParams {
        PriorParams {
            kappa: self.kappa,
            nu: Some(self.dim as f64 + self.nu_offset),
            alpha: self.alpha,
            sigma_scale: self.sigma_scale,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        self.model_config().validate()?;
        self.loss_weights().validate()?;
        if self.budgets.len() < self.layers {
            return bad("need one neighbor budget per layer");
        }
        if self.budgets.contains(&0) {
            return bad("neighbor budgets must be positive");
        }
        if self.walks_per_node == 0 || self.walk_length == 0 || self.negatives == 0 {
            return bad("walks_per_node, walk_length and negatives must be positive");
        }
        if !(self.p > 0.0 && self.q > 0.0) {
            return bad("p and q must be positive");
        }
        if self.omega_partitions == 0 {
            return bad("omega_partitions must be positive");
        }
        if !(self.kappa > 0.0 && self.alpha > 0.0 && self.sigma_scale > 0.0) {
            return bad("kappa, alpha and sigma_scale must be positive");
        }
        if self.nu_offset < 1.0 {
            return bad("nu_offset must be at least 1");
        }
        if self.k_init == 0 || self.cluster_steps == 0 {
            return bad("k_init and cluster_steps must be positive");
        }
        if self.embed_epochs == 0 || self.batch_size == 0 || self.eval_chunk == 0 {
            return bad("embed_epochs, batch_size and eval_chunk must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }
}

/// Mean losses of one pass over the query nodes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    pub topological: Option<f64>,
    pub temporal: Option<f64>,
    pub cluster: Option<f64>,
}

/// Shape summary used to refuse a checkpoint for a different graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphFingerprint {
    pub nodes: usize,
    pub edges: usize,
    pub node_types: Vec<(String, usize, usize)>,
    pub relations: Vec<String>,
}

impl GraphFingerprint {
    pub fn of(g: &MultimodalGraph) -> GraphFingerprint {
        GraphFingerprint {
            nodes: g.num_nodes(),
            edges: g.num_edges(),
            node_types: g
                .node_types()
                .iter()
                .map(|t| (t.name.clone(), t.count, t.feature_dim))
                .collect(),
            relations: g.relations().iter().map(|r| r.name.clone()).collect(),
        }
    }
}

const INIT_STREAM: u64 = 1;
const EPOCH_STREAM: u64 = 2;
const CLUSTER_STREAM: u64 = 3;
const EMBED_STREAM: u64 = 4;

/// Training state: encoder, optimizer, mixture and counters. Serializes
/// to a checkpoint from which training resumes exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: Adam,
    pub prior: Option<NWPrior>,
    pub clusters: Option<ClusterState>,
    /// Nodes whose embeddings were clustered, in row order.
    pub clustered_nodes: Vec<NodeId>,
    pub embed_epochs_done: usize,
    pub outer_done: usize,
    pub pretrain_done: bool,
    pub history: Vec<EpochStats>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    graph: GraphFingerprint,
    trainer: Trainer,
}

/// Nodes available for training.
pub fn seen_nodes(g: &MultimodalGraph) -> Vec<NodeId> {
    (0..g.num_nodes()).filter(|&v| g.is_seen(v)).collect()
}

/// `g` without the edges that touch an unseen node, i.e. the part of the
/// graph visible during training.
pub fn seen_subgraph(g: &MultimodalGraph) -> MultimodalGraph {
    g.filter_edges(|r, i| {
        let (u, v) = g.edge(r, i);
        g.is_seen(u) && g.is_seen(v)
    })
}

/// Width of the temporal window, or `None` for a graph without
/// timestamps.
pub fn temporal_width(g: &MultimodalGraph, partitions: usize) -> Option<i64> {
    let span = g.time_span()?;
    Some((span.len() / partitions.max(1) as i64).max(1))
}

struct StepLosses {
    total: f64,
    topological: Option<f64>,
    temporal: Option<f64>,
    cluster: Option<f64>,
}

impl Trainer {
    pub fn new(g: &MultimodalGraph, config: TrainConfig) -> Result<Trainer, PipelineError> {
        config.validate()?;
        let mut rng = rng_for(config.seed, &[INIT_STREAM]);
        let model = Model::new(g, config.model_config(), &mut rng)?;
        let optimizer = Adam::new(&model.params, config.learning_rate);
        Ok(Trainer {
            config,
            model,
            optimizer,
            prior: None,
            clusters: None,
            clustered_nodes: Vec::new(),
            embed_epochs_done: 0,
            outer_done: 0,
            pretrain_done: false,
            history: Vec::new(),
        })
    }

    fn budgets(&self) -> Vec<usize> {
        self.config.budgets[..self.config.layers].to_vec()
    }

    /// Cluster index of every node (`None` if not clustered) and the
    /// cluster means.
    fn cluster_targets(&self, n: usize) -> Option<(Vec<Option<usize>>, Matrix)> {
        let state = self.clusters.as_ref()?;
        let mut of = vec![None; n];
        for (&v, &k) in self.clustered_nodes.iter().zip(&state.assignments) {
            of[v] = Some(k);
        }
        Some((of, state.means()))
    }

    fn step<R: Rng>(
        &mut self,
        g: &MultimodalGraph,
        queries: &[NodeId],
        negative_pool: &[NodeId],
        width: Option<i64>,
        targets: Option<&(Vec<Option<usize>>, Matrix)>,
        rng: &mut R,
    ) -> Result<Option<StepLosses>, PipelineError> {
        let cfg = &self.config;
        let mut batch = Batch::new();
        for &v in queries {
            batch.insert_query(v);
        }
        let mut topo = Vec::new();
        let mut tempo = Vec::new();
        for &v in queries {
            let query = batch.position(v).expect("query inserted");
            let negatives: Vec<usize> = (0..cfg.negatives)
                .map(|_| batch.insert(negative_pool[rng.random_range(0..negative_pool.len())]))
                .collect();
            if cfg.beta_e > 0.0 {
                let mut positives = Vec::new();
                for _ in 0..cfg.walks_per_node {
                    let walk = node2vec_walk(g, v, cfg.walk_length, cfg.p, cfg.q, rng);
                    positives.extend(walk.nodes.iter().filter(|&&u| u != v).map(|&u| batch.insert(u)));
                }
                topo.push(QueryContext {
                    query,
                    positives,
                    negatives: negatives.clone(),
                });
            }
            if cfg.beta_t > 0.0 {
                if let Some(w) = width {
                    if let Some(ctx) = ballroom_walk(g, v, w, cfg.walks_per_node, cfg.walk_length, rng) {
                        let positives: Vec<usize> = ctx.context_nodes().filter(|&u| u != v).map(|u| batch.insert(u)).collect();
                        tempo.push(QueryContext {
                            query,
                            positives,
                            negatives,
                        });
                    }
                }
            }
        }

        let budgets = self.budgets();
        let fwd = self.model.embed_primary(g, batch.nodes(), &budgets, true, rng)?;
        let mut tape = fwd.tape;
        let z = fwd.z;
        let margin = cfg.margin;
        let le = if topo.is_empty() {
            None
        } else {
            let ze = self.model.topo_head.apply(&self.model.params, &mut tape, z)?;
            mm_loss_tape(&mut tape, ze, &topo, margin)?
        };
        let lt = if tempo.is_empty() {
            None
        } else {
            let zt = self.model.temporal_head.apply(&self.model.params, &mut tape, z)?;
            mm_loss_tape(&mut tape, zt, &tempo, margin)?
        };
        let lc = match targets {
            Some((of, means)) if cfg.beta_c > 0.0 => {
                let mut rows = Vec::new();
                let mut centers = Vec::new();
                for &v in queries {
                    if let Some(k) = of[v] {
                        rows.push(batch.position(v).expect("query inserted"));
                        centers.push(k);
                    }
                }
                cluster_loss_tape(&mut tape, z, &rows, means.gather_rows(&centers))?
            }
            _ => None,
        };
        let weights = cfg.loss_weights();
        let Some(total) = combined_loss_tape(&mut tape, [le, lt, lc], &weights)? else {
            return Ok(None);
        };
        let losses = StepLosses {
            total: tape.scalar(total),
            topological: le.map(|t| tape.scalar(t)),
            temporal: lt.map(|t| tape.scalar(t)),
            cluster: lc.map(|t| tape.scalar(t)),
        };
        let grads = tape.backward(total)?;
        let grads = accumulate(&self.model.params, &grads);
        self.optimizer.step(&mut self.model.params, &grads)?;
        Ok(Some(losses))
    }

    /// One pass over the seen nodes in shuffled minibatches. The cluster
    /// term is included only when `with_cluster` is set and clusters exist.
    pub fn train_epoch(&mut self, g: &MultimodalGraph, with_cluster: bool) -> Result<EpochStats, PipelineError> {
        self.model.check_schema(g)?;
        let mut rng = rng_for(self.config.seed, &[EPOCH_STREAM, self.embed_epochs_done as u64]);
        let seen = seen_nodes(g);
        if seen.is_empty() {
            return Err(PipelineError::Config("graph has no seen nodes to train on".into()));
        }
        let mut queries = seen.clone();
        queries.shuffle(&mut rng);
        let width = temporal_width(g, self.config.omega_partitions);
        let targets = if with_cluster { self.cluster_targets(g.num_nodes()) } else { None };
        let mut sums = [0.0; 4];
        let mut counts = [0usize; 4];
        for chunk in queries.chunks(self.config.batch_size) {
            let Some(l) = self.step(g, chunk, &seen, width, targets.as_ref(), &mut rng)? else {
                continue;
            };
            for (i, v) in [Some(l.total), l.topological, l.temporal, l.cluster].into_iter().enumerate() {
                if let Some(v) = v {
                    sums[i] += v;
                    counts[i] += 1;
                }
            }
        }
        let mean = |i: usize| (counts[i] > 0).then(|| sums[i] / counts[i] as f64);
        let stats = EpochStats {
            epoch: self.embed_epochs_done,
            steps: counts[0],
            loss: mean(0).unwrap_or(0.0),
            topological: mean(1),
            temporal: mean(2),
            cluster: mean(3),
        };
        log::info!(
            "epoch {} loss {:.5} ({} steps)",
            stats.epoch,
            stats.loss,
            stats.steps
        );
        self.embed_epochs_done += 1;
        self.history.push(stats.clone());
        Ok(stats)
    }

    /// Encoder-only training without the cluster term, stopping early once
    /// the loss improved by less than 0.1% over three epochs.
    pub fn pretrain(&mut self, g: &MultimodalGraph) -> Result<Vec<EpochStats>, PipelineError> {
        let mut out: Vec<EpochStats> = Vec::new();
        for _ in 0..self.config.pretrain_epochs {
            let s = self.train_epoch(g, false)?;
            out.push(s);
            if out.len() >= 4 {
                let (old, new) = (out[out.len() - 4].loss, out[out.len() - 1].loss);
                if old != 0.0 && (old - new) / old.abs() < 1e-3 {
                    log::info!("pretraining plateaued after {} epochs", out.len());
                    break;
                }
            }
        }
        self.pretrain_done = true;
        Ok(out)
    }

    /// Primary embeddings of `nodes` with the current parameters. The
    /// neighborhood sampling stream is fixed, so repeated calls agree.
    pub fn embed(&self, g: &MultimodalGraph, nodes: &[NodeId]) -> Result<Matrix, PipelineError> {
        self.model.check_schema(g)?;
        let mut rng = rng_for(self.config.seed, &[EMBED_STREAM]);
        Ok(self
            .model
            .embed_nodes(g, nodes, &self.budgets(), self.config.eval_chunk, &mut rng)?)
    }

    /// Embeddings of every node of `g`, in node order.
    pub fn embed_all(&self, g: &MultimodalGraph) -> Result<Matrix, PipelineError> {
        let nodes: Vec<NodeId> = (0..g.num_nodes()).collect();
        self.embed(g, &nodes)
    }

    /// Embeddings for nodes not seen in training, with frozen parameters.
    /// `g` may extend the training graph by new nodes and edges as long as
    /// the node types and relations are unchanged.
    pub fn infer(&self, g: &MultimodalGraph, nodes: &[NodeId]) -> Result<Matrix, PipelineError> {
        self.embed(g, nodes)
    }

    fn cluster_rng(&self) -> SamplerRng {
        rng_for(self.config.seed, &[CLUSTER_STREAM, self.outer_done as u64])
    }

    /// Recomputes the seen-node embeddings and advances the mixture by
    /// `cluster_steps` steps (k-means initialization the first time).
    pub fn cluster_stage(&mut self, g: &MultimodalGraph) -> Result<(), PipelineError> {
        let nodes = seen_nodes(g);
        let z = self.embed(g, &nodes)?;
        let prior = NWPrior::from_data(&z, self.config.prior_params())?;
        let mut rng = self.cluster_rng();
        let mut state = match self.clusters.take() {
            Some(mut s) if s.assignments.len() == z.rows() && nodes == self.clustered_nodes => {
                s.reopen();
                m_step(&z, &mut s, &prior)?;
                s
            }
            _ => kmeans_init(&z, self.config.k_init.min(z.rows()), &prior, &mut rng)?,
        };
        let summary = run_clustering(&z, &prior, self.config.cluster_steps, &mut rng, &mut state)?;
        log::info!(
            "clustering: K = {} after {} EM steps and {} proposal rounds",
            state.k(),
            summary.em_steps,
            summary.proposal_rounds
        );
        self.prior = Some(prior);
        self.clusters = Some(state);
        self.clustered_nodes = nodes;
        Ok(())
    }

    /// k-means clusters of the current embeddings without further EM.
    pub fn kmeans_only(&mut self, g: &MultimodalGraph) -> Result<(), PipelineError> {
        let nodes = seen_nodes(g);
        let z = self.embed(g, &nodes)?;
        let prior = NWPrior::from_data(&z, self.config.prior_params())?;
        let mut rng = self.cluster_rng();
        self.clusters = Some(kmeans_init(&z, self.config.k_init.min(z.rows()), &prior, &mut rng)?);
        self.prior = Some(prior);
        self.clustered_nodes = nodes;
        Ok(())
    }

    /// One outer iteration: embedding epochs with clusters frozen, then
    /// clustering with the encoder frozen.
    pub fn outer_iteration(&mut self, g: &MultimodalGraph) -> Result<(), PipelineError> {
        for _ in 0..self.config.embed_epochs {
            self.train_epoch(g, true)?;
        }
        self.cluster_stage(g)?;
        self.outer_done += 1;
        Ok(())
    }

    /// Runs the remaining outer iterations up to `config.epochs`.
    pub fn fit(&mut self, g: &MultimodalGraph) -> Result<(), PipelineError> {
        while self.outer_done < self.config.epochs {
            self.outer_iteration(g)?;
        }
        if self.clusters.is_none() {
            self.kmeans_only(g)?;
        }
        Ok(())
    }

    pub fn save(&self, g: &MultimodalGraph, path: &Path) -> Result<(), PipelineError> {
        let ck = Checkpoint {
            graph: GraphFingerprint::of(g),
            trainer: self.clone(),
        };
        let text = serde_json::to_string(&ck).map_err(|e| PipelineError::Checkpoint(e.to_string()))?;
        write_text(path, &text)?;
        Ok(())
    }

    /// Loads a checkpoint, refusing one written for a graph of another
    /// shape when `g` is given.
    pub fn load(path: &Path, g: Option<&MultimodalGraph>) -> Result<Trainer, PipelineError> {
        let text = read_text(path)?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| PipelineError::Checkpoint(e.to_string()))?;
        if let Some(g) = g {
            let here = GraphFingerprint::of(g);
            if here.node_types != ck.graph.node_types || here.relations != ck.graph.relations {
                return Err(PipelineError::Checkpoint(format!(
                    "checkpoint was written for a graph with node types {:?} and relations {:?}",
                    ck.graph.node_types, ck.graph.relations
                )));
            }
        }
        Ok(ck.trainer)
    }
}

/// Result of a complete training run.
pub struct TrainOutput {
    /// Embeddings of every node, in node order.
    pub embeddings: Matrix,
    pub clusters: ClusterState,
    pub trainer: Trainer,
}

/// Pretraining followed by `config.epochs` outer iterations.
pub fn train(g: &MultimodalGraph, config: TrainConfig) -> Result<TrainOutput, PipelineError> {
    let mut trainer = Trainer::new(g, config)?;
    trainer.pretrain(g)?;
    trainer.fit(g)?;
    let embeddings = trainer.embed_all(g)?;
    let clusters = trainer.clusters.clone().expect("fit leaves clusters");
    Ok(TrainOutput {
        embeddings,
        clusters,
        trainer,
    })
}
