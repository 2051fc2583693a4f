//! Link prediction and classification probes, partition metrics, edge
//! splitting and Louvain reference communities.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{MultimodalGraph, NodeId, RelationType};
use crate::numeric::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("invalid split ratios {0:?}")]
    Ratios([f64; 3]),
    #[error("need at least {needed} distinct labels, found {found}")]
    TooFewClasses { needed: usize, found: usize },
    #[error("temporal labels need at least 2 bins, got {0}")]
    Bins(usize),
    #[error("node {node} is outside the embedding matrix ({rows} rows)")]
    MissingEmbedding { node: NodeId, rows: usize },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeRef {
    pub relation: RelationType,
    pub index: usize,
}

pub type Pair = (NodeId, NodeId);

/// Disjoint positive edge sets with an equal number of sampled non-edges
/// per set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeSplit {
    pub train: Vec<EdgeRef>,
    pub valid: Vec<EdgeRef>,
    pub test: Vec<EdgeRef>,
    pub train_neg: Vec<Pair>,
    pub valid_neg: Vec<Pair>,
    pub test_neg: Vec<Pair>,
}

impl EdgeSplit {
    pub fn pairs(g: &MultimodalGraph, edges: &[EdgeRef]) -> Vec<Pair> {
        edges.iter().map(|e| g.edge(e.relation, e.index)).collect()
    }

    /// `g` restricted to the training edges.
    pub fn train_graph(&self, g: &MultimodalGraph) -> MultimodalGraph {
        let mut keep: Vec<Vec<bool>> = (0..g.num_relations())
            .map(|r| vec![false; g.relation_edge_count(RelationType(r as u16))])
            .collect();
        for e in &self.train {
            keep[e.relation.index()][e.index] = true;
        }
        g.filter_edges(|r, i| keep[r.index()][i])
    }
}

/// Draws a pair of the same node types as relation `r` that is not an
/// edge of `g` (in either direction, under any relation).
fn non_edge<R: Rng>(g: &MultimodalGraph, r: RelationType, rng: &mut R) -> Option<Pair> {
    let info = &g.relations()[r.index()];
    let (src, dst) = (g.type_range(info.src), g.type_range(info.dst));
    for _ in 0..1000 {
        let u = rng.random_range(src.clone());
        let v = rng.random_range(dst.clone());
        if u != v && !g.adjacent(u, v) {
            return Some((u, v));
        }
    }
    let n = g.num_nodes();
    for _ in 0..1000 {
        let (u, v) = (rng.random_range(0..n), rng.random_range(0..n));
        if u != v && !g.adjacent(u, v) {
            return Some((u, v));
        }
    }
    None
}

/// Uniform random split of all edges. Validation and test sizes are
/// floored, the remainder goes to training.
pub fn split_edges<R: Rng>(g: &MultimodalGraph, ratios: [f64; 3], rng: &mut R) -> Result<EdgeSplit, EvalError> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(EvalError::Ratios(ratios));
    }
    let mut all: Vec<EdgeRef> = (0..g.num_relations())
        .flat_map(|r| {
            let relation = RelationType(r as u16);
            (0..g.relation_edge_count(relation)).map(move |index| EdgeRef { relation, index })
        })
        .collect();
    all.shuffle(rng);
    let m = all.len();
    let n_valid = (ratios[1] * m as f64).floor() as usize;
    let n_test = (ratios[2] * m as f64).floor() as usize;
    let test = all.split_off(m - n_test);
    let valid = all.split_off(all.len() - n_valid);
    let train = all;
    let mut negatives = |edges: &[EdgeRef]| -> Vec<Pair> { edges.iter().filter_map(|e| non_edge(g, e.relation, rng)).collect() };
    let train_neg = negatives(&train);
    let valid_neg = negatives(&valid);
    let test_neg = negatives(&test);
    Ok(EdgeSplit {
        train,
        valid,
        test,
        train_neg,
        valid_neg,
        test_neg,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelKind {
    GroundTruth,
    Temporal,
    LinkBased,
}

/// Labels for a subset of nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub kind: LabelKind,
    pub nodes: Vec<NodeId>,
    pub labels: Vec<usize>,
    pub vocab: Vec<String>,
}

impl LabelSet {
    /// Builds a set from string labels, numbering them by first
    /// appearance.
    pub fn from_named(kind: LabelKind, pairs: impl IntoIterator<Item = (NodeId, String)>) -> LabelSet {
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut set = LabelSet {
            kind,
            nodes: Vec::new(),
            labels: Vec::new(),
            vocab: Vec::new(),
        };
        for (v, name) in pairs {
            let next = set.vocab.len();
            let id = *index.entry(name.clone()).or_insert_with(|| {
                set.vocab.push(name);
                next
            });
            set.nodes.push(v);
            set.labels.push(id);
        }
        set
    }

    pub fn from_ids(kind: LabelKind, nodes: Vec<NodeId>, labels: Vec<usize>) -> LabelSet {
        let k = labels.iter().max().map_or(0, |&m| m + 1);
        LabelSet {
            kind,
            nodes,
            labels,
            vocab: (0..k).map(|i| i.to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.vocab.len()
    }

    /// Labels of `assignment` restricted to this set's nodes.
    pub fn restrict(&self, assignment: &[usize]) -> Vec<usize> {
        self.nodes.iter().map(|&v| assignment[v]).collect()
    }
}

/// Equal-frequency bins of the timestamped nodes ordered by start time.
/// A node whose start time equals its predecessor's joins the
/// predecessor's bin.
pub fn temporal_labels(g: &MultimodalGraph, bins: usize) -> Result<LabelSet, EvalError> {
    if bins < 2 {
        return Err(EvalError::Bins(bins));
    }
    let mut timed: Vec<(i64, NodeId)> = (0..g.num_nodes())
        .filter_map(|v| g.node_time(v).map(|t| (t.start, v)))
        .collect();
    timed.sort_unstable();
    let n = timed.len();
    let mut labels = Vec::with_capacity(n);
    for (r, &(t, _)) in timed.iter().enumerate() {
        let bin = r * bins / n;
        let bin = if r > 0 && timed[r - 1].0 == t { bin.min(labels[r - 1]) } else { bin };
        labels.push(bin);
    }
    let mut set = LabelSet::from_ids(LabelKind::Temporal, timed.into_iter().map(|(_, v)| v).collect(), labels);
    set.vocab = (0..bins).map(|b| format!("bin{b}")).collect();
    Ok(set)
}

/// Softmax regression fitted by gradient descent on standardized inputs.
#[derive(Debug, Clone)]
pub struct LogisticModel {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `features × classes`
    weights: Matrix,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Minibatch size; `None` for full-batch steps.
    pub batch: Option<usize>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            epochs: 200,
            learning_rate: 0.1,
            batch: None,
        }
    }
}

impl LogisticModel {
    pub fn fit<R: Rng>(x: &Matrix, y: &[usize], classes: usize, opts: FitOptions, rng: &mut R) -> LogisticModel {
        let (n, f) = x.shape();
        let mut mean = vec![0.0; f];
        let mut scale = vec![0.0; f];
        for i in 0..n {
            for j in 0..f {
                mean[j] += x.get(i, j) / n as f64;
            }
        }
        for i in 0..n {
            for j in 0..f {
                scale[j] += (x.get(i, j) - mean[j]).powi(2) / n as f64;
            }
        }
        for s in &mut scale {
            *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
        }
        let xs = Matrix::from_fn(n, f, |i, j| (x.get(i, j) - mean[j]) / scale[j]);
        let mut model = LogisticModel {
            mean,
            scale,
            weights: Matrix::zeros(f, classes),
            bias: vec![0.0; classes],
        };
        let mut order: Vec<usize> = (0..n).collect();
        let batch = opts.batch.unwrap_or(n).max(1);
        for _ in 0..opts.epochs {
            if opts.batch.is_some() {
                order.shuffle(rng);
            }
            for chunk in order.chunks(batch) {
                model.gradient_step(&xs, y, chunk, opts.learning_rate);
            }
        }
        model
    }

    fn gradient_step(&mut self, xs: &Matrix, y: &[usize], rows: &[usize], lr: f64) {
        let xb = xs.gather_rows(rows);
        let mut p = xb.matmul(&self.weights).expect("probe shape");
        let c = self.bias.len();
        for (r, &i) in rows.iter().enumerate() {
            let row = p.row_mut(r);
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
            softmax(row);
            row[y[i]] -= 1.0;
        }
        let scale = lr / rows.len() as f64;
        let gw = xb.matmul_t(true, &p, false).expect("probe shape");
        for (w, g) in self.weights.data_mut().iter_mut().zip(gw.data()) {
            *w -= scale * g;
        }
        for k in 0..c {
            let g: f64 = (0..rows.len()).map(|r| p.get(r, k)).sum();
            self.bias[k] -= scale * g;
        }
    }

    pub fn predict(&self, x: &Matrix) -> Vec<usize> {
        let xs = Matrix::from_fn(x.rows(), x.cols(), |i, j| (x.get(i, j) - self.mean[j]) / self.scale[j]);
        let s = xs.matmul(&self.weights).expect("probe shape");
        (0..x.rows())
            .map(|i| {
                let row: Vec<f64> = s.row(i).iter().zip(&self.bias).map(|(a, b)| a + b).collect();
                (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best })
            })
            .collect()
    }
}

fn softmax(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

fn check_rows(z: &Matrix, nodes: impl IntoIterator<Item = NodeId>) -> Result<(), EvalError> {
    for v in nodes {
        if v >= z.rows() {
            return Err(EvalError::MissingEmbedding { node: v, rows: z.rows() });
        }
    }
    Ok(())
}

fn dot(z: &Matrix, (u, v): Pair) -> f64 {
    z.row(u).iter().zip(z.row(v)).map(|(a, b)| a * b).sum()
}

/// Positive and negative pairs with the label 1/0.
#[derive(Debug, Clone, Default)]
pub struct PairSet {
    pub positive: Vec<Pair>,
    pub negative: Vec<Pair>,
}

impl PairSet {
    fn scores(&self, z: &Matrix) -> (Matrix, Vec<usize>) {
        let all: Vec<(Pair, usize)> = self
            .positive
            .iter()
            .map(|&p| (p, 1))
            .chain(self.negative.iter().map(|&p| (p, 0)))
            .collect();
        let x = Matrix::from_fn(all.len(), 1, |i, _| dot(z, all[i].0));
        (x, all.into_iter().map(|(_, y)| y).collect())
    }

    fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.positive.iter().chain(&self.negative).flat_map(|&(u, v)| [u, v])
    }
}

/// Link prediction accuracy with a logistic regression on pair inner
/// products, fitted on `train` and scored on `test`; mean of three fits.
pub fn lp_accuracy_pairs<R: Rng>(z: &Matrix, train: &PairSet, test: &PairSet, rng: &mut R) -> Result<f64, EvalError> {
    check_rows(z, train.nodes().chain(test.nodes()))?;
    let (xtr, ytr) = train.scores(z);
    let (xte, yte) = test.scores(z);
    if ytr.is_empty() || yte.is_empty() {
        return Err(EvalError::Invalid("link prediction needs train and test pairs".into()));
    }
    let opts = FitOptions {
        batch: Some(256),
        ..FitOptions::default()
    };
    let mut total = 0.0;
    for _ in 0..3 {
        let m = LogisticModel::fit(&xtr, &ytr, 2, opts, rng);
        total += accuracy(&m.predict(&xte), &yte);
    }
    Ok(total / 3.0)
}

/// [`lp_accuracy_pairs`] on the train and test sets of an edge split.
pub fn lp_accuracy<R: Rng>(z: &Matrix, g: &MultimodalGraph, split: &EdgeSplit, rng: &mut R) -> Result<f64, EvalError> {
    let train = PairSet {
        positive: EdgeSplit::pairs(g, &split.train),
        negative: split.train_neg.clone(),
    };
    let test = PairSet {
        positive: EdgeSplit::pairs(g, &split.test),
        negative: split.test_neg.clone(),
    };
    lp_accuracy_pairs(z, &train, &test, rng)
}

/// Node classification accuracy of a softmax regression on the
/// embeddings, using stratified 80/20 splits; mean of three runs.
pub fn cf_accuracy<R: Rng>(z: &Matrix, labels: &LabelSet, rng: &mut R) -> Result<f64, EvalError> {
    check_rows(z, labels.nodes.iter().copied())?;
    let classes = labels.labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let present = by_class.iter().filter(|c| !c.is_empty()).count();
    if present < 2 {
        return Err(EvalError::TooFewClasses { needed: 2, found: present });
    }
    let mut total = 0.0;
    for _ in 0..3 {
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for members in &by_class {
            let mut m = members.clone();
            m.shuffle(rng);
            let cut = if m.len() < 2 {
                m.len()
            } else {
                (((m.len() as f64) * 0.8).round() as usize).clamp(1, m.len() - 1)
            };
            train.extend_from_slice(&m[..cut]);
            test.extend_from_slice(&m[cut..]);
        }
        let rows = |idx: &[usize]| {
            let nodes: Vec<usize> = idx.iter().map(|&i| labels.nodes[i]).collect();
            (z.gather_rows(&nodes), idx.iter().map(|&i| labels.labels[i]).collect::<Vec<_>>())
        };
        let (xtr, ytr) = rows(&train);
        let (xte, yte) = rows(&test);
        let m = LogisticModel::fit(&xtr, &ytr, classes, FitOptions::default(), rng);
        total += accuracy(&m.predict(&xte), &yte);
    }
    Ok(total / 3.0)
}

fn relabel(a: &[usize]) -> (Vec<usize>, usize) {
    let mut map = HashMap::new();
    let out = a
        .iter()
        .map(|x| {
            let next = map.len();
            *map.entry(*x).or_insert(next)
        })
        .collect();
    (out, map.len())
}

/// Normalized mutual information with the geometric-mean normalization.
pub fn nmi(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "partitions cover different node sets");
    let n = a.len();
    if n == 0 {
        return 1.0;
    }
    let (a, ka) = relabel(a);
    let (b, kb) = relabel(b);
    let mut joint = vec![0usize; ka * kb];
    let mut ca = vec![0usize; ka];
    let mut cb = vec![0usize; kb];
    for (&x, &y) in a.iter().zip(&b) {
        joint[x * kb + y] += 1;
        ca[x] += 1;
        cb[y] += 1;
    }
    let nf = n as f64;
    let entropy = |c: &[usize]| -c.iter().filter(|&&x| x > 0).map(|&x| x as f64 / nf * (x as f64 / nf).ln()).sum::<f64>();
    let (ha, hb) = (entropy(&ca), entropy(&cb));
    if ha == 0.0 || hb == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    let mut mi = 0.0;
    for x in 0..ka {
        for y in 0..kb {
            let c = joint[x * kb + y];
            if c > 0 {
                let pxy = c as f64 / nf;
                mi += pxy * (pxy * nf * nf / (ca[x] as f64 * cb[y] as f64)).ln();
            }
        }
    }
    (mi / (ha * hb).sqrt()).clamp(0.0, 1.0)
}

/// All edges of every relation as undirected pairs, multi-edges kept.
fn homogenized_edges(g: &MultimodalGraph) -> Vec<Pair> {
    (0..g.num_relations())
        .flat_map(|r| g.relation_edges(RelationType(r as u16)))
        .collect()
}

/// Newman modularity of `assignment` (indexed by node) on the
/// homogenized undirected multigraph.
pub fn modularity(g: &MultimodalGraph, assignment: &[usize]) -> f64 {
    modularity_of_edges(&homogenized_edges(g), assignment)
}

pub fn modularity_of_edges(edges: &[Pair], assignment: &[usize]) -> f64 {
    let m = edges.len() as f64;
    if edges.is_empty() {
        return 0.0;
    }
    let (z, k) = relabel(assignment);
    let mut inside = vec![0.0; k];
    let mut degree = vec![0.0; k];
    for &(u, v) in edges {
        degree[z[u]] += 1.0;
        degree[z[v]] += 1.0;
        if z[u] == z[v] {
            inside[z[u]] += 1.0;
        }
    }
    (0..k).map(|c| inside[c] / m - (degree[c] / (2.0 * m)).powi(2)).sum()
}

/// Weighted undirected graph used by the Louvain passes. Self-loop weight
/// is stored once and counts twice towards the degree.
struct WeightedGraph {
    adj: Vec<Vec<(usize, f64)>>,
    self_loops: Vec<f64>,
    total: f64,
}

impl WeightedGraph {
    fn from_edges(n: usize, edges: &[Pair]) -> WeightedGraph {
        let mut maps: Vec<HashMap<usize, f64>> = vec![HashMap::new(); n];
        let mut self_loops = vec![0.0; n];
        for &(u, v) in edges {
            if u == v {
                self_loops[u] += 1.0;
            } else {
                *maps[u].entry(v).or_insert(0.0) += 1.0;
                *maps[v].entry(u).or_insert(0.0) += 1.0;
            }
        }
        WeightedGraph::from_maps(maps, self_loops)
    }

    fn from_maps(maps: Vec<HashMap<usize, f64>>, self_loops: Vec<f64>) -> WeightedGraph {
        let adj: Vec<Vec<(usize, f64)>> = maps
            .into_iter()
            .map(|m| {
                let mut v: Vec<(usize, f64)> = m.into_iter().collect();
                v.sort_unstable_by_key(|e| e.0);
                v
            })
            .collect();
        let total = adj.iter().flatten().map(|e| e.1).sum::<f64>() / 2.0 + self_loops.iter().sum::<f64>();
        WeightedGraph { adj, self_loops, total }
    }

    fn degree(&self, v: usize) -> f64 {
        self.adj[v].iter().map(|e| e.1).sum::<f64>() + 2.0 * self.self_loops[v]
    }
}

/// One local-moving phase; returns whether any node moved.
fn local_moves<R: Rng>(g: &WeightedGraph, community: &mut [usize], rng: &mut R) -> bool {
    let n = g.adj.len();
    let m2 = 2.0 * g.total;
    let degree: Vec<f64> = (0..n).map(|v| g.degree(v)).collect();
    let mut tot = vec![0.0; n];
    for v in 0..n {
        tot[community[v]] += degree[v];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut moved_any = false;
    loop {
        let mut moved = false;
        for &v in &order {
            let own = community[v];
            let mut links: HashMap<usize, f64> = HashMap::new();
            for &(u, w) in &g.adj[v] {
                *links.entry(community[u]).or_insert(0.0) += w;
            }
            tot[own] -= degree[v];
            let gain = |c: usize, l: f64| l - tot[c] * degree[v] / m2;
            let mut best = (gain(own, links.get(&own).copied().unwrap_or(0.0)), own);
            let mut cands: Vec<(usize, f64)> = links.into_iter().collect();
            cands.sort_unstable_by_key(|e| e.0);
            for (c, l) in cands {
                let gc = gain(c, l);
                if gc > best.0 + 1e-12 {
                    best = (gc, c);
                }
            }
            tot[best.1] += degree[v];
            if best.1 != own {
                community[v] = best.1;
                moved = true;
                moved_any = true;
            }
        }
        if !moved {
            break;
        }
    }
    moved_any
}

/// Louvain communities of the homogenized graph, one label per node.
pub fn louvain<R: Rng>(g: &MultimodalGraph, rng: &mut R) -> Vec<usize> {
    louvain_edges(g.num_nodes(), &homogenized_edges(g), rng)
}

pub fn louvain_edges<R: Rng>(n: usize, edges: &[Pair], rng: &mut R) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).collect();
    if edges.is_empty() {
        return labels;
    }
    let mut graph = WeightedGraph::from_edges(n, edges);
    loop {
        let k = graph.adj.len();
        let mut community: Vec<usize> = (0..k).collect();
        if !local_moves(&graph, &mut community, rng) {
            break;
        }
        let (community, kc) = relabel(&community);
        for l in &mut labels {
            *l = community[*l];
        }
        let mut maps: Vec<HashMap<usize, f64>> = vec![HashMap::new(); kc];
        let mut self_loops = vec![0.0; kc];
        for v in 0..k {
            let cv = community[v];
            self_loops[cv] += graph.self_loops[v];
            for &(u, w) in &graph.adj[v] {
                let cu = community[u];
                if cu == cv {
                    // each internal edge is seen from both endpoints
                    self_loops[cv] += w / 2.0;
                } else {
                    *maps[cv].entry(cu).or_insert(0.0) += w;
                }
            }
        }
        graph = WeightedGraph::from_maps(maps, self_loops);
    }
    relabel(&labels).0
}

/// [`louvain`] as a link-based label set over all nodes.
pub fn louvain_labels<R: Rng>(g: &MultimodalGraph, rng: &mut R) -> LabelSet {
    LabelSet::from_ids(LabelKind::LinkBased, (0..g.num_nodes()).collect(), louvain(g, rng))
}

/// Metric rows in a fixed order; missing values print as "-".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<(String, Option<f64>)>,
}

impl MetricsReport {
    pub fn push(&mut self, name: &str, value: Option<f64>) {
        self.rows.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.0 == name).and_then(|r| r.1)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric\tvalue\n");
        for (name, v) in &self.rows {
            match v {
                Some(x) => writeln!(out, "{name}\t{x:.6}").unwrap(),
                None => writeln!(out, "{name}\t-").unwrap(),
            }
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<MetricsReport, EvalError> {
        let mut report = MetricsReport::default();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let (name, value) = line
                .split_once('\t')
                .ok_or_else(|| EvalError::Invalid(format!("line {}: expected two columns", i + 1)))?;
            let value = match value.trim() {
                "-" => None,
                v => Some(v.parse::<f64>().map_err(|e| EvalError::Invalid(format!("line {}: {e}", i + 1)))?),
            };
            report.push(name, value);
        }
        Ok(report)
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.0.len()).max().unwrap_or(6).max(6);
        let mut out = String::new();
        for (name, v) in &self.rows {
            let value = v.map_or("-".to_string(), |x| format!("{x:.4}"));
            writeln!(out, "{name:<width$}  {value:>8}").unwrap();
        }
        out
    }
}

/// Aligns several reports column-wise, one column per run.
pub fn comparison_table(runs: &[(String, MetricsReport)]) -> String {
    let mut names: Vec<String> = Vec::new();
    for (_, r) in runs {
        for (n, _) in &r.rows {
            if !names.contains(n) {
                names.push(n.clone());
            }
        }
    }
    let width = names.iter().map(|n| n.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:<width$}", "metric");
    for (run, _) in runs {
        write!(out, "  {run:>12}").unwrap();
    }
    out.push('\n');
    for n in &names {
        write!(out, "{n:<width$}").unwrap();
        for (_, r) in runs {
            let v = r.get(n).map_or("-".to_string(), |x| format!("{x:.4}"));
            write!(out, "  {v:>12}").unwrap();
        }
        out.push('\n');
    }
    out
}
