//! Context-window and neighborhood samplers.
//!
//! Every sampler is a pure function of the graph, its arguments and the
//! generator it is handed. Callers that sample in parallel derive one
//! generator per (seed, node, epoch) with [`rng_for`].

use std::collections::HashMap;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{MultimodalGraph, NodeId, NodeType, RelationType, TimeRange};

pub type SamplerRng = ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a base seed with a stream of counters (node id, epoch, ...).
pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    stream
        .iter()
        .fold(splitmix(base), |acc, &s| splitmix(acc ^ splitmix(s)))
}

pub fn rng_for(base: u64, stream: &[u64]) -> SamplerRng {
    SamplerRng::seed_from_u64(derive_seed(base, stream))
}

/// Ordered node sequence produced by a walk sampler.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WalkPath {
    pub nodes: Vec<NodeId>,
}

impl WalkPath {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubEdge {
    pub src: u32,
    pub dst: u32,
    pub relation: RelationType,
}

/// Layered typed subgraph around a batch. Local index `i` maps to global
/// node `nodes[i]`; the batch occupies local indices `0..batch_len`.
#[derive(Debug, Clone)]
pub struct SampledSubgraph {
    pub nodes: Vec<NodeId>,
    pub layer: Vec<u8>,
    pub node_types: Vec<NodeType>,
    pub batch_len: usize,
    pub edges: Vec<SubEdge>,
}

impl SampledSubgraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Local indices of the nodes of type `t`, ascending.
    pub fn nodes_of_type(&self, t: NodeType) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.node_types[i] == t).collect()
    }

    pub fn layer_type_count(&self, layer: u8, t: NodeType) -> usize {
        (0..self.nodes.len())
            .filter(|&i| self.layer[i] == layer && self.node_types[i] == t)
            .count()
    }
}

/// Layered expansion around `batch`. Layer `l` (1-based) admits at most
/// `multiples[l-1] * |batch|` new nodes of each node type, drawn uniformly
/// without replacement from the neighbors of the previous layer.
pub fn budget_sample<R: Rng>(
    g: &MultimodalGraph,
    batch: &[NodeId],
    multiples: &[usize],
    rng: &mut R,
) -> SampledSubgraph {
    const ABSENT: u32 = u32::MAX;
    let mut local = vec![ABSENT; g.num_nodes()];
    let mut nodes = Vec::with_capacity(batch.len());
    let mut layer = Vec::with_capacity(batch.len());
    for &v in batch {
        if local[v] == ABSENT {
            local[v] = nodes.len() as u32;
            nodes.push(v);
            layer.push(0u8);
        }
    }
    let batch_len = nodes.len();

    let mut frontier = 0..nodes.len();
    let mut by_type: Vec<Vec<NodeId>> = vec![Vec::new(); g.num_node_types()];
    for (l, &m) in multiples.iter().enumerate() {
        let cap = m.max(1) * batch_len;
        for c in by_type.iter_mut() {
            c.clear();
        }
        for i in frontier.clone() {
            for &u in g.neighbor_ids(nodes[i]) {
                let u = u as usize;
                if local[u] == ABSENT {
                    by_type[g.node_type(u).index()].push(u);
                }
            }
        }
        let start = nodes.len();
        for cands in by_type.iter_mut() {
            cands.sort_unstable();
            cands.dedup();
            if cands.len() > cap {
                let mut picked: Vec<NodeId> = index::sample(rng, cands.len(), cap)
                    .into_iter()
                    .map(|i| cands[i])
                    .collect();
                picked.sort_unstable();
                *cands = picked;
            }
            for &u in cands.iter() {
                local[u] = nodes.len() as u32;
                nodes.push(u);
                layer.push((l + 1) as u8);
            }
        }
        frontier = start..nodes.len();
        if frontier.is_empty() {
            break;
        }
    }

    let mut edges = Vec::new();
    for (i, &v) in nodes.iter().enumerate() {
        for nb in g.neighbors(v) {
            if nb.reverse {
                continue;
            }
            let j = local[nb.node as usize];
            if j != ABSENT {
                edges.push(SubEdge {
                    src: i as u32,
                    dst: j,
                    relation: nb.relation,
                });
            }
        }
    }
    let node_types = nodes.iter().map(|&v| g.node_type(v)).collect();
    SampledSubgraph {
        nodes,
        layer,
        node_types,
        batch_len,
        edges,
    }
}

/// Second-order biased walk of at most `steps` hops from `start`.
///
/// From the pair (previous, current) a neighbor `x` of current is weighted
/// `1/p` when it is the previous node, `1` when it is adjacent to the
/// previous node and `1/q` otherwise. Parallel edges count with
/// multiplicity. The walk ends early only at a node without neighbors.
pub fn node2vec_walk<R: Rng>(
    g: &MultimodalGraph,
    start: NodeId,
    steps: usize,
    p: f64,
    q: f64,
    rng: &mut R,
) -> WalkPath {
    let mut nodes = Vec::with_capacity(steps + 1);
    nodes.push(start);
    let mut weights = Vec::new();
    for _ in 0..steps {
        let cur = *nodes.last().unwrap();
        let nbrs = g.neighbor_ids(cur);
        if nbrs.is_empty() {
            break;
        }
        let next = if nodes.len() == 1 {
            nbrs[rng.random_range(0..nbrs.len())] as NodeId
        } else {
            let prev = nodes[nodes.len() - 2];
            weights.clear();
            let mut total = 0.0;
            for &x in nbrs {
                let x = x as NodeId;
                let w = if x == prev {
                    1.0 / p
                } else if g.adjacent(prev, x) {
                    1.0
                } else {
                    1.0 / q
                };
                total += w;
                weights.push(total);
            }
            let u = rng.random::<f64>() * total;
            let k = weights.partition_point(|&c| c <= u).min(nbrs.len() - 1);
            nbrs[k] as NodeId
        };
        nodes.push(next);
    }
    WalkPath { nodes }
}

fn admissible(g: &MultimodalGraph, head: NodeId, u: NodeId, window: &TimeRange) -> bool {
    match g.node_time(u) {
        Some(t) => t.intersects(window),
        // static nodes are passed through, but never from a static head
        None => *window == TimeRange::UNBOUNDED || g.has_time(head),
    }
}

/// Random walk of at most `length` nodes that only steps onto nodes whose
/// range intersects `window`. When the head has no admissible neighbor the
/// walk restarts from a uniformly chosen visited node; it gives up after
/// `10 * length` consecutive failed restarts.
pub fn temporal_rw<R: Rng>(
    g: &MultimodalGraph,
    start: NodeId,
    window: &TimeRange,
    length: usize,
    rng: &mut R,
) -> WalkPath {
    let mut nodes = Vec::with_capacity(length.max(1));
    nodes.push(start);
    let max_failures = 10 * length;
    let mut failures = 0;
    let mut head = start;
    let mut candidates = Vec::new();
    while nodes.len() < length {
        candidates.clear();
        candidates.extend(
            g.neighbor_ids(head)
                .iter()
                .map(|&u| u as NodeId)
                .filter(|&u| admissible(g, head, u, window)),
        );
        if candidates.is_empty() {
            failures += 1;
            if failures > max_failures {
                break;
            }
            head = nodes[rng.random_range(0..nodes.len())];
            continue;
        }
        failures = 0;
        head = candidates[rng.random_range(0..candidates.len())];
        nodes.push(head);
    }
    WalkPath { nodes }
}

/// Result of a ballroom walk: the sampling timestamp, the window around it
/// and the context paths cut from the pooled temporal walks.
#[derive(Debug, Clone, PartialEq)]
pub struct BallroomContext {
    pub anchor: i64,
    pub window: TimeRange,
    pub paths: Vec<WalkPath>,
}

impl BallroomContext {
    pub fn context_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.paths.iter().flat_map(|p| p.nodes.iter().copied())
    }
}

fn uniform_tick<R: Rng>(range: TimeRange, rng: &mut R) -> i64 {
    if range.is_point() {
        range.start
    } else {
        rng.random_range(range.start..=range.end)
    }
}

/// Timestamp used to anchor the window of `v`: drawn from the range of `v`,
/// or, for a static node, from the first timestamped node met by an
/// unconstrained temporal walk of `length` nodes.
pub fn anchor_timestamp<R: Rng>(g: &MultimodalGraph, v: NodeId, length: usize, rng: &mut R) -> Option<i64> {
    if let Some(range) = g.node_time(v) {
        return Some(uniform_tick(range, rng));
    }
    let walk = temporal_rw(g, v, &TimeRange::UNBOUNDED, length.max(2), rng);
    let hit = walk.nodes.iter().skip(1).find_map(|&u| g.node_time(u))?;
    Some(uniform_tick(hit, rng))
}

fn share_neighbor(g: &MultimodalGraph, a: NodeId, b: NodeId) -> bool {
    let (x, y) = (g.neighbor_ids(a), g.neighbor_ids(b));
    let (mut i, mut j) = (0, 0);
    while i < x.len() && j < y.len() {
        match x[i].cmp(&y[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => return true,
        }
    }
    false
}

/// Drops static nodes that sit within two hops of a static node already
/// kept in the same path.
fn suppress_static_pairs(g: &MultimodalGraph, segment: &[NodeId]) -> Vec<NodeId> {
    let mut kept: Vec<NodeId> = Vec::with_capacity(segment.len());
    for &u in segment {
        if !g.has_time(u) {
            let clash = kept.iter().any(|&w| {
                !g.has_time(w) && (w == u || g.adjacent(u, w) || share_neighbor(g, u, w))
            });
            if clash {
                continue;
            }
        }
        kept.push(u);
    }
    kept
}

/// Ballroom walk around `v` with total window width `width`.
///
/// Returns `None` when no anchor timestamp can be found or no timestamped
/// node falls in the window; the caller skips the node for this epoch.
pub fn ballroom_walk<R: Rng>(
    g: &MultimodalGraph,
    v: NodeId,
    width: i64,
    walks: usize,
    length: usize,
    rng: &mut R,
) -> Option<BallroomContext> {
    let anchor = anchor_timestamp(g, v, length, rng)?;
    let window = TimeRange::centered(anchor, width);
    let candidates = g.nodes_in_window(&window);
    if candidates.is_empty() {
        return None;
    }
    let roots: Vec<NodeId> = if candidates.len() >= walks {
        index::sample(rng, candidates.len(), walks)
            .into_iter()
            .map(|i| candidates[i])
            .collect()
    } else {
        (0..walks)
            .map(|_| candidates[rng.random_range(0..candidates.len())])
            .collect()
    };
    let mut pool = Vec::with_capacity(walks * length);
    for root in roots {
        pool.extend(temporal_rw(g, root, &window, length, rng).nodes);
    }
    pool.shuffle(rng);
    let paths = pool
        .chunks(length.max(1))
        .take(walks)
        .map(|segment| WalkPath {
            nodes: suppress_static_pairs(g, segment),
        })
        .collect();
    Some(BallroomContext {
        anchor,
        window,
        paths,
    })
}

/// `count` nodes drawn uniformly from all nodes, with replacement.
pub fn negative_sample<R: Rng>(g: &MultimodalGraph, count: usize, rng: &mut R) -> Vec<NodeId> {
    let n = g.num_nodes();
    if n == 0 {
        return Vec::new();
    }
    (0..count).map(|_| rng.random_range(0..n)).collect()
}

/// Deduplicated node set with first-occurrence order and a query marker.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    nodes: Vec<NodeId>,
    query: Vec<bool>,
    index: HashMap<NodeId, usize>,
}

impl Batch {
    pub fn new() -> Self {
        Self::default()
    }

    /// Position of `v`, inserting it if needed.
    pub fn insert(&mut self, v: NodeId) -> usize {
        if let Some(&i) = self.index.get(&v) {
            return i;
        }
        let i = self.nodes.len();
        self.nodes.push(v);
        self.query.push(false);
        self.index.insert(v, i);
        i
    }

    pub fn insert_query(&mut self, v: NodeId) -> usize {
        let i = self.insert(v);
        self.query[i] = true;
        i
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn is_query(&self, i: usize) -> bool {
        self.query[i]
    }

    pub fn position(&self, v: NodeId) -> Option<usize> {
        self.index.get(&v).copied()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Union of a query node with its topological, temporal and negative
/// contexts.
pub fn make_batch(query: NodeId, topo: &[NodeId], tempo: &[NodeId], negatives: &[NodeId]) -> Batch {
    let mut b = Batch::new();
    b.insert_query(query);
    for &v in topo.iter().chain(tempo).chain(negatives) {
        b.insert(v);
    }
    b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;
    use crate::stats::chi_square_p_value;
    use std::collections::BTreeSet;

    fn homogeneous(n: usize, edges: &[(usize, usize)]) -> MultimodalGraph {
        let mut b = GraphBuilder::new();
        let t = b.add_node_type("n", n, 0).unwrap();
        let r = b.add_relation("e", t, t).unwrap();
        for &(s, d) in edges {
            b.add_edge(r, s, d, None).unwrap();
        }
        b.build().unwrap()
    }

    fn timed(n: usize, edges: &[(usize, usize)], times: &[Option<i64>]) -> MultimodalGraph {
        let mut b = GraphBuilder::new();
        let t = b.add_node_type("n", n, 0).unwrap();
        let r = b.add_relation("e", t, t).unwrap();
        for &(s, d) in edges {
            b.add_edge(r, s, d, None).unwrap();
        }
        for (i, tm) in times.iter().enumerate() {
            if let Some(tm) = tm {
                b.set_node_time(t, i, TimeRange::point(*tm)).unwrap();
            }
        }
        b.build().unwrap()
    }

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(8, &[1]));
    }

    #[test]
    fn budget_not_binding_returns_full_neighborhood() {
        // path 0-1-2-3-4, batch {0}, two layers
        let g = homogeneous(5, &[(0, 1), (1, 2), (2, 3), (3, 4)]);
        let mut rng = SamplerRng::seed_from_u64(1);
        let sub = budget_sample(&g, &[0], &[8, 8], &mut rng);
        assert_eq!(sub.nodes, vec![0, 1, 2]);
        assert_eq!(sub.layer, vec![0, 1, 2]);
        assert_eq!(sub.batch_len, 1);
        assert_eq!(sub.edges.len(), 2);
    }

    #[test]
    fn budget_cap_is_multiple_of_batch() {
        // two centers joined to twenty leaves each
        let mut edges = Vec::new();
        for leaf in 2..42 {
            edges.push((if leaf < 22 { 0 } else { 1 }, leaf));
        }
        let g = homogeneous(42, &edges);
        let mut rng = SamplerRng::seed_from_u64(3);
        let sub = budget_sample(&g, &[0, 1], &[4], &mut rng);
        assert_eq!(sub.layer_type_count(1, NodeType(0)), 8);
        assert_eq!(sub.len(), 10);
    }

    #[test]
    fn star_budget_inclusion_is_uniform() {
        let edges: Vec<(usize, usize)> = (1..11).map(|l| (0, l)).collect();
        let g = homogeneous(11, &edges);
        let mut counts = [0usize; 11];
        let trials = 10_000;
        for seed in 0..trials {
            let mut rng = SamplerRng::seed_from_u64(seed);
            let sub = budget_sample(&g, &[0], &[3], &mut rng);
            assert_eq!(sub.len(), 4);
            for &v in &sub.nodes[1..] {
                counts[v] += 1;
            }
        }
        let p = 0.3;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts[1..] {
            assert!((c as f64 - p * trials as f64).abs() <= 3.0 * sigma, "count {c}");
        }
    }

    #[test]
    fn induced_edges_cover_sampled_pairs() {
        let g = homogeneous(4, &[(0, 1), (1, 2), (2, 0), (2, 3)]);
        let mut rng = SamplerRng::seed_from_u64(0);
        let sub = budget_sample(&g, &[0], &[4], &mut rng);
        let pairs: BTreeSet<(usize, usize)> = sub
            .edges
            .iter()
            .map(|e| (sub.nodes[e.src as usize], sub.nodes[e.dst as usize]))
            .collect();
        assert_eq!(pairs, BTreeSet::from([(0, 1), (1, 2), (2, 0)]));
    }

    #[test]
    fn node2vec_first_step_on_path_is_uniform() {
        let g = homogeneous(3, &[(0, 1), (1, 2)]);
        let mut counts = [0usize; 3];
        let mut rng = SamplerRng::seed_from_u64(11);
        for _ in 0..10_000 {
            let w = node2vec_walk(&g, 1, 1, 1.0, 1.0, &mut rng);
            counts[w.nodes[1]] += 1;
        }
        let sigma = (10_000.0f64 * 0.25).sqrt();
        assert!((counts[0] as f64 - 5000.0).abs() <= 3.0 * sigma);
        assert_eq!(counts[1], 0);
    }

    #[test]
    fn node2vec_in_out_bias_matches_analytic() {
        // triangle 0-1-2 with tail 2-3; walk state (prev=0, cur=2)
        let g = homogeneous(4, &[(0, 1), (1, 2), (2, 0), (2, 3)]);
        let q = 0.5;
        // weights: back to 0 -> 1/p = 1, to 1 (adjacent to 0) -> 1, to 3 -> 1/q = 2
        let expected = [1.0 / 4.0, 1.0 / 4.0, 2.0 / 4.0];
        let mut observed = [0usize; 3];
        let mut rng = SamplerRng::seed_from_u64(5);
        let mut taken = 0;
        while taken < 10_000 {
            let w = node2vec_walk(&g, 0, 2, 1.0, q, &mut rng);
            if w.nodes[1] != 2 {
                continue;
            }
            let slot = match w.nodes[2] {
                0 => 0,
                1 => 1,
                3 => 2,
                other => panic!("impossible step to {other}"),
            };
            observed[slot] += 1;
            taken += 1;
        }
        assert!(chi_square_p_value(&observed, &expected) > 0.01);
        // the distance-2 hop is twice as likely as under p = q = 1
        let ratio = observed[2] as f64 / observed[1] as f64;
        assert!((ratio - 2.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn node2vec_single_step_and_isolated() {
        let g = homogeneous(3, &[(0, 1)]);
        let mut rng = SamplerRng::seed_from_u64(0);
        let w = node2vec_walk(&g, 0, 1, 1.0, 0.5, &mut rng);
        assert_eq!(w.nodes, vec![0, 1]);
        let w = node2vec_walk(&g, 2, 5, 1.0, 0.5, &mut rng);
        assert_eq!(w.nodes, vec![2]);
    }

    #[test]
    fn temporal_walk_unconstrained_on_cycle() {
        let g = timed(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)], &[Some(1); 5]);
        let mut rng = SamplerRng::seed_from_u64(9);
        let w = temporal_rw(&g, 0, &TimeRange::new(0, 2).unwrap(), 12, &mut rng);
        assert_eq!(w.len(), 12);
        for pair in w.nodes.windows(2) {
            assert!(g.adjacent(pair[0], pair[1]));
        }
    }

    #[test]
    fn temporal_walk_isolated_start() {
        let g = timed(2, &[], &[Some(0), Some(0)]);
        let mut rng = SamplerRng::seed_from_u64(0);
        let w = temporal_rw(&g, 0, &TimeRange::new(0, 0).unwrap(), 5, &mut rng);
        assert_eq!(w.nodes, vec![0]);
    }

    /// Exact distribution of temporal walks on a tiny graph by enumerating
    /// every (path, head, failures) state of the process.
    fn enumerate_walks(
        g: &MultimodalGraph,
        window: &TimeRange,
        length: usize,
        path: Vec<NodeId>,
        head: NodeId,
        failures: usize,
        prob: f64,
        out: &mut HashMap<Vec<NodeId>, f64>,
    ) {
        if path.len() == length || prob < 1e-15 {
            *out.entry(path).or_default() += prob;
            return;
        }
        let cands: Vec<NodeId> = g
            .neighbor_ids(head)
            .iter()
            .map(|&u| u as NodeId)
            .filter(|&u| g.node_time(u).is_none_or(|t| t.intersects(window)))
            .collect();
        if cands.is_empty() {
            if failures + 1 > 10 * length {
                *out.entry(path).or_default() += prob;
                return;
            }
            let k = path.len() as f64;
            for &r in &path.clone() {
                enumerate_walks(g, window, length, path.clone(), r, failures + 1, prob / k, out);
            }
            return;
        }
        let k = cands.len() as f64;
        for &c in &cands {
            let mut next = path.clone();
            next.push(c);
            enumerate_walks(g, window, length, next, c, 0, prob / k, out);
        }
    }

    #[test]
    fn temporal_walk_restart_matches_enumeration() {
        // 0 -- 1 -- 3(out of window), 0 -- 2; start at 1:
        // from 1 the only in-window move is 0; from 0 the walk can reach 2,
        // whose only neighbor is 0, and from 3 nothing is admissible.
        let g = timed(
            4,
            &[(0, 1), (1, 3), (0, 2)],
            &[Some(5), Some(5), Some(5), Some(50)],
        );
        let window = TimeRange::new(0, 10).unwrap();
        let length = 4;
        let mut exact = HashMap::new();
        enumerate_walks(&g, &window, length, vec![1], 1, 0, 1.0, &mut exact);
        let mut paths: Vec<Vec<NodeId>> = exact.keys().cloned().collect();
        paths.sort();
        let expected: Vec<f64> = paths.iter().map(|p| exact[p]).collect();
        let mut observed = vec![0usize; paths.len()];
        let mut rng = SamplerRng::seed_from_u64(21);
        for _ in 0..20_000 {
            let w = temporal_rw(&g, 1, &window, length, &mut rng);
            let slot = paths.iter().position(|p| *p == w.nodes).expect("unreachable path sampled");
            observed[slot] += 1;
        }
        assert!(chi_square_p_value(&observed, &expected) > 0.01);
        assert!(!paths.iter().any(|p| p.contains(&3)));
    }

    #[test]
    fn ballroom_contexts_stay_in_window() {
        let g = timed(3, &[(0, 1)], &[Some(10), Some(11), Some(13)]);
        for seed in 0..10_000 {
            let mut rng = SamplerRng::seed_from_u64(seed);
            let ctx = ballroom_walk(&g, 0, 4, 1, 2, &mut rng).unwrap();
            assert_eq!(ctx.anchor, 10);
            for u in ctx.context_nodes() {
                let t = g.node_time(u).unwrap();
                assert!(t.intersects(&ctx.window));
                assert!((t.start - ctx.anchor).abs() <= 2);
            }
        }
    }

    #[test]
    fn static_query_infers_neighbor_timestamp() {
        let g = timed(2, &[(0, 1)], &[None, Some(7)]);
        let mut rng = SamplerRng::seed_from_u64(0);
        let ctx = ballroom_walk(&g, 0, 4, 2, 3, &mut rng).unwrap();
        assert_eq!(ctx.anchor, 7);
        assert_eq!(ctx.window, TimeRange::new(5, 9).unwrap());
    }

    #[test]
    fn static_query_without_timestamped_reach_is_empty() {
        let g = timed(3, &[(0, 1)], &[None, None, Some(3)]);
        let mut rng = SamplerRng::seed_from_u64(0);
        assert!(ballroom_walk(&g, 0, 4, 2, 3, &mut rng).is_none());
    }

    #[test]
    fn ballroom_pool_is_sliced_into_disjoint_paths() {
        // ten nodes on a cycle sharing one timestamp: each of the three
        // roots contributes exactly ten nodes to a pool of 30
        let edges: Vec<(usize, usize)> = (0..10).map(|i| (i, (i + 1) % 10)).collect();
        let g = timed(10, &edges, &[Some(0); 10]);
        let mut rng = SamplerRng::seed_from_u64(4);
        let ctx = ballroom_walk(&g, 0, 2, 3, 10, &mut rng).unwrap();
        assert_eq!(ctx.paths.len(), 3);
        assert!(ctx.paths.iter().all(|p| p.len() == 10));
        let mut rng2 = SamplerRng::seed_from_u64(4);
        assert_eq!(ballroom_walk(&g, 0, 2, 3, 10, &mut rng2), Some(ctx));
    }

    #[test]
    fn static_pairs_are_suppressed() {
        // static nodes 3,4,5 hang together off the timestamped nodes
        let g = timed(
            6,
            &[(0, 1), (1, 2), (0, 3), (3, 4), (4, 5), (1, 4), (2, 5)],
            &[Some(1), Some(1), Some(2), None, None, None],
        );
        for seed in 0..2000 {
            let mut rng = SamplerRng::seed_from_u64(seed);
            let ctx = ballroom_walk(&g, 0, 4, 3, 6, &mut rng).unwrap();
            for p in &ctx.paths {
                let statics: Vec<NodeId> = p.nodes.iter().copied().filter(|&u| !g.has_time(u)).collect();
                for (i, &a) in statics.iter().enumerate() {
                    for &b in &statics[i + 1..] {
                        assert!(a != b && !g.adjacent(a, b) && !share_neighbor(&g, a, b));
                    }
                }
            }
        }
    }

    #[test]
    fn negative_samples_are_uniform() {
        let g = homogeneous(5, &[]);
        let mut counts = [0usize; 5];
        for seed in 0..10_000 {
            let mut rng = SamplerRng::seed_from_u64(seed);
            for v in negative_sample(&g, 5, &mut rng) {
                counts[v] += 1;
            }
        }
        assert!(chi_square_p_value(&counts, &[0.2; 5]) > 0.01);
        let mut rng = SamplerRng::seed_from_u64(1);
        let one = negative_sample(&g, 1, &mut rng);
        assert_eq!(one.len(), 1);
        assert!(one[0] < 5);
        let a = negative_sample(&g, 8, &mut SamplerRng::seed_from_u64(77));
        let b = negative_sample(&g, 8, &mut SamplerRng::seed_from_u64(77));
        assert_eq!(a, b);
    }

    #[test]
    fn batch_union_semantics() {
        let b = make_batch(0, &[1, 2], &[3], &[4, 5]);
        assert_eq!(b.len(), 6);
        let b = make_batch(0, &[1, 2], &[1, 2], &[1, 2]);
        assert_eq!(b.len(), 3);
        assert!(b.is_query(0));
        assert!(!b.is_query(1));

        let (pe, pt, pn) = ([3, 1, 4, 1, 5], [9, 2, 6, 5], [3, 5, 8, 9, 7]);
        let b = make_batch(2, &pe, &pt, &pn);
        let got: BTreeSet<usize> = b.nodes().iter().copied().collect();
        let mut expected = BTreeSet::from([2]);
        expected.extend(pe);
        expected.extend(pt);
        expected.extend(pn);
        assert_eq!(got, expected);
        assert_eq!(b.len(), expected.len());
        assert_eq!(b.position(2), Some(0));
    }
}
