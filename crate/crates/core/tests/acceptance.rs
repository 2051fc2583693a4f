//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line
//! with its measured values and wall time; the process fails if any does.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use mmcd::clustering::{
    e_step, kmeans_init, lower_bound, m_step, run_clustering, NWPrior, PriorParams,
};
use mmcd::eval::{modularity, nmi};
use mmcd::graph::{GraphBuilder, MultimodalGraph, TimeRange};
use mmcd::io::{gen_synthetic, Dataset, RelationConfig, SyntheticConfig, TypeConfig};
use mmcd::model::{cluster_loss_tape, combined_loss_tape, mm_loss_tape, LossWeights, Model, ModelConfig, QueryContext};
use mmcd::numeric::gradcheck::max_relative_error;
use mmcd::numeric::{accumulate, Matrix, NumericError, Tape, Tensor};
use mmcd::pipeline::{seen_subgraph, TrainConfig, Trainer};
use mmcd::sampling::{ballroom_walk, node2vec_walk, rng_for};
use mmcd::stats::chi_square_p_value;

struct Outcome {
    pass: bool,
    detail: String,
    /// Time to charge against the limit when the work ran elsewhere.
    took: Option<Duration>,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail, took: None }
}

fn run(id: usize, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = f();
    let took = o.took.unwrap_or_else(|| start.elapsed());
    let in_time = limit.is_none_or(|l| took <= l);
    let pass = o.pass && in_time;
    let limit_text = limit.map_or(String::new(), |l| format!(" (limit {}s)", l.as_secs()));
    println!(
        "{} criterion {id:>2} {name}: {} [{:.1}s{limit_text}]",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        took.as_secs_f64()
    );
    pass
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn weighted_sum(tape: &mut Tape, t: Tensor, seed: u64) -> Result<Tensor, NumericError> {
    let (r, c) = tape.shape(t);
    let w = tape.leaf(random(r, c, &mut ChaCha8Rng::seed_from_u64(seed)));
    let p = tape.elementwise_mul(t, w)?;
    Ok(tape.sum(p))
}

type OpCheck = Box<dyn Fn(&mut Tape, &[Tensor]) -> Result<Tensor, NumericError>>;

/// Every differentiable tape operation on random inputs.
fn op_fixtures(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Matrix>, OpCheck)> {
    let keep: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
    let seg = Rc::new(vec![0, 0, 1, 2, 2, 2]);
    let hinge_seg = vec![0, 0, 1, 1, 1, 2];
    // inputs away from the hinge kink at zero
    let mut h = random(6, 1, rng);
    for x in h.data_mut() {
        *x += x.signum() * 0.2;
    }
    let mask = Rc::new(random(3, 4, rng));
    vec![
        ("matmul", vec![random(3, 4, rng), random(4, 2, rng)], Box::new(|t, x| {
            let y = t.matmul(x[0], x[1])?;
            weighted_sum(t, y, 1)
        })),
        ("add", vec![random(3, 4, rng), random(3, 4, rng)], Box::new(|t, x| {
            let y = t.add(x[0], x[1])?;
            weighted_sum(t, y, 2)
        })),
        ("sub", vec![random(3, 4, rng), random(3, 4, rng)], Box::new(|t, x| {
            let y = t.sub(x[0], x[1])?;
            weighted_sum(t, y, 3)
        })),
        ("scale", vec![random(3, 4, rng)], Box::new(|t, x| {
            let y = t.scale(x[0], -1.7);
            weighted_sum(t, y, 4)
        })),
        ("add_scalar", vec![random(3, 4, rng)], Box::new(|t, x| {
            let y = t.add_scalar(x[0], 0.3);
            let y = t.elementwise_mul(y, y)?;
            weighted_sum(t, y, 5)
        })),
        ("add_row", vec![random(3, 4, rng), random(1, 4, rng)], Box::new(|t, x| {
            let y = t.add_row(x[0], x[1])?;
            weighted_sum(t, y, 6)
        })),
        ("elementwise_mul", vec![random(3, 4, rng), random(3, 4, rng)], Box::new(|t, x| {
            let y = t.elementwise_mul(x[0], x[1])?;
            weighted_sum(t, y, 7)
        })),
        ("mul_const", vec![random(3, 4, rng)], Box::new(move |t, x| {
            let y = t.mul_const(x[0], mask.clone())?;
            weighted_sum(t, y, 8)
        })),
        ("concat_cols", vec![random(3, 2, rng), random(3, 3, rng)], Box::new(|t, x| {
            let y = t.concat_cols(&[x[0], x[1]])?;
            weighted_sum(t, y, 9)
        })),
        ("concat_rows", vec![random(2, 3, rng), random(4, 3, rng)], Box::new(|t, x| {
            let y = t.concat_rows(&[x[0], x[1]], 3)?;
            weighted_sum(t, y, 10)
        })),
        ("gelu", vec![random(3, 4, rng)], Box::new(|t, x| {
            let y = t.gelu(x[0]);
            weighted_sum(t, y, 11)
        })),
        ("sigmoid", vec![random(3, 4, rng)], Box::new(|t, x| {
            let y = t.sigmoid(x[0]);
            weighted_sum(t, y, 12)
        })),
        ("dropout", vec![random(3, 4, rng)], Box::new(move |t, x| {
            let y = t.dropout(x[0], &keep, 0.4)?;
            weighted_sum(t, y, 13)
        })),
        ("reduce_mean", vec![random(3, 4, rng)], Box::new(|t, x| {
            let y = t.elementwise_mul(x[0], x[0])?;
            t.reduce_mean(y)
        })),
        ("sum", vec![random(3, 4, rng)], Box::new(|t, x| {
            let y = t.gelu(x[0]);
            Ok(t.sum(y))
        })),
        ("l2_norm_sq", vec![random(3, 4, rng)], Box::new(|t, x| {
            let y = t.l2_norm_sq(x[0]);
            weighted_sum(t, y, 14)
        })),
        ("row_dot", vec![random(5, 3, rng), random(5, 3, rng)], Box::new(|t, x| {
            let y = t.row_dot(x[0], x[1])?;
            weighted_sum(t, y, 15)
        })),
        ("head_dot", vec![random(5, 4, rng), random(5, 4, rng)], Box::new(|t, x| {
            let y = t.head_dot(x[0], x[1], 2)?;
            weighted_sum(t, y, 16)
        })),
        ("head_scale", vec![random(5, 2, rng), random(5, 4, rng)], Box::new(|t, x| {
            let y = t.head_scale(x[0], x[1])?;
            weighted_sum(t, y, 17)
        })),
        ("gather_rows", vec![random(4, 3, rng)], Box::new(|t, x| {
            let y = t.gather_rows(x[0], Rc::new(vec![3, 0, 0, 2]))?;
            weighted_sum(t, y, 18)
        })),
        ("scatter_add_rows", vec![random(5, 3, rng)], Box::new(|t, x| {
            let y = t.scatter_add_rows(x[0], Rc::new(vec![1, 0, 1, 3, 1]), 4)?;
            weighted_sum(t, y, 19)
        })),
        ("segment_softmax", vec![random(6, 2, rng)], {
            let seg = seg.clone();
            Box::new(move |t, x| {
                let y = t.segment_softmax(x[0], seg.clone(), 3)?;
                weighted_sum(t, y, 20)
            })
        }),
        ("segment_mean", vec![random(6, 2, rng)], Box::new(move |t, x| {
            let y = t.segment_mean(x[0], seg.clone(), 3)?;
            weighted_sum(t, y, 21)
        })),
        ("hinge_max", vec![h], Box::new(move |t, x| {
            let y = t.hinge_max(x[0], &hinge_seg, 3)?;
            weighted_sum(t, y, 22)
        })),
    ]
}

/// Two node types (featured and featureless), two relations, timestamps.
fn composition_graph() -> MultimodalGraph {
    let mut b = GraphBuilder::new();
    let a = b.add_node_type("a", 4, 3).unwrap();
    let c = b.add_node_type("c", 4, 0).unwrap();
    let ac = b.add_relation("ac", a, c).unwrap();
    let aa = b.add_relation("aa", a, a).unwrap();
    for (u, v) in [(0, 0), (0, 1), (1, 1), (2, 2), (3, 3), (3, 0), (2, 1)] {
        b.add_edge(ac, u, v, None).unwrap();
    }
    for (u, v) in [(0, 1), (1, 2), (2, 3)] {
        b.add_edge(aa, u, v, None).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..4 {
        b.set_node_features(a, i, (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        b.set_node_time(a, i, TimeRange::point(i as i64 * 10)).unwrap();
    }
    b.build().unwrap()
}

/// The combined loss of the full model as a function of its parameters,
/// with sampling and dropout fixed by reseeding.
fn composition_loss(model: &Model, g: &MultimodalGraph) -> (f64, Vec<Option<Matrix>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let batch: Vec<usize> = (0..g.num_nodes()).collect();
    let fwd = model.embed_primary(g, &batch, &[8, 4], true, &mut rng).unwrap();
    let mut tape = fwd.tape;
    let ze = model.topo_head.apply(&model.params, &mut tape, fwd.z).unwrap();
    let zt = model.temporal_head.apply(&model.params, &mut tape, fwd.z).unwrap();
    let topo = vec![
        QueryContext { query: 0, positives: vec![1, 4], negatives: vec![6, 7, 3] },
        QueryContext { query: 2, positives: vec![3, 5, 6], negatives: vec![0, 4] },
    ];
    let tempo = vec![
        QueryContext { query: 1, positives: vec![0, 2], negatives: vec![5, 7] },
        QueryContext { query: 3, positives: vec![2], negatives: vec![4, 6, 0] },
    ];
    let le = mm_loss_tape(&mut tape, ze, &topo, 5.0).unwrap();
    let lt = mm_loss_tape(&mut tape, zt, &tempo, 5.0).unwrap();
    let centers = random(3, model.config.dim, &mut ChaCha8Rng::seed_from_u64(5));
    let lc = cluster_loss_tape(&mut tape, fwd.z, &[0, 1, 2], centers).unwrap();
    let w = LossWeights::new(1.0, 0.7, 0.3, 5.0).unwrap();
    let total = combined_loss_tape(&mut tape, [le, lt, lc], &w).unwrap().unwrap();
    let grads = tape.backward(total).unwrap();
    (tape.scalar(total), accumulate(&model.params, &grads))
}

fn criterion_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_op = (0.0f64, "");
    for (name, inputs, f) in op_fixtures(&mut rng) {
        let err = max_relative_error(&inputs, 1e-5, |t, x| f(t, x)).unwrap();
        if err > worst_op.0 {
            worst_op = (err, name);
        }
    }

    let g = composition_graph();
    let cfg = ModelConfig { dim: 4, layers: 2, heads: 2, embed_dropout: 0.5 };
    let mut model = Model::new(&g, cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let (_, analytic) = composition_loss(&model, &g);
    let ids: Vec<_> = model.params.iter().map(|(id, _, _)| id).collect();
    let h = 1e-6;
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (k, &id) in ids.iter().enumerate() {
        for e in 0..model.params.get(id).len() {
            let orig = model.params.get(id).data()[e];
            model.params.get_mut(id).data_mut()[e] = orig + h;
            let up = composition_loss(&model, &g).0;
            model.params.get_mut(id).data_mut()[e] = orig - h;
            let down = composition_loss(&model, &g).0;
            model.params.get_mut(id).data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k].as_ref().map_or(0.0, |m| m.data()[e]);
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
    }
    let composed = diff.sqrt() / (na.sqrt() + nn.sqrt()).max(1e-300);
    outcome(
        worst_op.0 <= 1e-4 && composed <= 1e-3 && na > 0.0,
        format!(
            "worst op {} rel err {:.2e} (<= 1e-4), full objective rel err {:.2e} (<= 1e-3)",
            worst_op.1, worst_op.0, composed
        ),
    )
}

fn gaussian_blobs(centers: &[[f64; 2]], per: usize, sd: f64, seed: u64) -> (Matrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..centers.len() * per {
        let k = i % centers.len();
        let a: f64 = StandardNormal.sample(&mut rng);
        let b: f64 = StandardNormal.sample(&mut rng);
        rows.push(vec![centers[k][0] + sd * a, centers[k][1] + sd * b]);
        labels.push(k);
    }
    (Matrix::from_rows(&rows).unwrap(), labels)
}

fn criterion_dpmm() -> Outcome {
    // equilateral triangle with side 6 (sigma = 1)
    let centers = [[0.0, 0.0], [6.0, 0.0], [3.0, 6.0 * 3f64.sqrt() / 2.0]];
    let mut good = 0;
    let mut slowest = 0.0f64;
    let mut found = Vec::new();
    for seed in 0..10 {
        let start = Instant::now();
        let (z, labels) = gaussian_blobs(&centers, 334, 1.0, 1000 + seed);
        let z = Matrix::from_vec(1000, 2, z.data()[..2000].to_vec()).unwrap();
        let labels = &labels[..1000];
        let prior = NWPrior::from_data(&z, PriorParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = kmeans_init(&z, 2, &prior, &mut rng).unwrap();
        run_clustering(&z, &prior, 200, &mut rng, &mut state).unwrap();
        let score = nmi(&state.assignments, labels);
        found.push(state.k());
        if state.k() == 3 && score >= 0.95 {
            good += 1;
        }
        slowest = slowest.max(start.elapsed().as_secs_f64());
    }
    outcome(
        good >= 9 && slowest < 60.0,
        format!("{good}/10 seeds with K = 3 and NMI >= 0.95 (K per seed {found:?}), slowest seed {slowest:.2}s"),
    )
}

fn criterion_ballroom() -> Outcome {
    let mut cfg = SyntheticConfig::sbm(800, 4, 0.02, 0.002, 4);
    cfg.node_types.push(TypeConfig {
        name: "static".into(),
        count: 200,
        feature_dim: 0,
        missing_features: 0.0,
        timestamped: false,
    });
    cfg.relations.push(RelationConfig {
        name: "tag".into(),
        src: "node".into(),
        dst: "static".into(),
        p_in: 0.01,
        p_out: 0.002,
    });
    let g = gen_synthetic(&cfg, &mut rng_for(5, &[])).unwrap().graph;
    assert_eq!(g.num_nodes(), 1000);
    let width = g.time_span().unwrap().len() / 20;
    let mut rng = rng_for(6, &[]);
    let (mut total, mut bad, mut static_nodes, mut queries) = (0usize, 0usize, 0usize, 0usize);
    while total < 100_000 {
        let v = rng.random_range(0..g.num_nodes());
        let Some(ctx) = ballroom_walk(&g, v, width, 10, 10, &mut rng) else { continue };
        queries += 1;
        for u in ctx.context_nodes() {
            total += 1;
            match g.node_time(u) {
                Some(t) if !t.intersects(&ctx.window) => bad += 1,
                Some(_) => {}
                None => static_nodes += 1,
            }
        }
    }
    outcome(
        bad == 0,
        format!("{bad} of {total} context nodes outside the window ({static_nodes} static, {queries} queries)"),
    )
}

/// Analytic next-step distribution from the state (prev, cur) on an
/// undirected multigraph given as an edge list.
fn second_order(edges: &[(usize, usize)], n: usize, prev: usize, cur: usize, p: f64, q: f64) -> Vec<f64> {
    let mut mult = vec![vec![0usize; n]; n];
    for &(a, b) in edges {
        mult[a][b] += 1;
        mult[b][a] += 1;
    }
    (0..n)
        .map(|x| {
            let m = mult[cur][x] as f64;
            let w = if x == prev {
                1.0 / p
            } else if mult[prev][x] > 0 {
                1.0
            } else {
                1.0 / q
            };
            m * w
        })
        .collect()
}

fn criterion_node2vec() -> Outcome {
    let fixtures: Vec<(usize, Vec<(usize, usize)>)> = vec![
        (4, vec![(0, 1), (1, 2), (2, 0), (2, 3)]),
        (5, vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (0, 2)]),
        (6, vec![(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3), (2, 3), (2, 3), (0, 5)]),
    ];
    let mut summary = Vec::new();
    let mut pass = true;
    let mut worst_state = 1.0f64;
    for (p, q) in [(1.0, 1.0), (1.0, 0.5), (4.0, 0.25)] {
        let mut stat_obs = Vec::new();
        let mut stat_exp = Vec::new();
        let mut states = 0;
        for (fi, (n, edges)) in fixtures.iter().enumerate() {
            let mut b = GraphBuilder::new();
            let t = b.add_node_type("v", *n, 0).unwrap();
            let r = b.add_relation("e", t, t).unwrap();
            for &(u, v) in edges {
                b.add_edge(r, u, v, None).unwrap();
            }
            let g = b.build().unwrap();
            let mut counts: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
            let mut rng = rng_for(40 + fi as u64, &[(p * 100.0) as u64, (q * 100.0) as u64]);
            let need = 10_000;
            let mut open: Vec<usize> = (0..*n).collect();
            while !open.is_empty() {
                let start = open[rng.random_range(0..open.len())];
                let w = node2vec_walk(&g, start, 2, p, q, &mut rng);
                let c = counts.entry((w.nodes[0], w.nodes[1])).or_insert_with(|| vec![0; *n]);
                if c.iter().sum::<usize>() < need {
                    c[w.nodes[2]] += 1;
                }
                open.retain(|&s| {
                    g.neighbor_ids(s).iter().any(|&v| {
                        counts.get(&(s, v as usize)).is_none_or(|c| c.iter().sum::<usize>() < need)
                    })
                });
            }
            for (&(prev, cur), obs) in &counts {
                let expect = second_order(edges, *n, prev, cur, p, q);
                worst_state = worst_state.min(chi_square_p_value(obs, &expect));
                let total: usize = obs.iter().sum();
                let mass: f64 = expect.iter().sum();
                for x in 0..*n {
                    if expect[x] > 0.0 {
                        stat_obs.push(obs[x]);
                        stat_exp.push(expect[x] / mass * total as f64);
                    } else if obs[x] > 0 {
                        pass = false;
                    }
                }
                states += 1;
            }
        }
        // pooled Pearson statistic over all states; one degree of freedom
        // is lost per state
        let stat: f64 = stat_obs
            .iter()
            .zip(&stat_exp)
            .map(|(&o, &e)| (o as f64 - e).powi(2) / e)
            .sum();
        let dof = stat_obs.len() - states;
        let pv = pooled_p_value(stat, dof);
        pass &= pv > 0.01;
        summary.push(format!("(p={p}, q={q}) {states} states p={pv:.3}"));
    }
    outcome(
        pass,
        format!("{}; smallest single-state p={worst_state:.4}", summary.join(", ")),
    )
}

fn pooled_p_value(stat: f64, dof: usize) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    1.0 - ChiSquared::new(dof as f64).unwrap().cdf(stat)
}

/// All set partitions of `n` elements as restricted growth strings.
fn partitions(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = vec![0; n];
    fn rec(i: usize, max: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == cur.len() {
            out.push(cur.clone());
            return;
        }
        for c in 0..=max + 1 {
            cur[i] = c;
            rec(i + 1, max.max(c), cur, out);
        }
    }
    if n == 0 {
        return vec![vec![]];
    }
    rec(1, 0, &mut cur, &mut out);
    out
}

fn brute_nmi(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let h = |x: &[usize]| {
        let mut s = 0.0;
        for &c in x.iter().collect::<std::collections::BTreeSet<_>>() {
            let p = x.iter().filter(|&&y| y == c).count() as f64 / n;
            s -= p * p.ln();
        }
        s
    };
    let (ha, hb) = (h(a), h(b));
    let mut mi = 0.0;
    for &x in a.iter().collect::<std::collections::BTreeSet<_>>() {
        for &y in b.iter().collect::<std::collections::BTreeSet<_>>() {
            let both = (0..a.len()).filter(|&i| a[i] == x && b[i] == y).count() as f64 / n;
            if both > 0.0 {
                let pa = a.iter().filter(|&&v| v == x).count() as f64 / n;
                let pb = b.iter().filter(|&&v| v == y).count() as f64 / n;
                mi += both * (both / (pa * pb)).ln();
            }
        }
    }
    if ha == 0.0 || hb == 0.0 {
        // both trivial partitions agree exactly; otherwise no information
        return if ha == hb { 1.0 } else { 0.0 };
    }
    mi / (ha * hb).sqrt()
}

fn brute_modularity(n: usize, edges: &[(usize, usize)], c: &[usize]) -> f64 {
    let mut a = vec![vec![0.0; n]; n];
    for &(u, v) in edges {
        a[u][v] += 1.0;
        a[v][u] += 1.0;
    }
    let k: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    let two_m: f64 = k.iter().sum();
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            if c[i] == c[j] {
                q += a[i][j] - k[i] * k[j] / two_m;
            }
        }
    }
    q / two_m
}

fn criterion_metrics() -> Outcome {
    let graphs: Vec<(usize, Vec<(usize, usize)>)> = vec![
        (5, vec![(0, 1), (1, 2), (2, 0), (3, 4)]),
        (7, vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 0), (0, 3), (2, 5), (2, 5)]),
        (8, vec![(0, 1), (0, 2), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 7), (7, 4), (4, 6), (1, 7)]),
    ];
    let mut worst_q = 0.0f64;
    let mut worst_nmi = 0.0f64;
    let mut checked = 0;
    for (n, edges) in &graphs {
        let mut b = GraphBuilder::new();
        let t = b.add_node_type("v", *n, 0).unwrap();
        let r = b.add_relation("e", t, t).unwrap();
        for &(u, v) in edges {
            b.add_edge(r, u, v, None).unwrap();
        }
        let g = b.build().unwrap();
        let parts = partitions(*n);
        let refs = [parts[0].clone(), parts[parts.len() / 3].clone(), parts[parts.len() - 1].clone()];
        for part in &parts {
            worst_q = worst_q.max((modularity(&g, part) - brute_modularity(*n, edges, part)).abs());
            for r in &refs {
                worst_nmi = worst_nmi.max((nmi(part, r) - brute_nmi(part, r)).abs());
            }
            checked += 1;
        }
    }
    outcome(
        worst_q <= 1e-12 && worst_nmi <= 1e-12,
        format!("{checked} partitions, max |dQ| = {worst_q:.1e}, max |dNMI| = {worst_nmi:.1e}"),
    )
}

fn criterion_em() -> Outcome {
    let mut worst_drop = 0.0f64;
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let centers: Vec<[f64; 2]> = (0..4).map(|_| [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)]).collect();
        let (z, _) = gaussian_blobs(&centers, 80, 1.0, 310 + seed);
        let prior = NWPrior::from_data(&z, PriorParams::default()).unwrap();
        let mut state = kmeans_init(&z, 3, &prior, &mut rng).unwrap();
        let mut prev = lower_bound(&z, &state, &prior);
        for _ in 0..20 {
            e_step(&z, &mut state);
            m_step(&z, &mut state, &prior).unwrap();
            let b = lower_bound(&z, &state, &prior);
            worst_drop = worst_drop.max(prev - b);
            prev = b;
        }
    }

    // single cluster against the conjugate posterior written out by hand
    let (z, _) = gaussian_blobs(&[[1.5, -0.5]], 40, 0.8, 7);
    let mut prior = NWPrior::from_data(&z, PriorParams::default()).unwrap();
    prior.mu0 = vec![0.3, 0.9];
    prior.kappa = 2.0;
    let mut state = kmeans_init(&z, 1, &prior, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    for _ in 0..3 {
        e_step(&z, &mut state);
        m_step(&z, &mut state, &prior).unwrap();
    }
    let n = z.rows() as f64;
    let mean: Vec<f64> = (0..2).map(|j| (0..z.rows()).map(|i| z.get(i, j)).sum::<f64>() / n).collect();
    let kn = prior.kappa + n;
    let nun = prior.nu + n;
    let post_mean: Vec<f64> = (0..2).map(|j| (prior.kappa * prior.mu0[j] + n * mean[j]) / kn).collect();
    let mut psi = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            let scatter: f64 = (0..z.rows()).map(|i| (z.get(i, a) - mean[a]) * (z.get(i, b) - mean[b])).sum();
            psi[a][b] = prior.psi0.get(a, b)
                + scatter
                + prior.kappa * n / kn * (mean[a] - prior.mu0[a]) * (mean[b] - prior.mu0[b]);
        }
    }
    let denominator = nun - 2.0 - 1.0;
    let ridge = 1e-6 * (psi[0][0] + psi[1][1]) / denominator / 2.0;
    let gauss = &state.clusters[0].gaussian;
    let mut worst_fit = 0.0f64;
    for a in 0..2 {
        worst_fit = worst_fit.max((gauss.mean()[a] - post_mean[a]).abs());
        for b in 0..2 {
            let expect = psi[a][b] / denominator + if a == b { ridge } else { 0.0 };
            worst_fit = worst_fit.max((gauss.cov().get(a, b) - expect).abs());
        }
    }
    outcome(
        worst_drop <= 1e-9 && worst_fit <= 1e-8 && state.k() == 1,
        format!("largest bound decrease {worst_drop:.1e} (<= 1e-9), K=1 fit deviation {worst_fit:.1e} (<= 1e-8)"),
    )
}

fn smoke_dataset() -> Dataset {
    let cfg = SyntheticConfig {
        node_types: vec![
            TypeConfig { name: "author".into(), count: 4000, feature_dim: 16, missing_features: 0.3, timestamped: false },
            TypeConfig { name: "paper".into(), count: 5000, feature_dim: 32, missing_features: 0.0, timestamped: true },
            TypeConfig { name: "venue".into(), count: 1000, feature_dim: 0, missing_features: 0.0, timestamped: false },
        ],
        relations: vec![
            RelationConfig { name: "writes".into(), src: "author".into(), dst: "paper".into(), p_in: 0.0016, p_out: 0.0001 },
            RelationConfig { name: "cites".into(), src: "paper".into(), dst: "paper".into(), p_in: 0.0012, p_out: 0.0001 },
            RelationConfig { name: "published".into(), src: "paper".into(), dst: "venue".into(), p_in: 0.004, p_out: 0.0001 },
        ],
        blocks: 5,
        time_bins: 5,
        time_span: 1000,
        independent_time: true,
        feature_separation: 1.0,
    };
    gen_synthetic(&cfg, &mut rng_for(10, &[])).unwrap()
}

fn criterion_smoke() -> Outcome {
    let data = smoke_dataset();
    let g = &data.graph;
    let cfg = TrainConfig { epochs: 5, pretrain_epochs: 1, seed: 3, ..TrainConfig::default() };
    let start = Instant::now();
    let fit = |cfg: TrainConfig| {
        let mut t = Trainer::new(g, cfg).unwrap();
        t.pretrain(g).unwrap();
        t.fit(g).unwrap();
        t
    };
    let first = fit(cfg.clone());
    let once = start.elapsed().as_secs_f64();
    let second = fit(cfg);
    let same = first == second;
    let k = first.clusters.as_ref().map_or(0, |c| c.k());
    Outcome {
        pass: same && first.outer_done == 5,
        detail: format!(
            "{} nodes, {} edges, pretraining and 5 outer iterations, K = {k}, rerun identical: {same}",
            g.num_nodes(),
            g.num_edges()
        ),
        took: Some(Duration::from_secs_f64(once)),
    }
}

fn main() {
    let mut results: BTreeMap<usize, bool> = BTreeMap::new();
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let want = |i: usize| only.as_ref().is_none_or(|o| o.contains(&i));
    let min = |m: u64| Some(Duration::from_secs(60 * m));
    if want(1) {
        results.insert(1, run(1, "gradient checks", Some(Duration::from_secs(30)), criterion_gradients));
    }
    if want(2) {
        results.insert(2, run(2, "mixture recovers K", None, criterion_dpmm));
    }
    if want(3) {
        results.insert(3, run(3, "ballroom window", None, criterion_ballroom));
    }
    if want(4) {
        results.insert(4, run(4, "node2vec transitions", None, criterion_node2vec));
    }
    if want(5) || want(6) || want(8) {
        let runs = variants::run_all();
        if want(5) {
            results.insert(5, run(5, "temporal decoupling", min(15), || variants::temporal(&runs)));
        }
        if want(6) {
            results.insert(6, run(6, "topology preservation", min(15), || variants::topology(&runs)));
        }
        if want(8) {
            results.insert(8, run(8, "inductive robustness", None, || variants::inductive(&runs)));
        }
    }
    if want(7) {
        results.insert(7, run(7, "metric oracles", min(1), criterion_metrics));
    }
    if want(9) {
        results.insert(9, run(9, "EM soundness", None, criterion_em));
    }
    if want(10) {
        results.insert(10, run(10, "end-to-end smoke", min(10), criterion_smoke));
    }
    let failed: Vec<usize> = results.iter().filter(|(_, &ok)| !ok).map(|(&i, _)| i).collect();
    println!("acceptance: {} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}

mod variants {
    use super::*;
    use mmcd::eval::{cf_accuracy, lp_accuracy, split_edges};

    pub const SEEDS: [u64; 3] = [0, 1, 2];

    /// Scores of one trained variant.
    pub struct Score {
        pub time_acc: f64,
        pub lp: f64,
        pub secs: f64,
    }

    pub struct SeedRuns {
        pub full: Score,
        pub topo: Score,
        pub temp: Score,
        pub partial: Score,
    }

    pub struct Runs(pub Vec<SeedRuns>);

    /// 4-block SBM on 2,000 nodes with 4 time bins drawn independently of
    /// the blocks.
    pub fn dataset(seed: u64) -> Dataset {
        let n = 2000;
        let cfg = SyntheticConfig::sbm(n, 4, 40.0 / n as f64, 0.5 / n as f64, 4);
        gen_synthetic(&cfg, &mut rng_for(100 + seed, &[])).unwrap()
    }

    pub fn config(seed: u64, beta_e: f64, beta_t: f64) -> TrainConfig {
        TrainConfig {
            dim: 32,
            negatives: 1,
            embed_dropout: 0.0,
            pretrain_epochs: 25,
            epochs: 5,
            embed_epochs: 6,
            beta_e,
            beta_t,
            seed,
            ..TrainConfig::default()
        }
    }

    fn score(z: &Matrix, data: &Dataset, split: &mmcd::eval::EdgeSplit, seed: u64, start: Instant) -> Score {
        let time_acc = cf_accuracy(z, &data.labels["time"], &mut rng_for(seed, &[7])).unwrap();
        let lp = lp_accuracy(z, &data.graph, split, &mut rng_for(seed, &[8])).unwrap();
        Score {
            time_acc,
            lp,
            secs: start.elapsed().as_secs_f64(),
        }
    }

    fn fit(g: &MultimodalGraph, cfg: TrainConfig) -> Trainer {
        let mut t = Trainer::new(g, cfg).unwrap();
        t.pretrain(g).unwrap();
        t.fit(g).unwrap();
        t
    }

    pub fn run_seed(seed: u64) -> SeedRuns {
        let data = dataset(seed);
        let split = split_edges(&data.graph, [0.8, 0.1, 0.1], &mut rng_for(200 + seed, &[])).unwrap();
        let g = split.train_graph(&data.graph);
        let variant = |beta_e: f64, beta_t: f64| {
            let start = Instant::now();
            let t = fit(&g, config(seed, beta_e, beta_t));
            score(&t.embed_all(&g).unwrap(), &data, &split, seed, start)
        };
        let full = variant(1.0, 1.0);
        let topo = variant(1.0, 0.0);
        let temp = variant(0.0, 1.0);

        let start = Instant::now();
        let mut rng = rng_for(300 + seed, &[]);
        let seen: Vec<bool> = (0..g.num_nodes()).map(|_| rng.random_bool(0.75)).collect();
        let observed = g.with_seen(seen);
        let t = fit(&seen_subgraph(&observed), config(seed, 1.0, 1.0));
        let partial = score(&t.embed_all(&observed).unwrap(), &data, &split, seed, start);
        SeedRuns {
            full,
            topo,
            temp,
            partial,
        }
    }

    pub fn run_all() -> Runs {
        Runs(SEEDS.iter().map(|&s| run_seed(s)).collect())
    }

    fn timed(pass: bool, secs: f64, detail: String) -> Outcome {
        Outcome {
            pass,
            detail,
            took: Some(Duration::from_secs_f64(secs)),
        }
    }

    fn mean(runs: &Runs, f: impl Fn(&SeedRuns) -> f64) -> f64 {
        runs.0.iter().map(f).sum::<f64>() / runs.0.len() as f64
    }

    fn list(runs: &Runs, f: impl Fn(&SeedRuns) -> f64) -> String {
        runs.0.iter().map(|r| format!("{:.3}", f(r))).collect::<Vec<_>>().join("/")
    }

    pub fn temporal(runs: &Runs) -> Outcome {
        let full = mean(runs, |r| r.full.time_acc);
        let topo = mean(runs, |r| r.topo.time_acc);
        let secs: f64 = runs.0.iter().map(|r| r.full.secs + r.topo.secs).sum();
        timed(
            full - topo >= 0.10,
            secs,
            format!(
                "time-bin CF full {full:.3} ({}) vs beta_T=0 {topo:.3} ({}), gap {:.3} (>= 0.10), training full and beta_T=0 runs",
                list(runs, |r| r.full.time_acc),
                list(runs, |r| r.topo.time_acc),
                full - topo
            ),
        )
    }

    pub fn topology(runs: &Runs) -> Outcome {
        let topo = mean(runs, |r| r.topo.lp);
        let temp = mean(runs, |r| r.temp.lp);
        let secs: f64 = runs.0.iter().map(|r| r.topo.secs + r.temp.secs).sum();
        timed(
            topo >= 0.70 && topo - temp >= 0.05,
            secs,
            format!(
                "LP beta_T=0 {topo:.3} ({}) (>= 0.70) vs beta_E=0 {temp:.3} ({}), gap {:.3} (>= 0.05), training beta_T=0 and beta_E=0 runs",
                list(runs, |r| r.topo.lp),
                list(runs, |r| r.temp.lp),
                topo - temp
            ),
        )
    }

    pub fn inductive(runs: &Runs) -> Outcome {
        let full = mean(runs, |r| r.full.lp);
        let partial = mean(runs, |r| r.partial.lp);
        outcome(
            (full - partial).abs() <= 0.05,
            format!(
                "LP trained on 75% of nodes {partial:.3} ({}) vs all nodes {full:.3} ({}), difference {:.3} (<= 0.05)",
                list(runs, |r| r.partial.lp),
                list(runs, |r| r.full.lp),
                (full - partial).abs()
            ),
        )
    }
}
