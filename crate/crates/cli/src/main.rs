use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mmcd::clustering::{kmeans_init, run_clustering, NWPrior};
use mmcd::eval::{
    comparison_table, cf_accuracy, louvain_labels, lp_accuracy, modularity, nmi, split_edges, temporal_labels,
    EdgeSplit, LabelSet, MetricsReport,
};
use mmcd::graph::{MultimodalGraph, TimeRange};
use mmcd::io::{
    assignments_to_tsv, cluster_params_text, embeddings_to_tsv, gen_synthetic, load_dataset, read_embeddings_binary,
    read_text, save_dataset, write_embeddings_binary, write_text, Dataset, SyntheticConfig,
};
use mmcd::pipeline::{seen_nodes, seen_subgraph, temporal_width, TrainConfig, Trainer};
use mmcd::sampling::{anchor_timestamp, ballroom_walk, node2vec_walk, rng_for, temporal_rw};

/// Community detection on heterogeneous temporal graphs.
#[derive(Parser)]
#[command(name = "mmcd", version)]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset directory and optionally write a normalized copy.
    Prepare(PrepareArgs),
    /// Generate a synthetic block-model dataset.
    Gen(GenArgs),
    /// Train the encoder without the clustering objective.
    Pretrain(TrainArgs),
    /// Pretrain (unless resuming) and run the alternating training.
    Train(TrainArgs),
    /// Embed every node with a trained model.
    Embed(EmbedArgs),
    /// Fit the mixture to an embedding file.
    Cluster(ClusterArgs),
    /// Score a training run.
    Eval(EvalArgs),
    /// Print sampled context paths, one per line.
    Walks(WalksArgs),
    /// Combine the metrics of several runs into one table.
    Report(ReportArgs),
}

/// Overrides of the training configuration.
#[derive(Args, Default)]
struct ConfigArgs {
    /// JSON file with configuration fields; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    walk_length: Option<usize>,
    #[arg(long)]
    walks_per_node: Option<usize>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    omega_partitions: Option<usize>,
    #[arg(long)]
    negatives: Option<usize>,
    /// Margin of the context loss.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    beta_e: Option<f64>,
    #[arg(long)]
    beta_t: Option<f64>,
    #[arg(long)]
    beta_c: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    nu_offset: Option<f64>,
    #[arg(long)]
    sigma_scale: Option<f64>,
    #[arg(long)]
    k_init: Option<usize>,
    /// Outer iterations.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    cluster_steps: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(path) => serde_json::from_str(&read_text(path)?)
                .with_context(|| format!("reading configuration {}", path.display()))?,
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($arg:ident => $field:ident),*) => {
                $(if let Some(v) = self.$arg { c.$field = v; })*
            };
        }
        set!(dim => dim, layers => layers, heads => heads, walk_length => walk_length,
            walks_per_node => walks_per_node, p => p, q => q, omega_partitions => omega_partitions,
            negatives => negatives, delta => margin, beta_e => beta_e, beta_t => beta_t, beta_c => beta_c,
            alpha => alpha, kappa => kappa, nu_offset => nu_offset, sigma_scale => sigma_scale,
            k_init => k_init, epochs => epochs, cluster_steps => cluster_steps,
            pretrain_epochs => pretrain_epochs, lr => learning_rate, batch_size => batch_size, seed => seed);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    data: PathBuf,
    /// Write the parsed dataset here in canonical form.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON generator description; replaces the single-type flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    nodes: usize,
    #[arg(long, default_value_t = 4)]
    blocks: usize,
    #[arg(long, default_value_t = 0.05)]
    p_in: f64,
    #[arg(long, default_value_t = 0.005)]
    p_out: f64,
    #[arg(long, default_value_t = 4)]
    time_bins: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Run directory for the checkpoint and outputs.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Hold out 10% of edges for validation and 10% for testing.
    #[arg(long)]
    holdout_edges: bool,
    /// Fraction of nodes excluded from training and embedded by inference.
    #[arg(long, default_value_t = 0.0)]
    holdout_nodes: f64,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    data: PathBuf,
    /// Run directory written by `train` or `pretrain`.
    #[arg(long)]
    run: PathBuf,
    /// Output file; the format follows the extension (`.bin` or TSV).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClusterArgs {
    /// Binary embedding file.
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    run: PathBuf,
    /// Ground-truth label set; defaults to `block` when present.
    #[arg(long)]
    truth: Option<String>,
    /// Time bins for temporal labels when the dataset has no `time` labels.
    #[arg(long, default_value_t = 4)]
    time_bins: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum WalkKind {
    Node2vec,
    Temporal,
    Ballroom,
}

#[derive(Args)]
struct WalksArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = WalkKind::Node2vec)]
    kind: WalkKind,
    /// Start nodes (global ids); all nodes when omitted.
    #[arg(long, value_delimiter = ',')]
    nodes: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Runs as `name=run_dir` or plain run directories.
    #[arg(required = true)]
    runs: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Prepare(a) => prepare(a),
        Command::Gen(a) => generate(a),
        Command::Pretrain(a) => train(a, false),
        Command::Train(a) => train(a, true),
        Command::Embed(a) => embed(a),
        Command::Cluster(a) => cluster(a),
        Command::Eval(a) => evaluate(a),
        Command::Walks(a) => walks(a),
        Command::Report(a) => report(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn summary(g: &MultimodalGraph) -> String {
    let mut s = format!(
        "{} nodes, {} edges, {} timestamped",
        g.num_nodes(),
        g.num_edges(),
        g.num_timestamped()
    );
    for t in g.node_types() {
        s.push_str(&format!("\n  type {}: {} nodes, {} features", t.name, t.count, t.feature_dim));
    }
    for (i, r) in g.relations().iter().enumerate() {
        let n = g.relation_edge_count(mmcd::graph::RelationType(i as u16));
        s.push_str(&format!("\n  relation {}: {n} edges", r.name));
    }
    s
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    println!("{}", summary(&data.graph));
    for (name, set) in &data.labels {
        println!("  labels {name}: {} nodes, {} classes", set.len(), set.num_classes());
    }
    if let Some(out) = a.out {
        create_dir(&out)?;
        save_dataset(&out, &data)?;
    }
    Ok(())
}

fn generate(a: GenArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => serde_json::from_str(&read_text(p)?).with_context(|| format!("reading {}", p.display()))?,
        None => SyntheticConfig::sbm(a.nodes, a.blocks, a.p_in, a.p_out, a.time_bins),
    };
    let data = gen_synthetic(&cfg, &mut rng_for(a.seed, &[]))?;
    create_dir(&a.out)?;
    save_dataset(&a.out, &data)?;
    write_text(&a.out.join("generator.json"), &serde_json::to_string_pretty(&cfg)?)?;
    println!("{}", summary(&data.graph));
    Ok(())
}

const CHECKPOINT: &str = "checkpoint.json";
const SPLIT: &str = "split.json";
const SEEN: &str = "seen.json";

/// The graph a run was trained on: the dataset with held-out edges
/// removed and held-out nodes masked.
fn run_graph(data: &Dataset, run: &Path) -> Result<MultimodalGraph> {
    let mut g = data.graph.clone();
    let split = run.join(SPLIT);
    if split.exists() {
        let s: EdgeSplit = serde_json::from_str(&read_text(&split)?)?;
        g = s.train_graph(&g);
    }
    let seen = run.join(SEEN);
    if seen.exists() {
        let mask: Vec<bool> = serde_json::from_str(&read_text(&seen)?)?;
        if mask.len() != g.num_nodes() {
            bail!("{} does not match the dataset", seen.display());
        }
        g = g.with_seen(mask);
    }
    Ok(g)
}

fn all_nodes(g: &MultimodalGraph) -> Vec<usize> {
    (0..g.num_nodes()).collect()
}

fn train(a: TrainArgs, full: bool) -> Result<()> {
    let data = load_dataset(&a.data)?;
    create_dir(&a.out)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let t = Trainer::load(path, Some(&data.graph))?;
            for f in [SPLIT, SEEN] {
                let src = path.parent().unwrap_or(Path::new(".")).join(f);
                if src.exists() && src != a.out.join(f) {
                    std::fs::copy(&src, a.out.join(f)).with_context(|| format!("copying {}", src.display()))?;
                }
            }
            t
        }
        None => {
            let config = a.config.resolve()?;
            if a.holdout_edges {
                let split = split_edges(&data.graph, [0.8, 0.1, 0.1], &mut rng_for(config.seed, &[0x5e]))?;
                write_text(&a.out.join(SPLIT), &serde_json::to_string(&split)?)?;
            }
            if a.holdout_nodes > 0.0 {
                if a.holdout_nodes >= 1.0 {
                    bail!("--holdout-nodes must be below 1");
                }
                let mut rng = rng_for(config.seed, &[0x5f]);
                let n = data.graph.num_nodes();
                let held = rand::seq::index::sample(&mut rng, n, (a.holdout_nodes * n as f64).round() as usize);
                let mut mask = vec![true; n];
                for i in held.iter() {
                    mask[i] = false;
                }
                write_text(&a.out.join(SEEN), &serde_json::to_string(&mask)?)?;
            }
            let g = run_graph(&data, &a.out)?;
            Trainer::new(&g, config)?
        }
    };
    let g = run_graph(&data, &a.out)?;
    let visible = seen_subgraph(&g);
    write_text(&a.out.join("config.json"), &serde_json::to_string_pretty(&trainer.config)?)?;
    if !trainer.pretrain_done {
        trainer.pretrain(&visible)?;
    }
    if full {
        trainer.fit(&visible)?;
    }
    trainer.save(&g, &a.out.join(CHECKPOINT))?;
    let z = trainer.embed_all(&g)?;
    let nodes = all_nodes(&g);
    write_embeddings_binary(&a.out.join("embeddings.bin"), &z, &nodes)?;
    write_text(&a.out.join("embeddings.tsv"), &embeddings_to_tsv(&z, &nodes))?;
    if let Some(state) = &trainer.clusters {
        if full {
            write_text(&a.out.join("assignments.tsv"), &assignments_to_tsv(&nodes, &state.assign(&z)))?;
            write_text(&a.out.join("clusters.txt"), &cluster_params_text(state))?;
            println!("{} clusters", state.k());
        }
    }
    let mut history = String::from("epoch\tloss\ttopological\ttemporal\tcluster\n");
    let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| v.to_string());
    for s in &trainer.history {
        history.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            s.epoch,
            s.loss,
            fmt(s.topological),
            fmt(s.temporal),
            fmt(s.cluster)
        ));
    }
    write_text(&a.out.join("history.tsv"), &history)?;
    Ok(())
}

fn embed(a: EmbedArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let g = run_graph(&data, &a.run)?;
    let trainer = Trainer::load(&a.run.join(CHECKPOINT), Some(&g))?;
    let z = trainer.embed_all(&g)?;
    let nodes = all_nodes(&g);
    if a.out.extension().is_some_and(|e| e == "bin") {
        write_embeddings_binary(&a.out, &z, &nodes)?;
    } else {
        write_text(&a.out, &embeddings_to_tsv(&z, &nodes))?;
    }
    Ok(())
}

fn cluster(a: ClusterArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let (nodes, z) = read_embeddings_binary(&a.embeddings)?;
    if z.rows() == 0 {
        bail!("{} holds no embeddings", a.embeddings.display());
    }
    let mut prior_cfg = cfg.prior_params();
    prior_cfg.nu = Some(z.cols() as f64 + cfg.nu_offset);
    let prior = NWPrior::from_data(&z, prior_cfg)?;
    let mut rng = rng_for(cfg.seed, &[0xc1]);
    let mut state = kmeans_init(&z, cfg.k_init.min(z.rows()), &prior, &mut rng)?;
    run_clustering(&z, &prior, cfg.cluster_steps, &mut rng, &mut state)?;
    create_dir(&a.out)?;
    write_text(&a.out.join("assignments.tsv"), &assignments_to_tsv(&nodes, &state.assignments))?;
    write_text(&a.out.join("clusters.txt"), &cluster_params_text(&state))?;
    write_text(&a.out.join("config.json"), &serde_json::to_string_pretty(&cfg)?)?;
    println!("{} clusters", state.k());
    Ok(())
}

fn read_assignments(path: &Path, n: usize) -> Result<Vec<usize>> {
    let mut out = vec![None; n];
    for (i, line) in read_text(path)?.lines().enumerate() {
        let mut it = line.split('\t');
        let parse = |s: Option<&str>| -> Result<usize> {
            s.ok_or_else(|| anyhow!("missing field"))?
                .trim()
                .parse()
                .map_err(|e| anyhow!("{e}"))
        };
        let (v, k) = (parse(it.next()), parse(it.next()));
        let (v, k) = v.and_then(|v| Ok((v, k?))).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        if v >= n {
            bail!("{}:{}: node {v} out of range", path.display(), i + 1);
        }
        out[v] = Some(k);
    }
    out.into_iter()
        .enumerate()
        .map(|(v, k)| k.ok_or_else(|| anyhow!("{}: node {v} has no cluster", path.display())))
        .collect()
}

fn nmi_against(assignment: &[usize], labels: &LabelSet) -> f64 {
    nmi(&labels.restrict(assignment), &labels.labels)
}

fn evaluate(a: EvalArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let g = run_graph(&data, &a.run)?;
    let (nodes, z) = read_embeddings_binary(&a.run.join("embeddings.bin"))?;
    if nodes != all_nodes(&g) {
        bail!("embedding file does not cover the dataset's nodes in order");
    }
    let assignment = read_assignments(&a.run.join("assignments.tsv"), g.num_nodes())?;
    let truth_name = a.truth.clone().or_else(|| data.labels.contains_key("block").then(|| "block".to_string()));
    let truth = match &truth_name {
        Some(name) => Some(
            data.labels
                .get(name)
                .ok_or_else(|| anyhow!("dataset has no label set '{name}'"))?,
        ),
        None => None,
    };
    let temporal = match data.labels.get("time") {
        Some(l) => Some(l.clone()),
        None if g.num_timestamped() > 0 => Some(temporal_labels(&data.graph, a.time_bins)?),
        None => None,
    };
    let mut rng = rng_for(a.seed, &[0xe1]);
    let link = louvain_labels(&data.graph, &mut rng);
    let mut report = MetricsReport::default();
    let split = a.run.join(SPLIT);
    let lp = if split.exists() {
        let s: EdgeSplit = serde_json::from_str(&read_text(&split)?)?;
        Some(lp_accuracy(&z, &data.graph, &s, &mut rng)?)
    } else {
        None
    };
    report.push("LP_ACC", lp);
    report.push("CF_ACC L_y", truth.map(|l| cf_accuracy(&z, l, &mut rng)).transpose()?);
    report.push("CF_ACC L_T", temporal.as_ref().map(|l| cf_accuracy(&z, l, &mut rng)).transpose()?);
    report.push("COM_NMI L_y", truth.map(|l| nmi_against(&assignment, l)));
    report.push("COM_NMI L_T", temporal.as_ref().map(|l| nmi_against(&assignment, l)));
    report.push("COM_NMI L_G", Some(nmi_against(&assignment, &link)));
    report.push("Modularity", Some(modularity(&data.graph, &assignment)));
    write_text(&a.run.join("metrics.tsv"), &report.to_tsv())?;
    print!("{}", report.to_table());
    Ok(())
}

fn walks(a: WalksArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let g = load_dataset(&a.data)?.graph;
    let starts = if a.nodes.is_empty() { seen_nodes(&g) } else { a.nodes.clone() };
    if let Some(&v) = starts.iter().find(|&&v| v >= g.num_nodes()) {
        bail!("node {v} out of range");
    }
    let width = temporal_width(&g, cfg.omega_partitions);
    let mut rng = rng_for(cfg.seed, &[0xa1]);
    let mut out = String::new();
    let mut line = |nodes: &[usize]| {
        let s: Vec<String> = nodes.iter().map(|v| v.to_string()).collect();
        out.push_str(&s.join(" "));
        out.push('\n');
    };
    for &v in &starts {
        match a.kind {
            WalkKind::Node2vec => {
                for _ in 0..cfg.walks_per_node {
                    line(&node2vec_walk(&g, v, cfg.walk_length, cfg.p, cfg.q, &mut rng).nodes);
                }
            }
            WalkKind::Temporal => {
                let Some(w) = width else { bail!("dataset has no timestamps") };
                for _ in 0..cfg.walks_per_node {
                    let Some(t) = anchor_timestamp(&g, v, cfg.walk_length, &mut rng) else { continue };
                    let window = TimeRange::centered(t, w);
                    line(&temporal_rw(&g, v, &window, cfg.walk_length, &mut rng).nodes);
                }
            }
            WalkKind::Ballroom => {
                let Some(w) = width else { bail!("dataset has no timestamps") };
                if let Some(ctx) = ballroom_walk(&g, v, w, cfg.walks_per_node, cfg.walk_length, &mut rng) {
                    for p in &ctx.paths {
                        line(&p.nodes);
                    }
                }
            }
        }
    }
    match a.out {
        Some(p) => write_text(&p, &out)?,
        None => print!("{out}"),
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let mut runs = Vec::new();
    let mut names = BTreeMap::new();
    for arg in &a.runs {
        let (name, dir) = match arg.split_once('=') {
            Some((n, d)) => (n.to_string(), PathBuf::from(d)),
            None => {
                let d = PathBuf::from(arg);
                let n = d.file_name().map_or(arg.clone(), |f| f.to_string_lossy().into_owned());
                (n, d)
            }
        };
        if names.insert(name.clone(), ()).is_some() {
            bail!("run name '{name}' given twice");
        }
        let path = dir.join("metrics.tsv");
        let m = MetricsReport::from_tsv(&read_text(&path)?).with_context(|| format!("reading {}", path.display()))?;
        runs.push((name, m));
    }
    let table = comparison_table(&runs);
    match a.out {
        Some(p) => write_text(&p, &table)?,
        None => print!("{table}"),
    }
    Ok(())
}
