//! Command-line entry point: data generation, training, evaluation, graph
//! inspection and the sparse-vs-dense aggregation benchmark.
//!
//! stdout carries data only (CSV); diagnostics go to stderr. Every failure
//! exits nonzero with a single `error: <message>` line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use bgformer::batch_graph::{build_batch_graph, dump_graph};
use bgformer::bench::run_aggregation_bench;
use bgformer::data::{gen_synthetic, load_embeddings, sample_batch, save_embeddings, FileFormat};
use bgformer::numerics::rng::Rng;
use bgformer::trainer::{
    eval_params_from_checkpoint, inference_embed, metric_log_csv, recall_at_k, train_loop,
    Checkpoint, TrainConfig, METRIC_KS,
};

#[derive(Parser)]
#[command(name = "bgformer", version, about = "Batch-graph transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Gaussian-cluster embedding dataset.
    GenData(GenDataArgs),
    /// Train on an embedding dataset; writes checkpoints and a metric log.
    Train(TrainArgs),
    /// Evaluate Recall@K for a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Sample one batch, build its graph, dump edges and print stats.
    Graph(GraphArgs),
    /// Benchmark sparse versus dense attention aggregation.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of classes.
    #[arg(long)]
    classes: usize,
    /// Samples per class.
    #[arg(long)]
    per_class: usize,
    /// Embedding dimensionality.
    #[arg(long)]
    dim: usize,
    /// Within-class Gaussian spread around each unit-norm center.
    #[arg(long, default_value_t = 0.25)]
    spread: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output file.
    #[arg(long)]
    out: PathBuf,
    /// csv or binary.
    #[arg(long, default_value = "binary")]
    format: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key = value config file; all keys required.
    #[arg(long)]
    config: PathBuf,
    /// Dataset file (.csv is parsed as CSV, anything else as binary).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for best.ckpt, final.ckpt, metrics.csv and
    /// test_split.bge.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated recall cutoffs.
    #[arg(long, default_value = "1,2,4,8")]
    ks: String,
}

#[derive(Args)]
struct GraphArgs {
    #[arg(long)]
    data: PathBuf,
    /// Neighbors per node.
    #[arg(long)]
    k: usize,
    /// Batch composition as "p,k_pc".
    #[arg(long)]
    batch: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Edge-dump output file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 1024)]
    batch_size: usize,
    #[arg(long, default_value_t = 64)]
    neighbors: usize,
    #[arg(long, default_value_t = 128)]
    dim: usize,
    #[arg(long, default_value_t = 20)]
    iters: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("error: {}", flatten_clap_error(&e));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", flatten_error(&e));
            ExitCode::FAILURE
        }
    }
}

fn flatten_clap_error(e: &clap::Error) -> String {
    let text = e.to_string();
    let first = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .unwrap_or("invalid arguments");
    first.trim_start_matches("error: ").to_string()
}

fn flatten_error(e: &anyhow::Error) -> String {
    let chain: Vec<String> = e
        .chain()
        .map(|c| c.to_string().replace('\n', " "))
        .collect();
    chain.join(": ")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Graph(a) => cmd_graph(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn detect_format(path: &Path) -> FileFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => FileFormat::Csv,
        _ => FileFormat::Binary,
    }
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    if a.classes == 0 || a.per_class == 0 || a.dim == 0 {
        bail!("--classes, --per-class and --dim must all be >= 1");
    }
    if a.spread < 0.0 {
        bail!("--spread must be >= 0, got {}", a.spread);
    }
    let format = FileFormat::parse(&a.format)?;
    let mut rng = Rng::new(a.seed);
    let ds = gen_synthetic(&mut rng, a.classes, a.per_class, a.dim, a.spread)?;
    save_embeddings(&a.out, &ds, format).with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!(
        "wrote {} rows ({} classes x {}) to {}",
        ds.len(),
        a.classes,
        a.per_class,
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.config)
        .with_context(|| format!("reading {}", a.config.display()))?;
    let mut cfg = TrainConfig::from_kv_text(&text)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let ds = load_embeddings(&a.data, detect_format(&a.data))
        .with_context(|| format!("reading {}", a.data.display()))?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let outcome = train_loop(&cfg, &ds, |r| {
        eprintln!(
            "epoch {} step {} recall@1 {:.4} loss {:.4}",
            r.epoch, r.step, r.recalls[0], r.loss
        );
    })?;

    outcome.best.save(&a.out.join("best.ckpt"))?;
    outcome.final_model.save(&a.out.join("final.ckpt"))?;
    std::fs::write(a.out.join("metrics.csv"), metric_log_csv(&outcome.log))?;
    save_embeddings(
        &a.out.join("test_split.bge"),
        &outcome.test_split,
        FileFormat::Binary,
    )?;

    // Recall table of the best checkpoint on the test split; `eval` on
    // test_split.bge reproduces these numbers exactly.
    let (adapter, hem) = eval_params_from_checkpoint(&outcome.best)?;
    let (z, labels) = inference_embed(&outcome.test_split, &adapter, &hem)?;
    let report = recall_at_k(&z, &labels, &METRIC_KS)?;
    println!("k,recall");
    for (k, r) in report.recalls {
        println!("{k},{r}");
    }
    Ok(())
}

fn parse_ks(s: &str) -> Result<Vec<usize>> {
    let ks: std::result::Result<Vec<usize>, _> =
        s.split(',').map(|t| t.trim().parse::<usize>()).collect();
    let ks = ks.map_err(|_| {
        anyhow::anyhow!("invalid --ks '{s}': expected comma-separated positive integers")
    })?;
    if ks.is_empty() || ks.contains(&0) {
        bail!("invalid --ks '{s}': cutoffs must be positive");
    }
    Ok(ks)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ks = parse_ks(&a.ks)?;
    let ckpt = Checkpoint::load(&a.checkpoint)
        .with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let ds = load_embeddings(&a.data, detect_format(&a.data))
        .with_context(|| format!("reading {}", a.data.display()))?;
    let (adapter, hem) = eval_params_from_checkpoint(&ckpt)?;
    let (z, labels) = inference_embed(&ds, &adapter, &hem)?;
    let report = recall_at_k(&z, &labels, &ks)?;
    if report.excluded_queries > 0 {
        eprintln!(
            "{} singleton-class queries excluded",
            report.excluded_queries
        );
    }
    println!("k,recall");
    for (k, r) in report.recalls {
        println!("{k},{r}");
    }
    Ok(())
}

fn cmd_graph(a: GraphArgs) -> Result<()> {
    let (p, k_pc) = a
        .batch
        .split_once(',')
        .and_then(|(p, k)| {
            Some((
                p.trim().parse::<usize>().ok()?,
                k.trim().parse::<usize>().ok()?,
            ))
        })
        .ok_or_else(|| anyhow::anyhow!("invalid --batch '{}': expected \"p,k_pc\"", a.batch))?;
    let ds = load_embeddings(&a.data, detect_format(&a.data))
        .with_context(|| format!("reading {}", a.data.display()))?;
    let mut rng = Rng::new(a.seed);
    let batch = sample_batch(&ds, p, k_pc, &mut rng)?;
    let g = build_batch_graph(&batch.features, &batch.labels, a.k)?;
    std::fs::write(&a.out, dump_graph(&g, a.k))
        .with_context(|| format!("writing {}", a.out.display()))?;

    let raw: Vec<f64> = g.a_v.iter_edges().map(|(_, _, w)| w).collect();
    let norm: Vec<f64> = g.a_v_norm.iter_edges().map(|(_, _, w)| w).collect();
    let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut classes: Vec<i64> = batch.labels.clone();
    classes.sort_unstable();
    classes.dedup();
    println!("key,value");
    println!("rows,{}", batch.size());
    println!("edges,{}", g.a_v.nnz());
    println!("raw_min,{}", min(&raw));
    println!("raw_max,{}", max(&raw));
    println!("norm_min,{}", min(&norm));
    println!("norm_max,{}", max(&norm));
    println!("label_blocks,{}", classes.len());
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let r = run_aggregation_bench(a.batch_size, a.neighbors, a.dim, a.iters, a.seed)?;
    println!("key,value");
    println!("batch_size,{}", r.batch_size);
    println!("neighbors,{}", r.neighbors);
    println!("dim,{}", r.dim);
    println!("iters,{}", r.iters);
    println!("dense_multiply_adds_per_iter,{}", r.dense_madds_per_iter);
    println!("sparse_multiply_adds_per_iter,{}", r.sparse_madds_per_iter);
    println!("madd_ratio,{}", r.madd_ratio());
    println!("dense_seconds_per_iter,{}", r.dense_secs_per_iter);
    println!("sparse_seconds_per_iter,{}", r.sparse_secs_per_iter);
    println!("speedup,{}", r.speedup());
    println!("max_deviation,{}", r.max_deviation);
    Ok(())
}
