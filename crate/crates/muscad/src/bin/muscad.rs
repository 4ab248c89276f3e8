//! Thin command-line front end over the pipeline stages.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use muscad::pipeline::{
    cmd_cluster, cmd_embed, cmd_evaluate, cmd_label, cmd_lexicon, cmd_pipeline, cmd_preprocess,
    cmd_sweep, cmd_train, PipelineContext, RunOptions, StageOutcome,
};

#[derive(Parser)]
#[command(
    name = "muscad",
    about = "Unsupervised multi-aspect labeling of review corpora",
    version
)]
struct Cli {
    /// Pipeline config file (JSON).
    #[arg(long, global = true, default_value = "muscad.json")]
    config: PathBuf,

    /// Override any config field by dotted name, e.g. --set corpus.min_count=2.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    set: Vec<String>,

    /// Global random seed (overrides the config's `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Replace existing artifacts instead of refusing to overwrite them.
    #[arg(long, global = true)]
    force: bool,

    /// Treat config-hash mismatches against upstream artifacts as errors.
    #[arg(long, global = true)]
    strict: bool,

    /// Worker threads for stages that support parallelism; 1 is fully
    /// deterministic.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the corpus snapshot, vocabulary and co-occurrence statistics.
    Preprocess,
    /// Train CBOW word embeddings.
    Embed,
    /// Cluster embeddings and emit the aspect-matrix seed.
    Cluster(ClusterArgs),
    /// Train the aspect model.
    Train(TrainArgs),
    /// Extract the aspect lexicon (and name categories when configured).
    Lexicon(LexiconArgs),
    /// Annotate reviews with multi-label aspect assignments.
    Label,
    /// Score the lexicon and labels.
    Evaluate(EvaluateArgs),
    /// Run every stage in order.
    Pipeline,
    /// Top-N lexicon sweep with per-N labeling coverage.
    Sweep,
}

#[derive(Args, Default)]
struct ClusterArgs {
    /// Number of clusters.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Args, Default)]
struct TrainArgs {
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    m_negatives: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    ortho_reg: Option<f64>,
}

#[derive(Args, Default)]
struct LexiconArgs {
    /// Terms kept per aspect.
    #[arg(long)]
    top_n: Option<usize>,
}

#[derive(Args, Default)]
struct EvaluateArgs {
    /// Terms scored per aspect.
    #[arg(long)]
    top_n: Option<usize>,
    /// Co-occurrence window size.
    #[arg(long)]
    window: Option<usize>,
    /// `count_level` (default) or `probability_level`.
    #[arg(long)]
    epsilon_mode: Option<String>,
}

fn push(overrides: &mut Vec<(String, String)>, path: &str, value: Option<impl ToString>) {
    if let Some(v) = value {
        overrides.push((path.to_string(), v.to_string()));
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let mut overrides = Vec::new();
    for entry in &cli.set {
        match entry.split_once('=') {
            Some((path, value)) => overrides.push((path.to_string(), value.to_string())),
            None => {
                eprintln!("error: --set expects PATH=VALUE, got {entry:?}");
                return ExitCode::from(1);
            }
        }
    }
    push(&mut overrides, "seed", cli.seed);
    match &cli.command {
        Command::Cluster(args) => {
            push(&mut overrides, "clustering.k", args.k);
            push(&mut overrides, "clustering.max_iter", args.max_iter);
            push(&mut overrides, "clustering.tol", args.tol);
        }
        Command::Train(args) => {
            push(&mut overrides, "training.heads", args.heads);
            push(&mut overrides, "training.m_negatives", args.m_negatives);
            push(&mut overrides, "training.epochs", args.epochs);
            push(&mut overrides, "training.batch_size", args.batch_size);
            push(&mut overrides, "training.learning_rate", args.learning_rate);
            push(&mut overrides, "training.ortho_reg", args.ortho_reg);
        }
        Command::Lexicon(args) => {
            push(&mut overrides, "lexicon.top_n", args.top_n);
        }
        Command::Evaluate(args) => {
            push(&mut overrides, "metrics.top_n", args.top_n);
            push(&mut overrides, "metrics.window", args.window);
            push(&mut overrides, "metrics.epsilon_mode", args.epsilon_mode.clone());
        }
        _ => {}
    }

    let options = RunOptions {
        force: cli.force,
        strict: cli.strict,
        threads: cli.threads.unwrap_or_else(|| {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }),
        command_line: Some(std::env::args().collect::<Vec<_>>().join(" ")),
    };

    let ctx = match PipelineContext::load(&cli.config, &overrides, options) {
        Ok(ctx) => ctx,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };

    let result = match cli.command {
        Command::Preprocess => cmd_preprocess(&ctx),
        Command::Embed => cmd_embed(&ctx),
        Command::Cluster(_) => cmd_cluster(&ctx),
        Command::Train(_) => cmd_train(&ctx),
        Command::Lexicon(_) => cmd_lexicon(&ctx),
        Command::Label => cmd_label(&ctx),
        Command::Evaluate(_) => cmd_evaluate(&ctx),
        Command::Pipeline => cmd_pipeline(&ctx),
        Command::Sweep => cmd_sweep(&ctx),
    };

    match result {
        Ok(StageOutcome {
            artifacts,
            degraded,
        }) => {
            for artifact in &artifacts {
                eprintln!("wrote {}", artifact.display());
            }
            if degraded {
                eprintln!("completed with degraded naming (fallback used)");
                ExitCode::from(3)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
