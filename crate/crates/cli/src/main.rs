use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use miss_cli::{Run, RunConfig, StageError};

#[derive(Parser)]
#[command(name = "miss", version, about = "Tree-based retrieval with multi-modal sequence search")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "small.toml")]
    config: PathBuf,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the configured artifact directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the synthetic corpus, users and behaviour logs.
    GenData,
    /// Train and freeze the multi-modal item embeddings.
    TrainEmbed,
    /// Cluster the embeddings into the index tree.
    BuildTree,
    /// Train the node estimator.
    Train,
    /// Beam-search retrieval for every held-out user.
    Retrieve,
    /// Recall and hierarchical recall against the baselines.
    Eval,
    /// Dump search-unit attention rows and histograms.
    ExportAttention,
    /// Train and evaluate the model variants.
    Ablate,
    /// Run every stage except `ablate`.
    Pipeline,
}

fn run(cli: &Cli) -> Result<(), StageError> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| miss_core::Error::Config(format!("--threads: {e}")))?;
    }
    let r = Run::new(cfg)?;
    match cli.command {
        Command::GenData => r.gen_data(),
        Command::TrainEmbed => r.train_embed().map(drop),
        Command::BuildTree => r.build_tree().map(drop),
        Command::Train => r.train().map(drop),
        Command::Retrieve => r.retrieve(),
        Command::Eval => r.eval().map(drop),
        Command::ExportAttention => r.export_attention().map(drop),
        Command::Ablate => r.ablate().map(drop),
        Command::Pipeline => r.pipeline().map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
