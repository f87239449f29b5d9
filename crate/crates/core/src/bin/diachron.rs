use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use diachron_core::report::{run_pipeline, PipelineConfig, PipelineError, Stage};

/// Detect and quantify diachronic shifts in lexical semantic modality:
/// windowed corpus construction, skip-gram embeddings, a dynamic embedded
/// topic model, and change-point / novelty reports.
#[derive(Parser)]
#[command(name = "diachron", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Pipeline configuration (TOML or JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (1 guarantees bitwise-reproducible runs).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Override the config's output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Reuse checkpoints from a previous run when their config hash still
    /// matches, instead of recomputing every stage.
    #[arg(long, global = true)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest documents and build the windowed bag-of-words corpus.
    Ingest,
    /// Train skip-gram embeddings (runs ingest first if needed).
    Embed,
    /// Fit the dynamic topic model (runs earlier stages first if needed).
    Train,
    /// Compute change-points and author novelty.
    Measure,
    /// Emit the report files and manifest.
    Report,
    /// Run every stage end to end.
    Run,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let config_path = cli
        .config
        .ok_or_else(|| PipelineError::Config("--config is required".into()))?;
    let mut cfg = PipelineConfig::load(&config_path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = cli.output_dir {
        cfg.output_dir = dir;
    }
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(PipelineError::Config("--threads must be >= 1".into()));
        }
        cfg.threads = threads;
    }
    let upto = match cli.command {
        Command::Ingest => Stage::Corpus,
        Command::Embed => Stage::Embed,
        Command::Train => Stage::Train,
        Command::Measure => Stage::Measure,
        Command::Report | Command::Run => Stage::Report,
    };
    let bundle = run_pipeline(&cfg, upto, cli.resume)?;
    if let Some(bundle) = bundle {
        for f in &bundle.files {
            println!("{}  {}", f.sha256, f.name);
        }
    }
    println!("done: {}", upto.name());
    Ok(())
}
