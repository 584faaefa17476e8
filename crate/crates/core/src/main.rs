use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use biasaudit::pipeline::{run_pipeline, PipelineOutcome, RunConfig, Stage};
use biasaudit::{AuditError, Result};

/// Audit a desk-scale model for demographic bias: prompt it, score SAE
/// features, ablate them and measure what changes.
#[derive(Debug, Parser)]
#[command(name = "biasaudit", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, env = "BIASAUDIT_CONFIG")]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true, env = "BIASAUDIT_SEED")]
    seed: Option<u64>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true, env = "BIASAUDIT_WORKERS")]
    workers: Option<usize>,
    /// Override the output directory.
    #[arg(long, global = true, env = "BIASAUDIT_OUT")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load the corpus and write the prompt manifest.
    GenPrompts,
    /// Build or train the model and generate unablated outputs.
    Baseline,
    /// Train SAEs and compute attribution and correlation scores.
    Score,
    /// Select the top-k feature sets for every strategy.
    BuildSets,
    /// Run ablated generation for every cell of the cross-task grid.
    Ablate,
    /// Compute per-cell metrics.
    Metrics,
    /// Emit plots and tables.
    Report,
    /// Run the whole pipeline, or stop after `--stage`.
    Pipeline {
        #[arg(long, env = "BIASAUDIT_STAGE")]
        stage: Option<Stage>,
    },
    /// Print the configured backend's capabilities as JSON.
    Capabilities,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli.config.as_ref().ok_or_else(|| AuditError::Config("no config given (use --config or BIASAUDIT_CONFIG)".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(w) = cli.workers {
        cfg.workers = Some(w);
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn summarize(outcome: &PipelineOutcome) {
    for rec in &outcome.stages {
        let how = if outcome.reused.contains(&rec.stage) { "cached" } else { "ran" };
        println!("{:<9} {how:<6} {} artifacts", rec.stage.name(), rec.artifacts.len());
    }
    println!("output: {}", outcome.out_dir.display());
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let until = match &cli.command {
        Command::GenPrompts => Some(Stage::Prompts),
        Command::Baseline => Some(Stage::Baseline),
        Command::Score => Some(Stage::Scores),
        Command::BuildSets => Some(Stage::Sets),
        Command::Ablate => Some(Stage::Cells),
        Command::Metrics => Some(Stage::Metrics),
        Command::Report => Some(Stage::Report),
        Command::Pipeline { stage } => *stage,
        Command::Capabilities => {
            let outcome = run_pipeline(&cfg, Some(Stage::Model))?;
            let caps = std::fs::read_to_string(outcome.out_dir.join("model").join("capabilities.json"))?;
            print!("{caps}");
            return Ok(());
        }
    };
    summarize(&run_pipeline(&cfg, until)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
