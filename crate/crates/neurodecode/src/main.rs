use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use neurodecode::commands::{self, Context};
use neurodecode::config::RunConfig;
use neurodecode::{init_threads, Result};

/// Contrastive EEG-to-speech decoding.
#[derive(Debug, Parser)]
#[command(version, about)]
struct Cli {
    /// INI configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, initialisation and batching.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for all outputs of the run.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Override one configuration key.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a known linear ground truth.
    Synth,
    /// Clean recordings and cut them into window pairs.
    Preprocess,
    /// Train with the contrastive objective.
    Train {
        /// Continue from the latest checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the test split.
    Eval,
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("run.seed={seed}"));
    }
    let ctx = Context {
        config: RunConfig::load(cli.config.as_deref(), &overrides)?,
        run_dir: cli.run_dir,
        force: cli.force,
    };
    match cli.command {
        Command::Synth => {
            let dir = commands::synth(&ctx)?;
            println!("wrote dataset to {}", dir.display());
        }
        Command::Preprocess => {
            let dir = commands::preprocess(&ctx)?;
            println!("wrote windows to {}", dir.display());
        }
        Command::Train { resume } => {
            let s = commands::train(&ctx, resume)?;
            match s.best_val_top1 {
                Some(b) => println!("trained to step {} (best val top-1 {b:.4})", s.step),
                None => println!("trained to step {}", s.step),
            }
        }
        Command::Eval => {
            let r = commands::eval(&ctx)?;
            println!(
                "top-1 {:.4}  top-5 {:.4}  top-10 {:.4}  wer-general {:.4}  wer-vocab {:.4}  levenshtein {:.4}  (n={})",
                r.top1_acc, r.top5_acc, r.top10_acc, r.wer_general, r.wer_vocab, r.levenshtein_norm, r.n_examples
            );
        }
        Command::Gradcheck => commands::gradcheck(&ctx, &mut std::io::stdout())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
