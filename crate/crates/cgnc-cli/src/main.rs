//! Command-line front end: training, fine-tuning, attack generation,
//! evaluation, and report rendering.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration/argument error.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::*;

#[derive(Parser)]
#[command(name = "cgnc", version, about = "Text-conditioned adversarial perturbation generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the multi-target conditional generator.
    Train {
        /// Path to the JSON run configuration.
        config: PathBuf,
        /// Root seed override (flags win over the config file).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Masked fine-tuning of a trained checkpoint on one class.
    Finetune {
        config: PathBuf,
        /// Target class name to specialize on.
        #[arg(long)]
        class: String,
        /// Base checkpoint (defaults to <output_dir>/checkpoint.cgnc).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        mask_ratio: Option<f64>,
        #[arg(long)]
        patch_size: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Generate adversarial images for files on disk (no classifier needed).
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target class name.
        #[arg(long)]
        target: String,
        /// Perturbation budget override.
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long, default_value = ".")]
        output_dir: PathBuf,
        /// Input PNG/JPEG files.
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Run the (victim x target x defense) evaluation grid.
    Evaluate {
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Re-render a stored evaluation report.
    Report {
        report: PathBuf,
        /// Also write the flat CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write a [perturbation | adversarial] grid for input images.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        output: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if std::env::var("CGNC_DETERMINISTIC").as_deref() == Ok("1") {
        // all kernels are single-threaded and deterministic already; the
        // variable is honored for scripted runs
        log::info!("CGNC_DETERMINISTIC=1: deterministic single-threaded kernels");
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            seed,
            output_dir,
            epochs,
        } => cmd_train(TrainArgs {
            config,
            seed,
            output_dir,
            epochs,
        }),
        Command::Finetune {
            config,
            class,
            checkpoint,
            mask_ratio,
            patch_size,
            epochs,
            seed,
            output_dir,
        } => cmd_finetune(FinetuneArgs {
            config,
            class,
            checkpoint,
            mask_ratio,
            patch_size,
            epochs,
            seed,
            output_dir,
        }),
        Command::Attack {
            checkpoint,
            target,
            epsilon,
            output_dir,
            images,
        } => cmd_attack(AttackArgs {
            checkpoint,
            target,
            epsilon,
            output_dir,
            images,
        }),
        Command::Evaluate {
            config,
            checkpoint,
            seed,
            output_dir,
        } => cmd_evaluate(EvaluateArgs {
            config,
            checkpoint,
            seed,
            output_dir,
        }),
        Command::Report { report, csv } => cmd_report(ReportArgs { report, csv }),
        Command::Visualize {
            checkpoint,
            target,
            epsilon,
            output,
            images,
        } => cmd_visualize(VisualizeArgs {
            checkpoint,
            target,
            epsilon,
            output,
            images,
        }),
    };
    if let Err(e) = result {
        eprintln!("error: {}", e.message());
        std::process::exit(e.exit_code());
    }
}
