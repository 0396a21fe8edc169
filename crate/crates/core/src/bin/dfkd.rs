//! Experiment CLI.
//!
//! Exit codes: 0 ok, 1 domain error (a machine-readable JSON error record is
//! printed to stderr), 2 usage error (clap). The output root comes from
//! `--out-root`, the `DFKD_OUTPUT_ROOT` environment variable, or the config,
//! in that order.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dfkd::config::RunConfig;
use dfkd::harness::{EvalSplit, Harness};

#[derive(Parser)]
#[command(
    name = "dfkd",
    about = "Teacher-guided diffusion data synthesis and knowledge distillation"
)]
struct Cli {
    /// Path to the run config (TOML).
    #[arg(long, global = true, default_value = "configs/desk.toml")]
    config: PathBuf,

    /// Override the output root from the config / environment.
    #[arg(long, global = true)]
    out_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize the datasets and train the teacher classifier.
    TrainTeacher,
    /// Train the optional codec and the conditional denoiser.
    TrainDiffusion,
    /// Synthesize the dataset (interleaves distillation in alternating mode).
    Generate,
    /// Distill a fresh student on a pre-built synthetic manifest.
    Distill {
        /// Manifest directory (defaults to <out>/synth).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Evaluate a classifier checkpoint on a real split.
    Evaluate {
        /// Checkpoint path (defaults to <out>/checkpoints/student.json).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Split to evaluate on.
        #[arg(long, default_value = "eval", value_parser = ["eval", "train"])]
        split: String,
    },
    /// Run the latent-augmentation ablation arms and emit a comparison table.
    AblateLca {
        /// Seeds per arm (medians are reported).
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// Emit an image grid of harvested samples per class.
    Visualize {
        /// Manifest directory (defaults to <out>/synth).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Samples per class row.
        #[arg(long, default_value_t = 8)]
        per_class: usize,
    },
}

fn run(cli: Cli) -> dfkd::Result<()> {
    let cfg = RunConfig::load(&cli.config)?;
    let harness = Harness::new(cfg, cli.out_root.as_deref())?;
    println!("config {} -> {}", cli.config.display(), harness.hash);
    println!("output root: {}", harness.out.root.display());
    match cli.command {
        Command::TrainTeacher => {
            let entry = harness.train_teacher()?;
            print_outputs(&entry.name, entry.wall_clock_s, &entry.outputs);
        }
        Command::TrainDiffusion => {
            let entry = harness.train_diffusion()?;
            print_outputs(&entry.name, entry.wall_clock_s, &entry.outputs);
        }
        Command::Generate => {
            let entry = harness.generate()?;
            print_outputs(&entry.name, entry.wall_clock_s, &entry.outputs);
        }
        Command::Distill { manifest } => {
            let entry = harness.distill(manifest.as_deref())?;
            print_outputs(&entry.name, entry.wall_clock_s, &entry.outputs);
        }
        Command::Evaluate { checkpoint, split } => {
            let split = if split == "train" {
                EvalSplit::Train
            } else {
                EvalSplit::Eval
            };
            let report = harness.evaluate_stage(checkpoint.as_deref(), split)?;
            println!("accuracy: {:.4} over {} items", report.accuracy, report.count);
            for (class, recall) in report.per_class_recall.iter().enumerate() {
                println!("  class {class}: recall {recall:.4}");
            }
        }
        Command::AblateLca { seeds } => {
            let table = harness.ablate_lca(seeds)?;
            println!("{:<14}{:<10}accuracies", "arm", "median");
            for row in &table.rows {
                println!(
                    "{:<14}{:<10.4}{}",
                    row.arm,
                    row.median,
                    row.accuracies
                        .iter()
                        .map(|a| format!("{a:.4}"))
                        .collect::<Vec<_>>()
                        .join(" ")
                );
            }
        }
        Command::Visualize {
            manifest,
            per_class,
        } => {
            let path = harness.visualize(manifest.as_deref(), per_class)?;
            println!("sample grid: {}", path.display());
        }
    }
    Ok(())
}

fn print_outputs(
    name: &str,
    wall_clock_s: f64,
    outputs: &std::collections::BTreeMap<String, String>,
) {
    println!("stage {name} ok ({wall_clock_s:.1}s)");
    for (k, v) in outputs {
        println!("  {k}: {v}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
