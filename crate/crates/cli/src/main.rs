use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

use metalora_cli::commands::{cmd_compare, cmd_gen_data, cmd_train, cmd_verify};
use metalora_cli::config::Overrides;
use metalora_core::training::Cue;
use metalora_core::verify::Mutation;

#[derive(Parser)]
#[command(name = "metalora", version, about = "Tensor-network LoRA adapters: verification, data, training and comparison")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum CueArg {
    Orientation,
    Amplitude,
}

#[derive(Subcommand)]
enum Command {
    /// Run the oracle, gradient and determinism suites.
    Verify {
        /// Module (e.g. `tensor_core`) or full suite name.
        #[arg(long)]
        filter: Option<String>,
        /// Also write verify.json and verify.txt here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true, value_parser = parse_mutation)]
        inject_mutation: Option<Mutation>,
    },
    /// Write a synthetic task set as MTK1 blobs plus index.json.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "orientation")]
        cue: CueArg,
    },
    /// Train one variant for one seed; writes a checkpoint and reports.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        lr: Option<f64>,
        /// Display name or kind tag of the arm to train.
        #[arg(long)]
        variant: Option<String>,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train and evaluate every variant for every seed.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        lr: Option<f64>,
    },
}

fn parse_mutation(s: &str) -> Result<Mutation, String> {
    Mutation::parse(s).ok_or_else(|| format!("unknown mutation {s:?}"))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Verify { filter, out, inject_mutation } => {
            let report = cmd_verify(filter, inject_mutation, out.as_deref())?;
            print!("{}", report.to_text());
            match report.first_failure() {
                None => Ok(ExitCode::SUCCESS),
                Some(s) => {
                    eprintln!(
                        "verify failed: {} ({})",
                        s.name,
                        s.failure.as_deref().unwrap_or("tolerance exceeded")
                    );
                    Ok(ExitCode::FAILURE)
                }
            }
        }
        Command::GenData { config, seed, out, cue } => {
            let cue = match cue {
                CueArg::Orientation => Cue::Orientation,
                CueArg::Amplitude => Cue::Amplitude,
            };
            let index = cmd_gen_data(&config, &Overrides { seed, lr: None, out }, cue)?;
            println!("wrote {} samples for seed {}", index.samples.len(), index.seed);
            Ok(ExitCode::SUCCESS)
        }
        Command::Train { config, seed, out, lr, variant, resume } => {
            let report = cmd_train(&config, &Overrides { seed, lr, out }, variant.as_deref(), resume.as_deref())?;
            println!(
                "{} seed {}: {} epochs, {} steps, final loss {:.6}",
                report.variant, report.seed, report.train.epochs, report.train.steps, report.train.final_loss
            );
            for s in &report.knn {
                println!("KNN@{}: {:.2}%", s.k, 100.0 * s.accuracy);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare { config, out, lr } => {
            let report = cmd_compare(&config, &Overrides { seed: None, lr, out })?;
            print!("{}", report.table.to_text());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
