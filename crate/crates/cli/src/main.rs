use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use reidapt::pipeline::{run_seeds, ExperimentConfig, Pipeline, Stage};

#[derive(Parser)]
#[command(name = "reidapt", version, about = "Domain adaptation workbench for person re-identification")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config and REIDAPT_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config and REIDAPT_OUT.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the source and target datasets.
    GenerateData,
    /// Train the embedding network on the labeled source domain.
    TrainSource,
    /// Evaluate the source model on the target domain ("Direct").
    EvalDirect,
    /// Train the two translation generators.
    TrainCyclegan,
    /// Translate the source dataset into the adapted dataset.
    BuildDa,
    /// Fine-tune the source model on the adapted dataset ("CycleGAN").
    TrainDa,
    /// Cluster target embeddings per camera and merge across cameras.
    PseudoLabel,
    /// Fine-tune on the pseudo-labeled target ("Ours").
    Finetune,
    /// Evaluate every trained model and write the report.
    Evaluate,
    /// Run every stage in order.
    PipelineRun {
        /// Comma-separated seeds; each gets `<out>/seed-<s>` plus a summary.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Print the effective configuration.
    PrintConfig,
}

fn stage_of(c: &Command) -> Option<Stage> {
    Some(match c {
        Command::GenerateData => Stage::GenerateData,
        Command::TrainSource => Stage::TrainSource,
        Command::EvalDirect => Stage::EvalDirect,
        Command::TrainCyclegan => Stage::TrainCycleGan,
        Command::BuildDa => Stage::BuildDa,
        Command::TrainDa => Stage::TrainDa,
        Command::PseudoLabel => Stage::PseudoLabel,
        Command::Finetune => Stage::Finetune,
        Command::Evaluate => Stage::Evaluate,
        Command::PipelineRun { .. } | Command::PrintConfig => return None,
    })
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref()).context("loading configuration")?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    if let Some(stage) = stage_of(&cli.command) {
        let mut p = Pipeline::new(cfg).context("invalid configuration")?;
        let entry = p.run_stage(stage).with_context(|| format!("{stage} failed"))?;
        for (k, v) in &entry.metrics {
            println!("{k} = {v}");
        }
        if stage == Stage::Evaluate {
            print!("{}", std::fs::read_to_string(p.layout().root.join(reidapt::pipeline::RESULTS_FILE))?);
        }
        return Ok(());
    }
    match cli.command {
        Command::PrintConfig => print!("{}", cfg.to_text()),
        Command::PipelineRun { seeds } if seeds.is_empty() => {
            let mut p = Pipeline::new(cfg).context("invalid configuration")?;
            for stage in Stage::ALL {
                eprintln!("running {stage}");
                p.run_stage(stage).with_context(|| format!("{stage} failed"))?;
            }
            print!("{}", std::fs::read_to_string(p.layout().root.join(reidapt::pipeline::RESULTS_FILE))?);
        }
        Command::PipelineRun { seeds } => {
            cfg.validate().context("invalid configuration")?;
            let (_, summary) = run_seeds(&cfg, &seeds).context("pipeline-run")?;
            print!("{}", summary.to_text());
        }
        _ => unreachable!("stages handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
