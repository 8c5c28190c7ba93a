// SPDX-License-Identifier: MIT OR Apache-2.0

//! `tomlens`: run the belief probing and steering pipeline stage by stage.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use tomlens::pipeline::{run_all, run_stage, Filters, PipelineConfig, RunOptions, Stage, StageOutcome};
use tomlens::taskgen::{Perspective, Task, VariationKind};
use tomlens::Error;

#[derive(Debug, Parser)]
#[command(name = "tomlens", version, about = "Probe and steer belief representations in a toy transformer")]
struct Cli {
    /// JSON pipeline config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir` in the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Rerun stages even when their config changed or outputs are current.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true, value_enum)]
    perspective: Option<PerspectiveArg>,
    #[arg(long, global = true, value_enum)]
    variation: Option<VariationArg>,
    #[arg(long, global = true, value_enum)]
    task: Option<TaskArg>,
    /// Evaluation prompt template with {story}, {question}, {option_a} and {option_b}.
    #[arg(long, global = true)]
    eval_template: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic stories, items and training documents.
    GenCorpus,
    /// Train the toy language model.
    TrainModel,
    /// Cache final-token activations for every prompt variation.
    Cache,
    /// Train per-layer belief probes.
    Probe,
    /// Probe accuracy on top principal components.
    Pca,
    /// Compute CAA vectors and sweep their strength.
    SteerCaa,
    /// Select ITI heads and sweep their strength.
    SteerIti,
    /// Evaluate held-out items without and with each intervention.
    Eval,
    /// Assemble the final tables.
    Report,
    /// Run every stage in order.
    Run,
}

impl Command {
    fn stage(&self) -> Option<Stage> {
        Some(match self {
            Command::GenCorpus => Stage::GenCorpus,
            Command::TrainModel => Stage::TrainModel,
            Command::Cache => Stage::Cache,
            Command::Probe => Stage::Probe,
            Command::Pca => Stage::Pca,
            Command::SteerCaa => Stage::SteerCaa,
            Command::SteerIti => Stage::SteerIti,
            Command::Eval => Stage::Eval,
            Command::Report => Stage::Report,
            Command::Run => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PerspectiveArg {
    Protagonist,
    Oracle,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VariationArg {
    Original,
    Random,
    Misleading,
    TimeSpec,
    InitialBelief,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskArg {
    ForwardBelief,
    ForwardAction,
    BackwardBelief,
}

impl Cli {
    fn filters(&self) -> Filters {
        Filters {
            perspective: self.perspective.map(|p| match p {
                PerspectiveArg::Protagonist => Perspective::Protagonist,
                PerspectiveArg::Oracle => Perspective::Oracle,
            }),
            variation: self.variation.map(|v| match v {
                VariationArg::Original => VariationKind::Original,
                VariationArg::Random => VariationKind::Random,
                VariationArg::Misleading => VariationKind::Misleading,
                VariationArg::TimeSpec => VariationKind::TimeSpec,
                VariationArg::InitialBelief => VariationKind::InitialBelief,
            }),
            task: self.task.map(|t| match t {
                TaskArg::ForwardBelief => Task::ForwardBelief,
                TaskArg::ForwardAction => Task::ForwardAction,
                TaskArg::BackwardBelief => Task::BackwardBelief,
            }),
        }
    }

    fn pipeline_config(&self) -> tomlens::Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(t) = &self.eval_template {
            cfg.eval_template = Some(t.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::InvalidConfig(_) | Error::ConfigMismatch { .. }) => 2,
        Some(Error::MissingPrerequisite { .. }) => 3,
        Some(
            Error::Divergence { .. } | Error::Numeric(_) | Error::NonFinite { .. } | Error::SingleClass,
        ) => 4,
        _ => 1,
    }
}

fn report(stage: Stage, outcome: StageOutcome) {
    match outcome {
        StageOutcome::Ran => println!("{stage}: done"),
        StageOutcome::UpToDate => println!("{stage}: up to date"),
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = cli.pipeline_config()?;
    let opts = RunOptions {
        force: cli.force,
        filters: cli.filters(),
    };
    match cli.command.stage() {
        Some(stage) => {
            let outcome = run_stage(stage, &cfg, &opts)?;
            report(stage, outcome);
        }
        None => {
            for (stage, outcome) in run_all(&cfg, &opts)? {
                report(stage, outcome);
            }
        }
    }
    println!("artifacts in {}", cfg.out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli).context("tomlens failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn global_flags_follow_the_subcommand() {
        let cli = Cli::try_parse_from([
            "tomlens", "probe", "--perspective", "oracle", "--variation", "time-spec", "--seed", "3",
        ])
        .unwrap();
        let f = cli.filters();
        assert_eq!(f.perspective, Some(Perspective::Oracle));
        assert_eq!(f.variation, Some(VariationKind::TimeSpec));
        assert_eq!(cli.command.stage(), Some(Stage::Probe));
        assert_eq!(cli.pipeline_config().unwrap().corpus.seed, 3);
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        let code = |e: Error| exit_code(&anyhow::Error::new(e).context("wrapped"));
        assert_eq!(code(Error::Config("x".into())), 2);
        assert_eq!(code(Error::ConfigMismatch { stage: "probe".into() }), 2);
        assert_eq!(
            code(Error::MissingPrerequisite {
                stage: "train-model".into(),
                missing: PathBuf::from("model/weights.bin"),
            }),
            3
        );
        assert_eq!(code(Error::Divergence { step: 4, loss: f64::NAN }), 4);
        assert_eq!(code(Error::SingleClass), 4);
        assert_eq!(code(Error::EmptyAnswer), 1);
    }
}
