//! Configuration, checkpoints and the subcommands of the `patchdiff` binary.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.

pub mod checkpoint;
mod config;
mod workspace;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, SEGMENTER_CONTRACT};
pub use config::{DiffusionTraining, ExperimentConfig, Paths, SamplingConfig};
pub use workspace::{Evaluation, SampleRequest, SamplingEntry, SamplingManifest, Workspace};

use crate::error::{Error, Result};
use crate::phantom::Split;
use crate::segeval::{Arm, RUNS};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        e if e.is_numerical() => EXIT_NUMERICAL,
        Error::MissingPrerequisite { .. } => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ArmArg {
    Real,
    Synthetic,
    Targeted,
}

impl From<ArmArg> for Arm {
    fn from(a: ArmArg) -> Self {
        match a {
            ArmArg::Real => Arm::Real,
            ArmArg::Synthetic => Arm::Synthetic,
            ArmArg::Targeted => Arm::Targeted,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Fast,
    Full,
}

#[derive(Debug, Parser)]
#[command(name = "patchdiff", version, about = "Patch-wise conditional diffusion and segmentation utility experiments")]
pub struct Cli {
    /// Experiment config (JSON). Defaults to the fast preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root; overrides `paths.out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Root seed; overrides `root_seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a preset config to stdout.
    InitConfig {
        #[arg(long, value_enum, default_value = "fast")]
        preset: Preset,
    },
    /// Generate the phantom dataset and manifest.
    MakeData,
    /// Train the denoiser patch-wise on the training split.
    TrainDiffusion {
        /// Continue from the existing checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Generate synthetic images from a manifest's masks.
    Sample {
        /// Dataset manifest supplying masks; defaults to the generated dataset.
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Images per mask; defaults to `sampling.per_mask`.
        #[arg(long)]
        per_mask: Option<usize>,
        /// Output name under `synthetic/`; defaults to the split name.
        #[arg(long)]
        name: Option<String>,
    },
    /// Train one segmenter for an arm.
    TrainSeg {
        #[arg(long, value_enum)]
        arm: ArmArg,
        /// Index into `run_seeds`.
        #[arg(long, default_value_t = 0)]
        run: usize,
    },
    /// Score a trained segmenter on the validation and test splits.
    Evaluate {
        #[arg(long, value_enum)]
        arm: ArmArg,
        #[arg(long, default_value_t = 0)]
        run: usize,
    },
    /// Train all seeds of an arm and write its utility report.
    RunExperiment {
        #[arg(long, value_enum)]
        arm: ArmArg,
    },
    /// Print the summary table over the available reports.
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::fast(),
    };
    if let Some(s) = cli.seed {
        cfg.root_seed = s;
    }
    Ok(cfg)
}

fn run_seed(ws: &Workspace, run: usize) -> Result<u64> {
    ws.config
        .run_seeds
        .get(run)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("--run must be below {RUNS}, got {run}")))
}

/// Execute one parsed command, printing its result to stdout.
pub fn run(cli: Cli) -> Result<()> {
    if let Command::InitConfig { preset } = cli.command {
        let cfg = match preset {
            Preset::Fast => ExperimentConfig::fast(),
            Preset::Full => ExperimentConfig::full(),
        };
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let ws = Workspace::new(load_config(&cli)?, cli.out.clone())?;
    match cli.command {
        Command::InitConfig { .. } => unreachable!("handled above"),
        Command::MakeData => {
            let m = ws.make_data()?;
            println!("wrote {} cases to {}", m.cases.len(), ws.data_dir().display());
            println!("manifest sha256 {}", m.hash());
        }
        Command::TrainDiffusion { resume } => {
            let recs = ws.train_diffusion(resume)?;
            match recs.last() {
                Some(r) => println!("trained to step {} (loss {:.5})", r.step, r.loss),
                None => println!("checkpoint already at the configured step count"),
            }
            println!("checkpoint {}", ws.denoiser_path().display());
        }
        Command::Sample { masks, split, per_mask, name } => {
            let split: Split = split.into();
            let mut req = ws.synthetic_request();
            req.masks = masks.unwrap_or(req.masks);
            req.split = split;
            req.per_mask = per_mask.unwrap_or(req.per_mask);
            req.name = name.unwrap_or_else(|| format!("{split:?}").to_lowercase());
            let m = ws.sample(&req)?;
            println!("wrote {} synthetic images to {}", m.cases.len(), ws.synthetic_dir(&req.name).display());
        }
        Command::TrainSeg { arm, run } => {
            let seed = run_seed(&ws, run)?;
            ws.train_seg(arm.into(), seed)?;
            println!("segmenter {}", ws.segmenter_path(arm.into(), seed).display());
        }
        Command::Evaluate { arm, run } => {
            let seed = run_seed(&ws, run)?;
            let ev = ws.evaluate(arm.into(), seed)?;
            println!("mean test DSC {:.4} over {} cases", ev.mean_test_dsc, ev.test.len());
        }
        Command::RunExperiment { arm } => {
            let r = ws.run_experiment(arm.into())?;
            println!("{} arm: mean test DSC {:.4} ± {:.4}", r.arm.label(), r.stats.mean, r.stats.std);
            println!("report {}", ws.report_path(r.arm).display());
        }
        Command::Report => print!("{}", ws.report()?),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_parse() {
        let cli =
            Cli::try_parse_from(["patchdiff", "--out", "o", "--seed", "3", "run-experiment", "--arm", "targeted"])
                .unwrap();
        assert_eq!(cli.seed, Some(3));
        assert!(matches!(cli.command, Command::RunExperiment { arm: ArmArg::Targeted }));
        assert!(Cli::try_parse_from(["patchdiff", "train-seg", "--arm", "both"]).is_err());
    }

    #[test]
    fn numerical_errors_exit_three() {
        assert_eq!(exit_code(&Error::Divergence { iteration: 3, loss: f32::NAN }), EXIT_NUMERICAL);
        assert_eq!(exit_code(&Error::SplitLeakage("x".into())), EXIT_DATA);
        assert_eq!(exit_code(&Error::MissingPrerequisite { what: "a".into(), hint: "b".into() }), EXIT_USAGE);
    }
}
