//! `cxr`: runs the screening pipeline as `prepare`, `extract`, `train`,
//! `evaluate` and `report` over one work directory.
//!
//! Every flag overrides the matching entry of the TOML config. Exit codes:
//! 0 success, 1 validation failure, 2 I/O error, 3 numeric failure.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use cxr_core::backbone::BackboneKind;

pub use config::{Layout, PipelineConfig};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "cxr", version, about = "COVID-19 screening on chest radiographs with frozen backbones")]
pub struct Cli {
    /// Pipeline config (TOML). Relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub work_dir: Option<PathBuf>,
    /// Replace corpora and networks with generated separable features.
    #[arg(long, global = true)]
    pub synthetic_fixture: bool,
    /// Restrict to these backbones (repeatable).
    #[arg(long = "backbone", global = true)]
    pub backbones: Vec<BackboneKind>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build, augment and validate the dataset manifest.
    Prepare(PrepareArgs),
    /// Run the backbones over TRAIN and TEST and write feature files.
    Extract(ExtractArgs),
    /// Train the linear head on TRAIN features.
    Train(TrainArgs),
    /// Score TEST features and write the evaluation report.
    Evaluate(EvalArgs),
    /// Merge evaluation reports into one comparison table.
    Report,
    /// prepare, extract, train, evaluate and report in sequence.
    Run(RunArgs),
}

#[derive(Debug, Default, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub covid_dir: Option<PathBuf>,
    #[arg(long)]
    pub negative_dir: Option<PathBuf>,
    #[arg(long)]
    pub split_spec: Option<PathBuf>,
    #[arg(long)]
    pub augment_seed: Option<u64>,
    #[arg(long)]
    pub target_count: Option<usize>,
}

#[derive(Debug, Default, Args)]
pub struct ExtractArgs {
    /// Exported network for the single selected backbone.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Default, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Seed for the per-epoch shuffles.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub target_sensitivity: Option<f64>,
    /// Fixed operating threshold; overrides --target-sensitivity.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub z: Option<f64>,
    /// Also write the threshold sweep as CSV.
    #[arg(long)]
    pub sweep_csv: bool,
}

#[derive(Debug, Default, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub prepare: PrepareArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub eval: EvalArgs,
}

impl PrepareArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(p) = &self.covid_dir {
            cfg.paths.covid_dir = Some(p.clone());
        }
        if let Some(p) = &self.negative_dir {
            cfg.paths.negative_dir = Some(p.clone());
        }
        if let Some(p) = &self.split_spec {
            cfg.paths.split_spec = Some(p.clone());
        }
        if let Some(s) = self.augment_seed {
            cfg.augment.seed = s;
        }
        if let Some(n) = self.target_count {
            cfg.augment.target_count = n;
        }
    }
}

impl TrainArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.train.learning_rate = v;
        }
        if let Some(v) = self.seed {
            cfg.train.shuffle_seed = v;
        }
    }
}

impl EvalArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(v) = self.target_sensitivity {
            cfg.eval.target_sensitivity = v;
        }
        if let Some(v) = self.threshold {
            cfg.eval.threshold = Some(v);
        }
        if let Some(v) = self.bins {
            cfg.eval.bins = v;
        }
        if let Some(v) = self.z {
            cfg.eval.z = v;
        }
        if self.sweep_csv {
            cfg.eval.sweep_csv = true;
        }
    }
}

impl Cli {
    /// The config file merged with every flag.
    pub fn effective_config(&self) -> Result<PipelineConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(dir) = &self.work_dir {
            cfg.work_dir = dir.clone();
        }
        if self.synthetic_fixture {
            cfg.synthetic_fixture = true;
        }
        if !self.backbones.is_empty() {
            cfg.backbones = self.backbones.clone();
        }
        match &self.command {
            Command::Prepare(a) => a.apply(&mut cfg),
            Command::Extract(a) => {
                if let Some(model) = &a.model {
                    let [kind] = cfg.backbones[..] else {
                        return Err(CliError::Validation("--model needs exactly one --backbone".into()));
                    };
                    cfg.models.set(kind, model.clone());
                }
            }
            Command::Train(a) => a.apply(&mut cfg),
            Command::Evaluate(a) => a.apply(&mut cfg),
            Command::Report => {}
            Command::Run(a) => {
                a.prepare.apply(&mut cfg);
                a.train.apply(&mut cfg);
                a.eval.apply(&mut cfg);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs one command and returns its summary for standard output.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = cli.effective_config()?;
    match &cli.command {
        Command::Prepare(_) => commands::prepare(&cfg),
        Command::Extract(_) => commands::extract(&cfg),
        Command::Train(_) => commands::train(&cfg),
        Command::Evaluate(_) => commands::evaluate_cmd(&cfg),
        Command::Report => commands::report(&cfg),
        Command::Run(_) => {
            let steps = [
                commands::prepare(&cfg)?,
                commands::extract(&cfg)?,
                commands::train(&cfg)?,
                commands::evaluate_cmd(&cfg)?,
                commands::report(&cfg)?,
            ];
            Ok(steps.join("\n"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("cxr").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_defaults() {
        let cli = parse(&["train", "--epochs", "7", "--seed", "3", "--work-dir", "/tmp/w", "--backbone", "resnet50"]);
        let cfg = cli.effective_config().unwrap();
        assert_eq!((cfg.train.epochs, cfg.train.shuffle_seed), (7, 3));
        assert_eq!(cfg.work_dir, PathBuf::from("/tmp/w"));
        assert_eq!(cfg.backbones, vec![BackboneKind::Resnet50]);
    }

    #[test]
    fn model_flag_needs_one_backbone() {
        assert!(parse(&["extract", "--model", "m.onnx"]).effective_config().is_err());
        let cfg = parse(&["extract", "--backbone", "squeezenet", "--model", "m.onnx"]).effective_config().unwrap();
        assert_eq!(cfg.models.squeezenet, Some(PathBuf::from("m.onnx")));
    }

    #[test]
    fn invalid_overrides_are_validation_errors() {
        let err = parse(&["evaluate", "--target-sensitivity", "1.5"]).effective_config().unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}
