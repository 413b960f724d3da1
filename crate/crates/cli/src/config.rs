//! The TOML pipeline config and the work-directory layout derived from it.

use std::fs;
use std::path::{Path, PathBuf};

use cxr_core::augment::AugmentConfig;
use cxr_core::backbone::BackboneKind;
use cxr_core::evaluate::EvalOptions;
use cxr_core::head::TrainConfig;
use cxr_core::synthetic::SyntheticConfig;
use cxr_core::Split;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub covid_dir: Option<PathBuf>,
    pub negative_dir: Option<PathBuf>,
    /// Split rules; the bundled default layout is used when absent.
    pub split_spec: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Models {
    pub resnet18: Option<PathBuf>,
    pub resnet50: Option<PathBuf>,
    pub squeezenet: Option<PathBuf>,
    pub densenet121: Option<PathBuf>,
}

impl Models {
    pub fn get(&self, kind: BackboneKind) -> Option<&PathBuf> {
        match kind {
            BackboneKind::Resnet18 => self.resnet18.as_ref(),
            BackboneKind::Resnet50 => self.resnet50.as_ref(),
            BackboneKind::Squeezenet => self.squeezenet.as_ref(),
            BackboneKind::Densenet121 => self.densenet121.as_ref(),
            BackboneKind::Synthetic => None,
        }
    }

    pub fn set(&mut self, kind: BackboneKind, path: PathBuf) {
        let slot = match kind {
            BackboneKind::Resnet18 => &mut self.resnet18,
            BackboneKind::Resnet50 => &mut self.resnet50,
            BackboneKind::Squeezenet => &mut self.squeezenet,
            BackboneKind::Densenet121 => &mut self.densenet121,
            BackboneKind::Synthetic => return,
        };
        *slot = Some(path);
    }

    fn paths_mut(&mut self) -> impl Iterator<Item = &mut PathBuf> {
        [&mut self.resnet18, &mut self.resnet50, &mut self.squeezenet, &mut self.densenet121]
            .into_iter()
            .flatten()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub bins: usize,
    pub target_sensitivity: f64,
    pub z: f64,
    pub threshold: Option<f64>,
    /// Also write the threshold sweep as CSV next to the JSON report.
    pub sweep_csv: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        let o = EvalOptions::default();
        Self {
            bins: o.bins,
            target_sensitivity: o.target_sensitivity,
            z: o.z,
            threshold: o.threshold,
            sweep_csv: false,
        }
    }
}

impl EvalSection {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            bins: self.bins,
            target_sensitivity: self.target_sensitivity,
            z: self.z,
            threshold: self.threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub work_dir: PathBuf,
    pub backbones: Vec<BackboneKind>,
    /// Use generated features instead of corpora and networks.
    pub synthetic_fixture: bool,
    pub paths: Paths,
    pub models: Models,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub synthetic: SyntheticConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            work_dir: PathBuf::from("work"),
            backbones: BackboneKind::PRETRAINED.to_vec(),
            synthetic_fixture: false,
            paths: Paths::default(),
            models: Models::default(),
            augment: AugmentConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("invalid config: {e}")))
    }

    /// Reads `path`; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.resolve_relative_to(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    pub fn resolve_relative_to(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.work_dir);
        for p in [&mut self.paths.covid_dir, &mut self.paths.negative_dir, &mut self.paths.split_spec]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        self.models.paths_mut().for_each(fix);
    }

    /// Backbones the commands act on. The synthetic fixture has exactly one.
    pub fn selected_backbones(&self) -> Vec<BackboneKind> {
        if self.synthetic_fixture {
            vec![BackboneKind::Synthetic]
        } else {
            self.backbones.clone()
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.augment.validate()?;
        self.train.validate()?;
        if self.eval.bins == 0 {
            return Err(CliError::Validation("eval.bins must be >= 1".into()));
        }
        if !(self.eval.target_sensitivity > 0.0 && self.eval.target_sensitivity <= 1.0) {
            return Err(CliError::Validation("eval.target_sensitivity must lie in (0, 1]".into()));
        }
        if !(self.eval.z > 0.0) {
            return Err(CliError::Validation("eval.z must be > 0".into()));
        }
        if !self.synthetic_fixture && self.backbones.contains(&BackboneKind::Synthetic) {
            return Err(CliError::Validation(
                "the synthetic backbone is only available with --synthetic-fixture".into(),
            ));
        }
        Ok(())
    }

    /// JSON echo stored in every artifact.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn layout(&self) -> Layout {
        Layout { root: self.work_dir.clone() }
    }
}

/// File locations inside the work directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

impl Layout {
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.csv")
    }

    pub fn validation(&self) -> PathBuf {
        self.root.join("manifest.validation.json")
    }

    pub fn augmented_dir(&self) -> PathBuf {
        self.root.join("augmented")
    }

    pub fn features(&self, kind: BackboneKind, split: Split) -> PathBuf {
        self.root.join("features").join(format!("{kind}.{}.feat", split_name(split)))
    }

    pub fn head(&self, kind: BackboneKind) -> PathBuf {
        self.root.join("heads").join(format!("{kind}.head"))
    }

    pub fn history(&self, kind: BackboneKind) -> PathBuf {
        self.root.join("heads").join(format!("{kind}.history.json"))
    }

    pub fn eval_report(&self, kind: BackboneKind) -> PathBuf {
        self.root.join("reports").join(format!("{kind}.eval.json"))
    }

    pub fn sweep_csv(&self, kind: BackboneKind) -> PathBuf {
        self.root.join("reports").join(format!("{kind}.sweep.csv"))
    }

    pub fn comparison_json(&self) -> PathBuf {
        self.root.join("reports").join("comparison.json")
    }

    pub fn comparison_md(&self) -> PathBuf {
        self.root.join("reports").join("comparison.md")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_relative_paths() {
        let mut cfg = PipelineConfig::from_toml_str(
            r#"
            work_dir = "out"
            backbones = ["resnet18", "densenet121"]
            [paths]
            covid_dir = "data/covid"
            [models]
            resnet18 = "/models/r18.onnx"
            [train]
            epochs = 3
            "#,
        )
        .unwrap();
        cfg.resolve_relative_to(Path::new("/cfg"));
        assert_eq!(cfg.work_dir, PathBuf::from("/cfg/out"));
        assert_eq!(cfg.paths.covid_dir, Some(PathBuf::from("/cfg/data/covid")));
        assert_eq!(cfg.models.resnet18, Some(PathBuf::from("/models/r18.onnx")));
        assert_eq!(cfg.backbones, vec![BackboneKind::Resnet18, BackboneKind::Densenet121]);
        assert_eq!((cfg.train.epochs, cfg.train.batch_size), (3, 20));
        assert_eq!(cfg.eval.target_sensitivity, 0.975);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_toml_str("wrk_dir = \"x\"").is_err());
        assert!(PipelineConfig::from_toml_str("[train]\nepoch = 3").is_err());
    }

    #[test]
    fn synthetic_backbone_needs_fixture_mode() {
        let mut cfg = PipelineConfig { backbones: vec![BackboneKind::Synthetic], ..Default::default() };
        assert!(cfg.validate().is_err());
        cfg.synthetic_fixture = true;
        cfg.validate().unwrap();
        assert_eq!(cfg.selected_backbones(), vec![BackboneKind::Synthetic]);
    }

    #[test]
    fn echo_round_trips() {
        let cfg = PipelineConfig::default();
        let back: PipelineConfig = serde_json::from_value(cfg.echo()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn example_config_loads() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/pipeline.toml");
        let cfg = PipelineConfig::load(&path).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.selected_backbones().len(), 4);
        assert!(cfg.models.densenet121.as_ref().unwrap().is_absolute());
        assert!(cfg.eval.sweep_csv);
    }
}
