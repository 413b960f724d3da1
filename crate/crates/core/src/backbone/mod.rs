//! Frozen pretrained backbones used as feature extractors.
//!
//! Images are resized to 224x224 and normalised ([`preprocess`]), pushed
//! through an exported network whose output is the pooled penultimate
//! activation, and collected into a [`FeatureMatrix`] that is persisted in the
//! `FEAT1` binary format. The head module only ever sees feature files, so it
//! can be exercised with synthetic features and no network at all.

mod features;
#[cfg(feature = "onnx")]
pub mod onnx;
mod preprocess;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::ImageRecord;

pub use features::FeatureMatrix;
pub use preprocess::{preprocess, InputTensor, PreprocessConfig};

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("cannot decode image {path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("image {0} has no pixels")]
    EmptyImage(String),
    #[error("{backbone} produces {expected}-dimensional features, graph output is {actual:?}")]
    ShapeMismatch {
        backbone: BackboneKind,
        expected: usize,
        actual: Vec<usize>,
    },
    #[error("non-finite feature value for {0}")]
    NonFinite(String),
    #[error("invalid backbone spec: {0}")]
    InvalidSpec(String),
    #[error("malformed feature file: {0}")]
    Format(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Backbone identity, with the byte used for it in `FEAT1`/`HEAD1` files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Resnet18,
    Resnet50,
    Squeezenet,
    Densenet121,
    /// Features generated by the synthetic fixture; any dimension.
    Synthetic,
}

impl BackboneKind {
    pub const PRETRAINED: [BackboneKind; 4] = [
        BackboneKind::Resnet18,
        BackboneKind::Resnet50,
        BackboneKind::Squeezenet,
        BackboneKind::Densenet121,
    ];

    pub fn code(self) -> u8 {
        match self {
            BackboneKind::Resnet18 => 0,
            BackboneKind::Resnet50 => 1,
            BackboneKind::Squeezenet => 2,
            BackboneKind::Densenet121 => 3,
            BackboneKind::Synthetic => 255,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => BackboneKind::Resnet18,
            1 => BackboneKind::Resnet50,
            2 => BackboneKind::Squeezenet,
            3 => BackboneKind::Densenet121,
            255 => BackboneKind::Synthetic,
            _ => return None,
        })
    }

    /// Width of the pooled penultimate layer.
    pub fn feature_dim(self) -> Option<usize> {
        match self {
            BackboneKind::Resnet18 | BackboneKind::Squeezenet => Some(512),
            BackboneKind::Resnet50 => Some(2048),
            BackboneKind::Densenet121 => Some(1024),
            BackboneKind::Synthetic => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::Resnet18 => "resnet18",
            BackboneKind::Resnet50 => "resnet50",
            BackboneKind::Squeezenet => "squeezenet",
            BackboneKind::Densenet121 => "densenet121",
            BackboneKind::Synthetic => "synthetic",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            BackboneKind::Resnet18 => "ResNet18",
            BackboneKind::Resnet50 => "ResNet50",
            BackboneKind::Squeezenet => "SqueezeNet",
            BackboneKind::Densenet121 => "DenseNet-121",
            BackboneKind::Synthetic => "Synthetic",
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "resnet18" => Ok(BackboneKind::Resnet18),
            "resnet50" => Ok(BackboneKind::Resnet50),
            "squeezenet" => Ok(BackboneKind::Squeezenet),
            "densenet121" => Ok(BackboneKind::Densenet121),
            "synthetic" => Ok(BackboneKind::Synthetic),
            _ => Err(format!("unknown backbone {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub model_path: PathBuf,
    pub feature_dim: usize,
    pub input_size: u32,
}

impl BackboneSpec {
    pub fn new(kind: BackboneKind, model_path: impl Into<PathBuf>) -> Result<Self, BackboneError> {
        let feature_dim = kind.feature_dim().ok_or_else(|| {
            BackboneError::InvalidSpec(format!("{kind} has no exported network"))
        })?;
        Ok(Self {
            kind,
            model_path: model_path.into(),
            feature_dim,
            input_size: preprocess::INPUT_SIZE,
        })
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        if self.kind.feature_dim() != Some(self.feature_dim) {
            return Err(BackboneError::InvalidSpec(format!(
                "{} requires feature_dim {:?}, got {}",
                self.kind,
                self.kind.feature_dim(),
                self.feature_dim
            )));
        }
        if self.input_size != preprocess::INPUT_SIZE {
            return Err(BackboneError::InvalidSpec(format!(
                "input_size must be {}",
                preprocess::INPUT_SIZE
            )));
        }
        Ok(())
    }
}

/// A network mapping one preprocessed image to its feature vector.
/// Implementations must be deterministic and safe to share across threads.
pub trait FeatureExtractor: Sync {
    fn feature_dim(&self) -> usize;
    fn extract(&self, input: &InputTensor) -> Result<Vec<f32>, BackboneError>;
}

/// Runs `extractor` on every row in order. Rows are processed in parallel;
/// the output keeps the input order.
pub fn extract_features_with(
    extractor: &dyn FeatureExtractor,
    kind: BackboneKind,
    cfg: &PreprocessConfig,
    rows: &[ImageRecord],
) -> Result<FeatureMatrix, BackboneError> {
    let dim = extractor.feature_dim();
    let vectors: Vec<Vec<f32>> = rows
        .par_iter()
        .map(|row| {
            let img = image::open(&row.image_path).map_err(|source| BackboneError::Decode {
                path: row.image_path.clone(),
                source,
            })?;
            if img.width() == 0 || img.height() == 0 {
                return Err(BackboneError::EmptyImage(row.image_path.clone()));
            }
            let input = preprocess(&img, cfg);
            let features = extractor.extract(&input)?;
            if features.len() != dim {
                return Err(BackboneError::ShapeMismatch {
                    backbone: kind,
                    expected: dim,
                    actual: vec![1, features.len()],
                });
            }
            if features.iter().any(|v| !v.is_finite()) {
                return Err(BackboneError::NonFinite(row.image_path.clone()));
            }
            Ok(features)
        })
        .collect::<Result<_, _>>()?;

    let mut data = Vec::with_capacity(rows.len() * dim);
    for v in vectors {
        data.extend(v);
    }
    FeatureMatrix::new(
        data,
        dim,
        rows.iter().map(|r| r.image_path.clone()).collect(),
        kind,
        cfg.hash(),
    )
}

/// Loads the exported network named by `spec` and extracts features for
/// `rows` with the default preprocessing.
#[cfg(feature = "onnx")]
pub fn extract_features(
    spec: &BackboneSpec,
    rows: &[ImageRecord],
) -> Result<FeatureMatrix, BackboneError> {
    spec.validate()?;
    let model = onnx::OnnxBackbone::load(spec)?;
    extract_features_with(&model, spec.kind, &PreprocessConfig::default(), rows)
}
