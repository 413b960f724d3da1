//! Linearly separable Gaussian features standing in for backbone output.
//!
//! Each class is an isotropic unit Gaussian centred at `+separation` (COVID)
//! or `-separation` (NON_COVID) in every coordinate. Samples whose projection
//! on the all-ones direction falls inside `margin` of the origin are redrawn,
//! so the two classes are separated by a hyperplane with a guaranteed gap.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneKind, FeatureMatrix};
use crate::manifest::{DatasetManifest, ImageRecord, Label, Split, Subgroup};
use crate::seed::derived_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub separation: f64,
    pub margin: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            n_train: 400,
            n_test: 400,
            separation: 1.5,
            margin: 1.0,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    fn hash(&self) -> [u8; 32] {
        let canonical = format!(
            "synthetic;dim={};separation={};margin={};seed={}",
            self.dim, self.separation, self.margin, self.seed
        );
        Sha256::digest(canonical.as_bytes()).into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFixture {
    pub manifest: DatasetManifest,
    pub train: FeatureMatrix,
    pub test: FeatureMatrix,
}

fn records(split: Split, n: usize) -> Vec<ImageRecord> {
    let s = split.as_str().to_ascii_lowercase();
    let n_covid = n / 2;
    let mut out = Vec::with_capacity(n);
    for i in 0..n_covid {
        let path = format!("synthetic/{s}/covid_{i:04}");
        out.push(ImageRecord::original(&path, format!("{s}-covid-{i:04}"), Subgroup::Covid, split));
    }
    for i in 0..n - n_covid {
        let subgroup = if i % 2 == 0 { Subgroup::Normal } else { Subgroup::OtherDisease };
        let path = format!("synthetic/{s}/negative_{i:04}");
        out.push(ImageRecord::original(&path, format!("{s}-negative-{i:04}"), subgroup, split));
    }
    out
}

fn sample(cfg: &SyntheticConfig, rec: &ImageRecord) -> Vec<f32> {
    let sign = if rec.label == Label::Covid { 1.0 } else { -1.0 };
    let mut rng = derived_rng(cfg.seed, &[b"synthetic", rec.image_path.as_bytes()]);
    let norm = (cfg.dim as f64).sqrt();
    loop {
        let x: Vec<f64> = (0..cfg.dim)
            .map(|_| sign * cfg.separation + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let projection = x.iter().sum::<f64>() / norm;
        if sign * projection > cfg.margin {
            return x.into_iter().map(|v| v as f32).collect();
        }
    }
}

impl SyntheticFixture {
    /// Half of each split is COVID; NON_COVID rows alternate between the
    /// NORMAL and OTHER_DISEASE subgroups. Feature rows follow the manifest's
    /// row order for the split.
    pub fn generate(cfg: &SyntheticConfig) -> Self {
        assert!(cfg.dim > 0, "synthetic dimension must be positive");
        assert!(
            cfg.separation * (cfg.dim as f64).sqrt() > cfg.margin,
            "margin leaves no probability mass to sample from"
        );
        let mut all = records(Split::Train, cfg.n_train);
        all.extend(records(Split::Test, cfg.n_test));
        let manifest = DatasetManifest::new(all);
        let hash = cfg.hash();
        let matrix = |split| {
            let rows = manifest.rows(split);
            let data = rows.iter().flat_map(|r| sample(cfg, r)).collect();
            let ids = rows.into_iter().map(|r| r.image_path).collect();
            FeatureMatrix::new(data, cfg.dim, ids, BackboneKind::Synthetic, hash)
                .expect("generated features are finite and well-shaped")
        };
        let (train, test) = (matrix(Split::Train), matrix(Split::Test));
        Self { manifest, train, test }
    }

    pub fn train_rows(&self) -> Vec<ImageRecord> {
        self.manifest.rows(Split::Train)
    }

    pub fn test_rows(&self) -> Vec<ImageRecord> {
        self.manifest.rows(Split::Test)
    }

    pub fn train_labels(&self) -> Vec<Label> {
        self.train_rows().iter().map(|r| r.label).collect()
    }
}
