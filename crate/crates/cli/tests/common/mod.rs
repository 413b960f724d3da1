//! Helpers shared by the CLI integration tests and the acceptance harness.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{GrayImage, Luma};
use sha2::{Digest, Sha256};

pub const DISEASES: [&str; 13] = [
    "enlarged_cardiomediastinum",
    "cardiomegaly",
    "lung_opacity",
    "lung_lesion",
    "edema",
    "consolidation",
    "pneumonia",
    "atelectasis",
    "pneumothorax",
    "pleural_effusion",
    "pleural_other",
    "fracture",
    "support_devices",
];

pub fn cxr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cxr"))
        .args(args)
        .output()
        .expect("cxr binary runs")
}

pub fn write_png(path: &Path, seed: u32, size: u32) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    GrayImage::from_fn(size, size, |x, y| {
        Luma([((x * 31 + y * 17 + seed * 13) % 251) as u8])
    })
    .save(path)
    .unwrap();
}

/// Writes `n` images named `<prefix>_<i>.png` into `dir`.
pub fn fill(dir: &Path, prefix: &str, n: usize, seed: &mut u32, size: u32) {
    for i in 0..n {
        *seed += 1;
        write_png(&dir.join(format!("{prefix}_{i:04}.png")), *seed, size);
    }
}

/// A corpus in the published folder layout with the published counts:
/// 31/40 COVID and 2000/3000 negatives (700/1700 no-finding plus 100 per
/// disease folder in each split).
pub fn full_corpus(root: &Path) -> (PathBuf, PathBuf) {
    let (covid, neg) = (root.join("covid"), root.join("negative"));
    let mut seed = 0;
    fill(&covid.join("train"), "ctr", 31, &mut seed, 8);
    fill(&covid.join("test"), "cte", 40, &mut seed, 8);
    for (split, normal) in [("train", 700), ("test", 1700)] {
        fill(&neg.join(split).join("no_finding"), &format!("{split}_nf"), normal, &mut seed, 4);
        for d in DISEASES {
            fill(&neg.join(split).join(d), &format!("{split}_{d}"), 100, &mut seed, 4);
        }
    }
    (covid, neg)
}

/// A small corpus and matching split spec for end-to-end runs with images.
pub fn small_corpus(root: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let (covid, neg) = (root.join("covid"), root.join("negative"));
    let mut seed = 100;
    fill(&covid.join("train"), "c_train", 3, &mut seed, 40);
    fill(&covid.join("test"), "c_test", 4, &mut seed, 40);
    fill(&neg.join("train/normal"), "n_train", 4, &mut seed, 40);
    fill(&neg.join("train/other"), "o_train", 4, &mut seed, 40);
    fill(&neg.join("test/normal"), "n_test", 3, &mut seed, 40);
    fill(&neg.join("test/other"), "o_test", 3, &mut seed, 40);
    let spec = root.join("split.toml");
    fs::write(
        &spec,
        r#"
[[rules]]
corpus = "covid"
glob = "train/*"
split = "train"
subgroup = "covid"

[[rules]]
corpus = "covid"
glob = "test/*"
split = "test"
subgroup = "covid"

[[rules]]
corpus = "negative"
glob = "train/normal/*"
split = "train"
subgroup = "normal"

[[rules]]
corpus = "negative"
glob = "train/other/*"
split = "train"
subgroup = "other_disease"

[[rules]]
corpus = "negative"
glob = "test/normal/*"
split = "test"
subgroup = "normal"

[[rules]]
corpus = "negative"
glob = "test/other/*"
split = "test"
subgroup = "other_disease"
"#,
    )
    .unwrap();
    (covid, neg, spec)
}

/// SHA-256 of every file under `dir`, keyed by relative path.
pub fn tree_hashes(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                let digest = Sha256::digest(fs::read(&p).unwrap());
                out.insert(rel, digest.iter().map(|b| format!("{b:02x}")).collect());
            }
        }
    }
    out
}
