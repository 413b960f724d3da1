//! The replaced last layer: an affine map from backbone features to two
//! class logits, trained with softmax cross-entropy and ADAM.
//!
//! Class index 0 is NON_COVID and index 1 is COVID. All arithmetic is done
//! in `f64`; stored `f32` features are widened on load.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{BackboneKind, FeatureMatrix};
use crate::evaluate::{ScoreEntry, ScoreSet};
use crate::manifest::{ImageRecord, Label};
use crate::seed::derived_rng;

pub const COVID_INDEX: usize = 1;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("target distribution is not one-hot: {0:?}")]
    NotOneHot([f64; 2]),
    #[error("predicted probability of the true class is zero")]
    ZeroProbability,
    #[error("training data contains only {0} examples")]
    SingleClass(Label),
    #[error("{features} feature rows but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("feature dimension {actual} does not match head dimension {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("feature row {index} is {feature_row:?} but manifest row is {manifest_row:?}")]
    RowMismatch {
        index: usize,
        feature_row: String,
        manifest_row: String,
    },
    #[error("loss became {loss} at epoch {epoch}, batch {batch} (step {step})")]
    NanLoss {
        epoch: usize,
        batch: usize,
        step: u64,
        loss: f64,
    },
    #[error("malformed head file: {0}")]
    Format(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

// ---------------------------------------------------------------------------
// Loss

/// Numerically stable two-class softmax.
pub fn softmax(logits: [f64; 2]) -> Result<[f64; 2], HeadError> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(HeadError::NonFinite("logits"));
    }
    let max = logits[0].max(logits[1]);
    let e = [(logits[0] - max).exp(), (logits[1] - max).exp()];
    let sum = e[0] + e[1];
    Ok([e[0] / sum, e[1] / sum])
}

/// `-sum_i p_i ln q_i` for a one-hot `p`.
pub fn cross_entropy(p: [f64; 2], q: [f64; 2]) -> Result<f64, HeadError> {
    let one_hot = p.iter().all(|&v| v == 0.0 || v == 1.0) && p[0] + p[1] == 1.0;
    if !one_hot {
        return Err(HeadError::NotOneHot(p));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(HeadError::NonFinite("probabilities"));
    }
    let truth = if p[1] == 1.0 { 1 } else { 0 };
    if q[truth] <= 0.0 {
        return Err(HeadError::ZeroProbability);
    }
    Ok(-q[truth].ln())
}

pub fn one_hot(label: Label) -> [f64; 2] {
    let mut p = [0.0; 2];
    p[label.class_index()] = 1.0;
    p
}

// ---------------------------------------------------------------------------
// Model

#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    /// Row-major `2 x dim`; row 0 is NON_COVID, row 1 is COVID.
    pub weights: Vec<f64>,
    pub bias: [f64; 2],
}

impl LinearHead {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![0.0; 2 * dim],
            bias: [0.0; 2],
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len() / 2
    }

    pub fn logits(&self, x: &[f64]) -> [f64; 2] {
        let d = self.dim();
        let dot = |row: &[f64]| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        [
            dot(&self.weights[..d]) + self.bias[0],
            dot(&self.weights[d..]) + self.bias[1],
        ]
    }

    pub fn probabilities(&self, x: &[f64]) -> Result<[f64; 2], HeadError> {
        softmax(self.logits(x))
    }

    /// Weights followed by bias, the layout used by [`adam_step`].
    pub fn to_params(&self) -> Vec<f64> {
        let mut p = self.weights.clone();
        p.extend(self.bias);
        p
    }

    pub fn from_params(params: &[f64]) -> Self {
        let d = (params.len() - 2) / 2;
        Self {
            weights: params[..2 * d].to_vec(),
            bias: [params[2 * d], params[2 * d + 1]],
        }
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    pub weights: Vec<f64>,
    pub bias: [f64; 2],
}

impl HeadGradient {
    pub fn to_params(&self) -> Vec<f64> {
        let mut g = self.weights.clone();
        g.extend(self.bias);
        g
    }
}

/// Gradient of `cross_entropy(p, softmax(W x + b))`: `(q - p) x^T` for W
/// and `q - p` for b.
pub fn grad_head(head: &LinearHead, feature: &[f64], p: [f64; 2]) -> Result<HeadGradient, HeadError> {
    if feature.len() != head.dim() {
        return Err(HeadError::DimensionMismatch {
            expected: head.dim(),
            actual: feature.len(),
        });
    }
    if feature.iter().chain(&p).any(|v| !v.is_finite()) {
        return Err(HeadError::NonFinite("gradient inputs"));
    }
    let q = head.probabilities(feature)?;
    let delta = [q[0] - p[0], q[1] - p[1]];
    let mut weights = Vec::with_capacity(2 * feature.len());
    for d in delta {
        weights.extend(feature.iter().map(|x| d * x));
    }
    Ok(HeadGradient {
        weights,
        bias: delta,
    })
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 20,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HeadError> {
        let bad = |m: &str| Err(HeadError::InvalidConfig(m.to_string()));
        if self.epochs < 1 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad("epsilon must be > 0");
        }
        Ok(())
    }

    /// `key = value` lines, one per field, in declaration order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "beta1 = {}", self.beta1);
        let _ = writeln!(s, "beta2 = {}", self.beta2);
        let _ = writeln!(s, "epsilon = {}", self.epsilon);
        let _ = writeln!(s, "shuffle_seed = {}", self.shuffle_seed);
        s
    }

    pub fn from_kv(text: &str) -> Result<Self, HeadError> {
        let mut cfg = Self::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| HeadError::Format(format!("bad config line {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |_| HeadError::Format(format!("bad value for {key}: {value:?}"));
            match key {
                "epochs" => cfg.epochs = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "shuffle_seed" => cfg.shuffle_seed = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "learning_rate" | "beta1" | "beta2" | "epsilon" => {
                    let v: f64 = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
                    match key {
                        "learning_rate" => cfg.learning_rate = v,
                        "beta1" => cfg.beta1 = v,
                        "beta2" => cfg.beta2 = v,
                        _ => cfg.epsilon = v,
                    }
                }
                other => return Err(HeadError::Format(format!("unknown config key {other:?}"))),
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }
}

/// One bias-corrected ADAM update, in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<(), HeadError> {
    assert_eq!(params.len(), grads.len(), "parameter and gradient shapes differ");
    assert_eq!(params.len(), state.m.len(), "optimizer state shape differs");
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(HeadError::NonFinite("gradient"));
    }
    state.t += 1;
    let t = state.t as f64;
    let bias1 = 1.0 - cfg.beta1.powf(t);
    let bias2 = 1.0 - cfg.beta2.powf(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean per-example loss of each epoch, measured before each batch's update.
    pub epoch_loss: Vec<f64>,
    /// Training accuracy of the final head.
    pub final_accuracy: f64,
    pub steps: u64,
}

/// Row order independent of how the caller happened to list the rows.
fn canonical_order(features: &FeatureMatrix, labels: &[Label]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..features.n_rows()).collect();
    let ids = features.row_ids();
    idx.sort_by(|&a, &b| {
        ids[a]
            .cmp(&ids[b])
            .then(labels[a].cmp(&labels[b]))
            .then_with(|| {
                let (ra, rb) = (features.row(a), features.row(b));
                ra.iter()
                    .map(|v| v.to_bits())
                    .cmp(rb.iter().map(|v| v.to_bits()))
            })
            .then(Ordering::Equal)
    });
    idx
}

/// Mini-batch training from a zero-initialised head. Each epoch visits the
/// rows in a permutation seeded by `(shuffle_seed, epoch)`; the last partial
/// batch is kept. Batch gradients are averaged over the batch.
pub fn train_head(
    features: &FeatureMatrix,
    labels: &[Label],
    cfg: &TrainConfig,
) -> Result<(LinearHead, TrainHistory), HeadError> {
    cfg.validate()?;
    let n = features.n_rows();
    if labels.len() != n {
        return Err(HeadError::LengthMismatch {
            features: n,
            labels: labels.len(),
        });
    }
    for class in [Label::Covid, Label::NonCovid] {
        if !labels.contains(&class) {
            let other = if class == Label::Covid { Label::NonCovid } else { Label::Covid };
            return Err(HeadError::SingleClass(other));
        }
    }

    let dim = features.dim();
    let x: Vec<f64> = features.data().iter().map(|&v| v as f64).collect();
    let row = |i: usize| &x[i * dim..(i + 1) * dim];
    let targets: Vec<[f64; 2]> = labels.iter().map(|&l| one_hot(l)).collect();
    let canonical = canonical_order(features, labels);

    let mut params = LinearHead::zeros(dim).to_params();
    let mut state = AdamState::new(params.len());
    let mut history = TrainHistory::default();
    let mut grad = vec![0.0; params.len()];

    for epoch in 0..cfg.epochs {
        let mut rng = derived_rng(cfg.shuffle_seed, &[b"epoch", &(epoch as u64).to_le_bytes()]);
        let mut order = canonical.clone();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let head = LinearHead::from_params(&params);
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut batch_loss = 0.0;
            for &i in chunk {
                let Ok(q) = head.probabilities(row(i)) else {
                    return Err(HeadError::NanLoss {
                        epoch: epoch + 1,
                        batch,
                        step: state.t,
                        loss: f64::NAN,
                    });
                };
                batch_loss += cross_entropy(targets[i], q).unwrap_or(f64::INFINITY);
                for (class, (qc, pc)) in q.iter().zip(&targets[i]).enumerate() {
                    let delta = qc - pc;
                    let w = &mut grad[class * dim..(class + 1) * dim];
                    for (g, v) in w.iter_mut().zip(row(i)) {
                        *g += delta * v;
                    }
                    grad[2 * dim + class] += delta;
                }
            }
            if !batch_loss.is_finite() {
                return Err(HeadError::NanLoss {
                    epoch: epoch + 1,
                    batch,
                    step: state.t,
                    loss: batch_loss,
                });
            }
            epoch_loss += batch_loss;
            let scale = 1.0 / chunk.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam_step(&mut params, &grad, &mut state, cfg)?;
            if params.iter().any(|p| !p.is_finite()) {
                return Err(HeadError::NonFinite("parameters"));
            }
        }
        history.epoch_loss.push(epoch_loss / n as f64);
    }

    let head = LinearHead::from_params(&params);
    debug_assert!(head.is_finite());
    let correct = (0..n)
        .filter(|&i| {
            let l = head.logits(row(i));
            let predicted = if l[1] > l[0] { 1 } else { 0 };
            predicted == labels[i].class_index()
        })
        .count();
    history.final_accuracy = correct as f64 / n as f64;
    history.steps = state.t;
    Ok((head, history))
}

/// COVID probability for every feature row. `rows` must be the manifest
/// records for the feature rows, in the same order.
pub fn predict_scores(
    head: &LinearHead,
    features: &FeatureMatrix,
    rows: &[ImageRecord],
) -> Result<ScoreSet, HeadError> {
    if features.dim() != head.dim() {
        return Err(HeadError::DimensionMismatch {
            expected: head.dim(),
            actual: features.dim(),
        });
    }
    if rows.len() != features.n_rows() {
        return Err(HeadError::LengthMismatch {
            features: features.n_rows(),
            labels: rows.len(),
        });
    }
    let mut entries = Vec::with_capacity(rows.len());
    let mut x = vec![0.0; head.dim()];
    for (i, (id, rec)) in features.row_ids().iter().zip(rows).enumerate() {
        if *id != rec.image_path {
            return Err(HeadError::RowMismatch {
                index: i,
                feature_row: id.clone(),
                manifest_row: rec.image_path.clone(),
            });
        }
        for (dst, &src) in x.iter_mut().zip(features.row(i)) {
            *dst = src as f64;
        }
        let q = head.probabilities(&x)?;
        entries.push(ScoreEntry {
            score: q[COVID_INDEX],
            label: rec.label,
            subgroup: rec.subgroup,
            image_path: rec.image_path.clone(),
        });
    }
    Ok(ScoreSet::new(entries).expect("softmax outputs are finite"))
}

// ---------------------------------------------------------------------------
// HEAD1 files

const MAGIC: &[u8; 5] = b"HEAD1";

/// A trained head together with its provenance, as stored on disk.
///
/// Layout (little-endian): magic `HEAD1`, `u32` dim D, `u8` backbone code,
/// 2*D `f64` weights (row-major), 2 `f64` biases, `u32` byte length and the
/// UTF-8 `key = value` echo of the training config.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedHead {
    pub head: LinearHead,
    pub backbone: BackboneKind,
    pub config: TrainConfig,
}

impl TrainedHead {
    pub fn to_bytes(&self) -> Vec<u8> {
        let dim = self.head.dim();
        let mut out = Vec::with_capacity(10 + 16 * (dim + 1) + 256);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        out.push(self.backbone.code());
        for v in self.head.weights.iter().chain(&self.head.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let echo = self.config.to_kv();
        out.extend_from_slice(&(echo.len() as u32).to_le_bytes());
        out.extend_from_slice(echo.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HeadError> {
        let mut r = bytes;
        let fmt = |e: std::io::Error| HeadError::Format(e.to_string());
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != MAGIC {
            return Err(HeadError::Format("bad magic, expected HEAD1".into()));
        }
        let mut u32_buf = [0u8; 4];
        r.read_exact(&mut u32_buf).map_err(fmt)?;
        let dim = u32::from_le_bytes(u32_buf) as usize;
        let mut code = [0u8; 1];
        r.read_exact(&mut code).map_err(fmt)?;
        let backbone = BackboneKind::from_code(code[0])
            .ok_or_else(|| HeadError::Format(format!("unknown backbone code {}", code[0])))?;
        let mut params = Vec::with_capacity(2 * dim + 2);
        let mut f64_buf = [0u8; 8];
        for _ in 0..2 * dim + 2 {
            r.read_exact(&mut f64_buf).map_err(fmt)?;
            params.push(f64::from_le_bytes(f64_buf));
        }
        r.read_exact(&mut u32_buf).map_err(fmt)?;
        let len = u32::from_le_bytes(u32_buf) as usize;
        if r.len() != len {
            return Err(HeadError::Format(format!(
                "config block is {} bytes, header says {len}",
                r.len()
            )));
        }
        let text = std::str::from_utf8(r).map_err(|_| HeadError::Format("config block is not UTF-8".into()))?;
        let head = LinearHead::from_params(&params);
        if !head.is_finite() {
            return Err(HeadError::NonFinite("stored parameters"));
        }
        Ok(Self {
            head,
            backbone,
            config: TrainConfig::from_kv(text)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), HeadError> {
        let io = |source| HeadError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io)?;
        }
        fs::write(path, self.to_bytes()).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, HeadError> {
        let bytes = fs::read(path).map_err(|source| HeadError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{Split, Subgroup};
    use crate::synthetic::SyntheticFixture;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// ln(e^a + e^b) - z_truth, evaluated without the softmax routine.
    fn oracle_loss(logits: [f64; 2], truth: usize) -> f64 {
        let m = logits[0].max(logits[1]);
        m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln() - logits[truth]
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        if scale == 0.0 { diff } else { diff / scale }
    }

    fn numeric_grad(head: &LinearHead, x: &[f64], truth: usize, h: f64) -> Vec<f64> {
        let base = head.to_params();
        (0..base.len())
            .map(|k| {
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus[k] += h;
                minus[k] -= h;
                let f = |p: &[f64]| oracle_loss(LinearHead::from_params(p).logits(x), truth);
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax([0.0, 0.0]).unwrap(), [0.5, 0.5]);
        let big = softmax([1000.0, 0.0]).unwrap();
        assert!(big[0] == 1.0 && big[1] < 1e-300);
        // e^0.3 / (e^0.3 + e^-1.2) = 1 / (1 + e^-1.5), digits from a 50-digit evaluation.
        let q = softmax([0.3, -1.2]).unwrap();
        assert!((q[0] - 0.817_574_476_193_643_6).abs() < 1e-15, "{}", q[0]);
        assert!((q[1] - 0.182_425_523_806_356_4).abs() < 1e-15);
        assert!((q[0] + q[1] - 1.0).abs() < 1e-12);
        assert!(softmax([f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let l = cross_entropy([0.0, 1.0], [0.5, 0.5]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let eps = 1e-12;
        assert!(cross_entropy([0.0, 1.0], [eps, 1.0 - eps]).unwrap() < 1e-11);
        assert!(matches!(cross_entropy([0.0, 1.0], [1.0, 0.0]), Err(HeadError::ZeroProbability)));
        assert!(matches!(cross_entropy([0.3, 0.7], [0.5, 0.5]), Err(HeadError::NotOneHot(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let z = [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)];
            let truth = rng.random_range(0..2);
            let mut p = [0.0; 2];
            p[truth] = 1.0;
            let got = cross_entropy(p, softmax(z).unwrap()).unwrap();
            let want = oracle_loss(z, truth);
            assert!(got >= 0.0);
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn gradient_special_cases() {
        // q == p is only reachable in the limit; a saturated head is within 1e-300.
        let head = LinearHead { weights: vec![0.0; 4], bias: [-800.0, 800.0] };
        let g = grad_head(&head, &[1.0, -2.0], [0.0, 1.0]).unwrap();
        assert!(g.to_params().iter().all(|v| v.abs() < 1e-300));

        let head = LinearHead { weights: vec![0.3, -0.1, 0.7, 0.2], bias: [0.1, -0.4] };
        let g = grad_head(&head, &[0.0, 0.0], [1.0, 0.0]).unwrap();
        let q = softmax(head.bias).unwrap();
        assert!(g.weights.iter().all(|&v| v == 0.0));
        assert_eq!(g.bias, [q[0] - 1.0, q[1]]);
        assert!(grad_head(&head, &[1.0], [1.0, 0.0]).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 7;
        let head = LinearHead {
            weights: (0..2 * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            bias: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
        };
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let analytic = grad_head(&head, &x, [0.0, 1.0]).unwrap().to_params();
        let numeric = numeric_grad(&head, &x, 1, 1e-6);
        let err = rel_err(&analytic, &numeric);
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let cfg = TrainConfig::default();
        let mut params = vec![0.5, -1.5, 2.0];
        let mut state = AdamState::new(3);
        adam_step(&mut params, &[0.0; 3], &mut state, &cfg).unwrap();
        assert_eq!(params, vec![0.5, -1.5, 2.0]);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let cfg = TrainConfig::default();
        for g in [3.0, -0.02, 150.0] {
            let mut w = [1.0];
            adam_step(&mut w, &[g], &mut AdamState::new(1), &cfg).unwrap();
            let moved = 1.0 - w[0];
            assert!((moved.abs() - cfg.learning_rate).abs() < 1e-9, "g={g}: moved {moved}");
            assert_eq!(moved.signum(), g.signum());
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut w = [1.0];
        assert!(adam_step(&mut w, &[f64::NAN], &mut AdamState::new(1), &TrainConfig::default()).is_err());
    }

    #[test]
    fn adam_quadratic_trajectory_matches_reference() {
        let cfg = TrainConfig { learning_rate: 0.1, ..Default::default() };
        // Reference recurrences with running powers of beta.
        let (mut w_ref, mut m, mut v, mut b1t, mut b2t) = (1.0f64, 0.0f64, 0.0f64, 1.0f64, 1.0f64);
        let mut w = [1.0];
        let mut state = AdamState::new(1);
        for _ in 0..10 {
            let g = 2.0 * w_ref;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            b1t *= 0.9;
            b2t *= 0.999;
            w_ref -= 0.1 * (m / (1.0 - b1t)) / ((v / (1.0 - b2t)).sqrt() + 1e-8);

            let g = [2.0 * w[0]];
            adam_step(&mut w, &g, &mut state, &cfg).unwrap();
            assert!((w[0] - w_ref).abs() < 1e-12, "{} vs {w_ref}", w[0]);
        }
        assert!(state.v.iter().all(|&v| v >= 0.0));
        assert_eq!(state.t, 10);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
        let cfg = TrainConfig { shuffle_seed: u64::MAX, ..Default::default() };
        assert_eq!(TrainConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        let kv = TrainConfig::default().to_kv();
        assert!(kv.contains("epochs = 100\n") && kv.contains("batch_size = 20\n") && kv.contains("learning_rate = 0.0001\n"));
    }

    fn fixture() -> SyntheticFixture {
        SyntheticFixture::generate(&Default::default())
    }

    #[test]
    fn separable_fixture_is_learned() {
        let fx = fixture();
        let (head, history) = train_head(&fx.train, &fx.train_labels(), &TrainConfig::default()).unwrap();
        assert_eq!(history.epoch_loss.len(), 100);
        assert_eq!(history.steps, 100 * 20);
        assert_eq!(history.final_accuracy, 1.0);
        assert!(history.epoch_loss[99] < history.epoch_loss[0]);
        for e in 10..100 {
            assert!(history.epoch_loss[e] <= history.epoch_loss[e - 10], "epoch {e}");
        }
        let scores = predict_scores(&head, &fx.train, &fx.train_rows()).unwrap();
        let auc = crate::evaluate::auc(&crate::evaluate::roc_curve(&scores).unwrap());
        assert!(auc > 0.99, "{auc}");
    }

    #[test]
    fn training_is_deterministic_and_order_free() {
        let fx = fixture();
        let cfg = TrainConfig { epochs: 5, ..Default::default() };
        let labels = fx.train_labels();
        let (a, _) = train_head(&fx.train, &labels, &cfg).unwrap();
        let (b, _) = train_head(&fx.train, &labels, &cfg).unwrap();
        assert_eq!(a, b);

        // Reverse the rows (and labels) together.
        let n = fx.train.n_rows();
        let rev: Vec<usize> = (0..n).rev().collect();
        let data: Vec<f32> = rev.iter().flat_map(|&i| fx.train.row(i).to_vec()).collect();
        let ids = rev.iter().map(|&i| fx.train.row_ids()[i].clone()).collect();
        let permuted = FeatureMatrix::new(data, fx.train.dim(), ids, BackboneKind::Synthetic, *fx.train.preprocessing_hash()).unwrap();
        let rev_labels: Vec<Label> = rev.iter().map(|&i| labels[i]).collect();
        let (c, _) = train_head(&permuted, &rev_labels, &cfg).unwrap();
        assert_eq!(a, c);

        let (d, _) = train_head(&fx.train, &labels, &TrainConfig { shuffle_seed: 1, ..cfg }).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn single_class_and_misaligned_inputs_fail() {
        let fm = FeatureMatrix::new(vec![1.0, 2.0], 1, vec!["a".into(), "b".into()], BackboneKind::Synthetic, [0; 32]).unwrap();
        assert!(matches!(
            train_head(&fm, &[Label::Covid, Label::Covid], &TrainConfig::default()),
            Err(HeadError::SingleClass(Label::Covid))
        ));
        assert!(matches!(
            train_head(&fm, &[Label::Covid], &TrainConfig::default()),
            Err(HeadError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn divergence_is_reported_with_diagnostics() {
        let fm = FeatureMatrix::new(vec![3e38, -3e38], 1, vec!["a".into(), "b".into()], BackboneKind::Synthetic, [0; 32]).unwrap();
        let cfg = TrainConfig { learning_rate: 1e300, epochs: 3, batch_size: 1, ..Default::default() };
        let err = train_head(&fm, &[Label::Covid, Label::NonCovid], &cfg).unwrap_err();
        assert!(matches!(err, HeadError::NanLoss { .. } | HeadError::NonFinite("parameters")), "{err}");
    }

    #[test]
    fn prediction_symmetries() {
        let fx = fixture();
        let rows = fx.test_rows();
        let zero = LinearHead::zeros(fx.test.dim());
        let scores = predict_scores(&zero, &fx.test, &rows).unwrap();
        assert!(scores.entries().iter().all(|e| e.score == 0.5));

        let (head, _) = train_head(&fx.train, &fx.train_labels(), &TrainConfig { epochs: 2, ..Default::default() }).unwrap();
        let neg = LinearHead {
            weights: head.weights.iter().map(|w| -w).collect(),
            bias: [-head.bias[0], -head.bias[1]],
        };
        let s = predict_scores(&head, &fx.test, &rows).unwrap();
        let t = predict_scores(&neg, &fx.test, &rows).unwrap();
        for (a, b) in s.entries().iter().zip(t.entries()) {
            assert!((a.score + b.score - 1.0).abs() < 1e-12);
            assert!(a.score > 0.0 && a.score < 1.0);
        }
        assert!(matches!(
            predict_scores(&LinearHead::zeros(3), &fx.test, &rows),
            Err(HeadError::DimensionMismatch { .. })
        ));
        let mut wrong = rows.clone();
        wrong[0] = ImageRecord::original("elsewhere", "p", Subgroup::Normal, Split::Test);
        assert!(matches!(predict_scores(&zero, &fx.test, &wrong), Err(HeadError::RowMismatch { index: 0, .. })));
    }

    #[test]
    fn head_file_round_trip_and_layout() {
        let head = LinearHead { weights: vec![1.5, -2.0, 0.25, 4.0], bias: [0.5, -0.5] };
        let th = TrainedHead { head, backbone: BackboneKind::Squeezenet, config: TrainConfig::default() };
        let bytes = th.to_bytes();
        assert_eq!(&bytes[..5], b"HEAD1");
        assert_eq!(&bytes[5..9], &2u32.to_le_bytes());
        assert_eq!(bytes[9], 2);
        assert_eq!(&bytes[10..18], &1.5f64.to_le_bytes());
        assert_eq!(&bytes[50..58], &(-0.5f64).to_le_bytes());
        let echo = std::str::from_utf8(&bytes[62..]).unwrap();
        assert!(echo.starts_with("epochs = 100\nbatch_size = 20\nlearning_rate = 0.0001\n"));
        assert_eq!(TrainedHead::from_bytes(&bytes).unwrap(), th);
        assert!(TrainedHead::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
