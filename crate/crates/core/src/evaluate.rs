//! Screening metrics computed from per-image COVID scores.
//!
//! An image is predicted COVID when its score is strictly greater than the
//! threshold; a score equal to the threshold counts as NON_COVID.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{Label, Subgroup};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("score set has no {0} entries")]
    MissingLabel(Label),
    #[error("score {score} for {path} is not a finite value in [0, 1]")]
    InvalidScore { path: String, score: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub score: f64,
    pub label: Label,
    pub subgroup: Subgroup,
    pub image_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    entries: Vec<ScoreEntry>,
}

impl ScoreSet {
    pub fn new(entries: Vec<ScoreEntry>) -> Result<Self, EvalError> {
        for e in &entries {
            if !(e.score.is_finite() && (0.0..=1.0).contains(&e.score)) {
                return Err(EvalError::InvalidScore {
                    path: e.image_path.clone(),
                    score: e.score,
                });
            }
        }
        Ok(Self { entries })
    }

    /// Convenience constructor for tests and fixtures; subgroups follow the
    /// label and paths are the entry index.
    pub fn from_pairs(pairs: &[(f64, Label)]) -> Result<Self, EvalError> {
        Self::new(
            pairs
                .iter()
                .enumerate()
                .map(|(i, &(score, label))| ScoreEntry {
                    score,
                    label,
                    subgroup: match label {
                        Label::Covid => Subgroup::Covid,
                        Label::NonCovid => Subgroup::Normal,
                    },
                    image_path: i.to_string(),
                })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[ScoreEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    fn scores_of(&self, label: Label) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().filter(move |e| e.label == label).map(|e| e.score)
    }

    fn require_both(&self) -> Result<(usize, usize), EvalError> {
        let (p, n) = (self.count(Label::Covid), self.count(Label::NonCovid));
        if p == 0 {
            return Err(EvalError::MissingLabel(Label::Covid));
        }
        if n == 0 {
            return Err(EvalError::MissingLabel(Label::NonCovid));
        }
        Ok((p, n))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

pub fn operating_point(scores: &ScoreSet, threshold: f64) -> Result<OperatingPoint, EvalError> {
    let (p, n) = scores.require_both()?;
    if threshold.is_nan() {
        return Err(EvalError::InvalidArgument("threshold is NaN".into()));
    }
    let tp = scores.scores_of(Label::Covid).filter(|&s| s > threshold).count();
    let fp = scores.scores_of(Label::NonCovid).filter(|&s| s > threshold).count();
    Ok(OperatingPoint {
        threshold,
        sensitivity: tp as f64 / p as f64,
        specificity: (n - fp) as f64 / n as f64,
        tp,
        fn_: p - tp,
        tn: n - fp,
        fp,
    })
}

pub fn threshold_sweep(scores: &ScoreSet, thresholds: &[f64]) -> Result<Vec<OperatingPoint>, EvalError> {
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(EvalError::InvalidArgument("thresholds must be sorted ascending".into()));
    }
    thresholds.iter().map(|&t| operating_point(scores, t)).collect()
}

/// Every distinct observed score plus 1000 evenly spaced points on `[0, 1]`,
/// ascending.
pub fn default_sweep_grid(scores: &ScoreSet) -> Vec<f64> {
    let mut grid: Vec<f64> = (0..1000).map(|i| i as f64 / 999.0).collect();
    grid.extend(scores.entries.iter().map(|e| e.score));
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

/// Largest threshold whose sensitivity is at least `target`. Thresholds live
/// on the grid of representable `f64` values, so the result is the score
/// that must stay positive, stepped down by one ulp.
pub fn threshold_for_sensitivity(scores: &ScoreSet, target: f64) -> Result<f64, EvalError> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(EvalError::InvalidArgument(format!("target sensitivity {target} is outside (0, 1]")));
    }
    let mut covid: Vec<f64> = scores.scores_of(Label::Covid).collect();
    if covid.is_empty() {
        return Err(EvalError::MissingLabel(Label::Covid));
    }
    covid.sort_by(f64::total_cmp);
    let p = covid.len();
    // The tolerance keeps e.g. 0.975 * 40 from rounding up to 40.
    let need = ((target * p as f64 - 1e-9).ceil() as usize).clamp(1, p);
    Ok(covid[p - need].next_down())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub accuracy: f64,
    pub n: usize,
    pub z: f64,
    pub r: f64,
}

impl ConfidenceInterval {
    pub fn lower(&self) -> f64 {
        self.accuracy - self.r
    }

    pub fn upper(&self) -> f64 {
        self.accuracy + self.r
    }
}

/// Wald interval half-width `z * sqrt(a (1 - a) / n)`, without continuity
/// correction. It collapses to zero at `a` = 0 or 1.
pub fn confidence_interval(accuracy: f64, n: usize, z: f64) -> Result<ConfidenceInterval, EvalError> {
    if !(0.0..=1.0).contains(&accuracy) {
        return Err(EvalError::InvalidArgument(format!("accuracy {accuracy} is outside [0, 1]")));
    }
    if n == 0 {
        return Err(EvalError::InvalidArgument("n must be >= 1".into()));
    }
    if !(z.is_finite() && z > 0.0) {
        return Err(EvalError::InvalidArgument(format!("z must be > 0, got {z}")));
    }
    Ok(ConfidenceInterval {
        accuracy,
        n,
        z,
        r: z * (accuracy * (1.0 - accuracy) / n as f64).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC vertices from (0, 0) to (1, 1), one per distinct score. A group of
/// tied scores moves both rates at once, giving a diagonal segment.
pub fn roc_curve(scores: &ScoreSet) -> Result<Vec<RocPoint>, EvalError> {
    let (p, n) = scores.require_both()?;
    let mut sorted: Vec<(f64, Label)> = scores.entries.iter().map(|e| (e.score, e.label)).collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            match sorted[i].1 {
                Label::Covid => tp += 1,
                Label::NonCovid => fp += 1,
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
        });
    }
    Ok(points)
}

/// Trapezoidal area under an ROC polyline.
pub fn auc(roc: &[RocPoint]) -> f64 {
    roc.windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
        .sum()
}

/// `[[tn, fp], [fn, tp]]`: rows are the true class, columns the prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix(pub [[usize; 2]; 2]);

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.0.iter().flatten().sum()
    }
}

pub fn confusion_matrix(scores: &ScoreSet, threshold: f64) -> ConfusionMatrix {
    let mut m = [[0usize; 2]; 2];
    for e in &scores.entries {
        let predicted = usize::from(e.score > threshold);
        m[e.label.class_index()][predicted] += 1;
    }
    ConfusionMatrix(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistograms {
    /// `bins + 1` edges from 0 to 1. Bins are `[lo, hi)` except the last,
    /// which also holds 1.0.
    pub edges: Vec<f64>,
    pub covid: Vec<usize>,
    pub normal: Vec<usize>,
    pub other_disease: Vec<usize>,
}

impl ScoreHistograms {
    pub fn get(&self, subgroup: Subgroup) -> &[usize] {
        match subgroup {
            Subgroup::Covid => &self.covid,
            Subgroup::Normal => &self.normal,
            Subgroup::OtherDisease => &self.other_disease,
        }
    }
}

fn bin_index(score: f64, edges: &[f64]) -> usize {
    let bins = edges.len() - 1;
    let mut i = ((score * bins as f64) as usize).min(bins - 1);
    // The product can land one bin off the edge values; settle against them.
    while i > 0 && score < edges[i] {
        i -= 1;
    }
    while i + 1 < bins && score >= edges[i + 1] {
        i += 1;
    }
    i
}

pub fn score_histogram(scores: &ScoreSet, bins: usize) -> Result<ScoreHistograms, EvalError> {
    if bins == 0 {
        return Err(EvalError::InvalidArgument("bins must be >= 1".into()));
    }
    let edges: Vec<f64> = (0..=bins).map(|k| k as f64 / bins as f64).collect();
    let mut h = ScoreHistograms {
        covid: vec![0; bins],
        normal: vec![0; bins],
        other_disease: vec![0; bins],
        edges,
    };
    for e in &scores.entries {
        let i = bin_index(e.score, &h.edges);
        match e.subgroup {
            Subgroup::Covid => h.covid[i] += 1,
            Subgroup::Normal => h.normal[i] += 1,
            Subgroup::OtherDisease => h.other_disease[i] += 1,
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub bins: usize,
    pub target_sensitivity: f64,
    pub z: f64,
    /// Overrides the chosen threshold; otherwise it comes from
    /// `target_sensitivity`.
    pub threshold: Option<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            bins: 20,
            target_sensitivity: 0.975,
            z: 1.96,
            threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub operating_point: OperatingPoint,
    pub sweep: Vec<OperatingPoint>,
    pub roc: Vec<RocPoint>,
    pub auc: f64,
    pub confusion: ConfusionMatrix,
    pub histograms: ScoreHistograms,
    pub sensitivity_ci: ConfidenceInterval,
    pub specificity_ci: ConfidenceInterval,
    pub options: EvalOptions,
    /// Free-form record of the inputs that produced the report.
    #[serde(default)]
    pub provenance: serde_json::Value,
}

pub fn evaluate(scores: &ScoreSet, opts: &EvalOptions) -> Result<EvalReport, EvalError> {
    let (p, n) = scores.require_both()?;
    let threshold = match opts.threshold {
        Some(t) => t,
        None => threshold_for_sensitivity(scores, opts.target_sensitivity)?,
    };
    let op = operating_point(scores, threshold)?;
    let roc = roc_curve(scores)?;
    Ok(EvalReport {
        threshold,
        operating_point: op,
        sweep: threshold_sweep(scores, &default_sweep_grid(scores))?,
        auc: auc(&roc),
        roc,
        confusion: confusion_matrix(scores, threshold),
        histograms: score_histogram(scores, opts.bins)?,
        sensitivity_ci: confidence_interval(op.sensitivity, p, opts.z)?,
        specificity_ci: confidence_interval(op.specificity, n, opts.z)?,
        options: opts.clone(),
        provenance: serde_json::Value::Null,
    })
}
