use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use cxr_core::augment::augment_minority;
use cxr_core::backbone::{BackboneKind, BackboneSpec, FeatureMatrix};
use cxr_core::evaluate::{evaluate, ConfidenceInterval, EvalReport};
use cxr_core::head::{predict_scores, train_head, TrainHistory, TrainedHead};
use cxr_core::manifest::{
    build_manifest, validate_manifest, validate_manifest_with, SplitSpec, ValidateOptions,
    ValidationReport,
};
use cxr_core::synthetic::SyntheticFixture;
use cxr_core::{DatasetManifest, ImageRecord, Label, Split};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{Layout, PipelineConfig};
use crate::error::CliError;

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn load_manifest(layout: &Layout) -> Result<DatasetManifest, CliError> {
    let path = layout.manifest();
    if !path.exists() {
        return Err(CliError::missing("manifest (run `cxr prepare` first)", path));
    }
    Ok(DatasetManifest::load(&path)?)
}

fn load_features(path: &Path, kind: BackboneKind) -> Result<FeatureMatrix, CliError> {
    if !path.exists() {
        return Err(CliError::missing("feature file (run `cxr extract` first)", path.to_path_buf()));
    }
    let fm = FeatureMatrix::load(path)?;
    if fm.backbone() != kind {
        return Err(CliError::Validation(format!(
            "{} holds {} features, expected {kind}",
            path.display(),
            fm.backbone()
        )));
    }
    Ok(fm)
}

/// Manifest records for the feature rows, in feature order.
fn rows_for(manifest: &DatasetManifest, fm: &FeatureMatrix, split: Split) -> Result<Vec<ImageRecord>, CliError> {
    let by_path = manifest.by_path();
    fm.row_ids()
        .iter()
        .map(|id| match by_path.get(id.as_str()) {
            Some(r) if r.split == split => Ok((*r).clone()),
            Some(r) => Err(CliError::Validation(format!("feature row {id} is a {} image, expected {split}", r.split))),
            None => Err(CliError::Validation(format!("feature row {id} is not in the manifest"))),
        })
        .collect()
}

fn write_fixture(cfg: &PipelineConfig) -> Result<SyntheticFixture, CliError> {
    let layout = cfg.layout();
    let fx = SyntheticFixture::generate(&cfg.synthetic);
    fx.manifest.save(&layout.manifest())?;
    fx.train.save(&layout.features(BackboneKind::Synthetic, Split::Train))?;
    fx.test.save(&layout.features(BackboneKind::Synthetic, Split::Test))?;
    Ok(fx)
}

/// In fixture mode, later stages can run on a fresh work directory.
fn ensure_fixture(cfg: &PipelineConfig) -> Result<(), CliError> {
    let layout = cfg.layout();
    let needed = [
        layout.manifest(),
        layout.features(BackboneKind::Synthetic, Split::Train),
        layout.features(BackboneKind::Synthetic, Split::Test),
    ];
    if cfg.synthetic_fixture && needed.iter().any(|p| !p.exists()) {
        write_fixture(cfg)?;
    }
    Ok(())
}

fn counts_line(m: &DatasetManifest) -> String {
    let c = &m.counts;
    format!(
        "train: {} COVID, {} non-COVID; test: {} COVID, {} normal, {} other disease",
        c.train.covid,
        c.train.non_covid(),
        c.test.covid,
        c.test.normal,
        c.test.other_disease
    )
}

pub fn prepare(cfg: &PipelineConfig) -> Result<String, CliError> {
    let layout = cfg.layout();
    let (manifest, report): (DatasetManifest, ValidationReport) = if cfg.synthetic_fixture {
        let fx = write_fixture(cfg)?;
        let report = validate_manifest_with(&fx.manifest, ValidateOptions { check_files: false });
        (fx.manifest, report)
    } else {
        let required = |p: &Option<std::path::PathBuf>, key: &str| {
            p.clone()
                .ok_or_else(|| CliError::Validation(format!("paths.{key} is required (or use --synthetic-fixture)")))
        };
        let covid = required(&cfg.paths.covid_dir, "covid_dir")?;
        let negative = required(&cfg.paths.negative_dir, "negative_dir")?;
        let spec = match &cfg.paths.split_spec {
            Some(p) => SplitSpec::load(p)?,
            None => SplitSpec::bundled_default(),
        };
        let base = build_manifest(&covid, &negative, &spec)?;
        let manifest = augment_minority(&base, &cfg.augment, &layout.augmented_dir())?;
        let report = validate_manifest(&manifest);
        manifest.save(&layout.manifest())?;
        (manifest, report)
    };
    write_json(
        &layout.validation(),
        &json!({
            "clean": report.is_clean(),
            "issues": report.issues,
            "counts": manifest.counts,
            "config": cfg.echo(),
        }),
    )?;
    if !report.is_clean() {
        return Err(CliError::Validation(format!("manifest validation failed:\n{report}")));
    }
    Ok(format!("prepare: {} -> {}", counts_line(&manifest), layout.manifest().display()))
}

fn extract_one(cfg: &PipelineConfig, manifest: &DatasetManifest, kind: BackboneKind) -> Result<String, CliError> {
    let layout = cfg.layout();
    let model = cfg
        .models
        .get(kind)
        .ok_or_else(|| CliError::Validation(format!("no model file configured for {kind} (models.{kind})")))?;
    if !model.exists() {
        return Err(CliError::missing("model file", model.clone()));
    }
    let spec = BackboneSpec::new(kind, model)?;
    let mut shapes = Vec::new();
    for split in [Split::Train, Split::Test] {
        let fm = cxr_core::backbone::extract_features(&spec, &manifest.rows(split))?;
        fm.save(&layout.features(kind, split))?;
        shapes.push(format!("{split} {}x{}", fm.n_rows(), fm.dim()));
    }
    Ok(format!("extract {kind}: {}", shapes.join(", ")))
}

pub fn extract(cfg: &PipelineConfig) -> Result<String, CliError> {
    let mut lines = Vec::new();
    for kind in cfg.selected_backbones() {
        if kind == BackboneKind::Synthetic {
            let fx = write_fixture(cfg)?;
            lines.push(format!(
                "extract synthetic: TRAIN {}x{}, TEST {}x{}",
                fx.train.n_rows(),
                fx.train.dim(),
                fx.test.n_rows(),
                fx.test.dim()
            ));
            continue;
        }
        let manifest = load_manifest(&cfg.layout())?;
        lines.push(extract_one(cfg, &manifest, kind)?);
    }
    Ok(lines.join("\n"))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HistoryArtifact {
    pub backbone: BackboneKind,
    pub n_rows: usize,
    pub n_covid: usize,
    pub history: TrainHistory,
    pub config: serde_json::Value,
}

pub fn train(cfg: &PipelineConfig) -> Result<String, CliError> {
    ensure_fixture(cfg)?;
    let layout = cfg.layout();
    let manifest = load_manifest(&layout)?;
    let mut lines = Vec::new();
    for kind in cfg.selected_backbones() {
        let fm = load_features(&layout.features(kind, Split::Train), kind)?;
        let labels: Vec<Label> = rows_for(&manifest, &fm, Split::Train)?.iter().map(|r| r.label).collect();
        let (head, history) = train_head(&fm, &labels, &cfg.train)?;
        TrainedHead {
            head,
            backbone: kind,
            config: cfg.train.clone(),
        }
        .save(&layout.head(kind))?;
        let line = format!(
            "train {kind}: {} rows, {} epochs, final loss {:.6}, train accuracy {:.4}",
            fm.n_rows(),
            cfg.train.epochs,
            history.epoch_loss.last().copied().unwrap_or(f64::NAN),
            history.final_accuracy
        );
        write_json(
            &layout.history(kind),
            &HistoryArtifact {
                backbone: kind,
                n_rows: fm.n_rows(),
                n_covid: labels.iter().filter(|&&l| l == Label::Covid).count(),
                history,
                config: cfg.echo(),
            },
        )?;
        lines.push(line);
    }
    Ok(lines.join("\n"))
}

fn sweep_csv(report: &EvalReport) -> String {
    let mut s = String::from("threshold,sensitivity,specificity,tp,fn,tn,fp\n");
    for p in &report.sweep {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            p.threshold, p.sensitivity, p.specificity, p.tp, p.fn_, p.tn, p.fp
        );
    }
    s
}

pub fn evaluate_cmd(cfg: &PipelineConfig) -> Result<String, CliError> {
    ensure_fixture(cfg)?;
    let layout = cfg.layout();
    let manifest = load_manifest(&layout)?;
    let mut lines = Vec::new();
    for kind in cfg.selected_backbones() {
        let head_path = layout.head(kind);
        if !head_path.exists() {
            return Err(CliError::missing("head file (run `cxr train` first)", head_path));
        }
        let trained = TrainedHead::load(&head_path)?;
        if trained.backbone != kind {
            return Err(CliError::Validation(format!(
                "{} was trained on {} features",
                head_path.display(),
                trained.backbone
            )));
        }
        let features_path = layout.features(kind, Split::Test);
        let fm = load_features(&features_path, kind)?;
        let rows = rows_for(&manifest, &fm, Split::Test)?;
        let scores = predict_scores(&trained.head, &fm, &rows)?;
        let mut report = evaluate(&scores, &cfg.eval.options())?;
        report.provenance = json!({
            "backbone": kind,
            "head_file": head_path,
            "features_file": features_path,
            "n_test": scores.len(),
            "config": cfg.echo(),
        });
        write_json(&layout.eval_report(kind), &report)?;
        if cfg.eval.sweep_csv {
            write_text(&layout.sweep_csv(kind), &sweep_csv(&report))?;
        }
        let op = report.operating_point;
        lines.push(format!(
            "evaluate {kind}: threshold {:.6}, sensitivity {:.4}, specificity {:.4}, AUC {:.4}",
            report.threshold, op.sensitivity, op.specificity, report.auc
        ));
    }
    Ok(lines.join("\n"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub backbone: BackboneKind,
    pub model: String,
    pub threshold: f64,
    pub sensitivity: ConfidenceInterval,
    pub specificity: ConfidenceInterval,
    pub auc: f64,
}

fn pct(ci: &ConfidenceInterval) -> String {
    format!("{:.1}% ± {:.1}%", ci.accuracy * 100.0, ci.r * 100.0)
}

pub fn comparison_markdown(rows: &[ComparisonRow]) -> String {
    let mut s = String::from("| Model | Sensitivity | Specificity |\n|---|---|---|\n");
    for r in rows {
        let _ = writeln!(s, "| {} | {} | {} |", r.model, pct(&r.sensitivity), pct(&r.specificity));
    }
    s.push_str("\n| Model | Threshold | AUC |\n|---|---|---|\n");
    for r in rows {
        let _ = writeln!(s, "| {} | {:.6} | {:.4} |", r.model, r.threshold, r.auc);
    }
    s
}

pub fn report(cfg: &PipelineConfig) -> Result<String, CliError> {
    let layout = cfg.layout();
    let mut rows = Vec::new();
    for kind in cfg.selected_backbones() {
        let path = layout.eval_report(kind);
        if !path.exists() {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let r: EvalReport = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        rows.push(ComparisonRow {
            backbone: kind,
            model: kind.display_name().to_string(),
            threshold: r.threshold,
            sensitivity: r.sensitivity_ci,
            specificity: r.specificity_ci,
            auc: r.auc,
        });
    }
    if rows.is_empty() {
        return Err(CliError::missing(
            "evaluation reports (run `cxr evaluate` first)",
            layout.root.join("reports"),
        ));
    }
    write_json(&layout.comparison_json(), &json!({ "rows": rows, "config": cfg.echo() }))?;
    let md = comparison_markdown(&rows);
    write_text(&layout.comparison_md(), &md)?;
    Ok(md)
}
