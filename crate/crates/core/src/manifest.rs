//! Dataset inventory: which image belongs to which split, class and patient.
//!
//! A [`DatasetManifest`] is built from two corpora (the COVID-positive corpus
//! and a negative corpus) according to a declarative [`SplitSpec`], and is
//! serialized as a CSV with a fixed header. Patient identifiers are resolved
//! from a per-corpus metadata file, a regex over the relative path, or the
//! filename stem, in that order.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

pub const CSV_HEADER: [&str; 8] = [
    "image_path",
    "patient_id",
    "label",
    "subgroup",
    "split",
    "source",
    "is_augmented",
    "augmentation_desc",
];

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "tif"];

const BUNDLED_SPLIT_SPEC: &str = include_str!("../configs/default_split_spec.toml");

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("directory does not exist: {0}")]
    MissingDirectory(PathBuf),
    #[error("missing files: {}", display_paths(.0))]
    MissingFiles(Vec<PathBuf>),
    #[error("duplicate image path: {0}")]
    DuplicatePath(String),
    #[error("patient {patient_id} appears in both TRAIN ({train_path}) and TEST ({test_path})")]
    PatientLeak {
        patient_id: String,
        train_path: String,
        test_path: String,
    },
    #[error("insufficient images for rule {rule} ({pattern}): required {required}, found {found}")]
    InsufficientImages {
        rule: usize,
        pattern: String,
        required: usize,
        found: usize,
    },
    #[error("invalid split spec: {0}")]
    InvalidSpec(String),
    #[error("malformed manifest CSV at line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn display_paths(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ManifestError + '_ {
    move |source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal $(| $alias:literal)*),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(
                #[serde(rename = $text $(, alias = $alias)*)]
                $variant,
            )+
        }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self {
                    $(Self::$variant => $text,)+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text $(| $alias)* => Ok(Self::$variant),)+
                    other => Err(format!("unknown {} value {other:?}", stringify!($name))),
                }
            }
        }
    };
}

string_enum!(
    /// Binary ground truth. Class index 0 is `NonCovid`, 1 is `Covid`.
    Label {
        Covid => "COVID" | "covid",
        NonCovid => "NON_COVID" | "non_covid",
    }
);

string_enum!(
    /// Finer tag used for the per-subgroup score histograms.
    Subgroup {
        Covid => "COVID" | "covid",
        Normal => "NORMAL" | "normal",
        OtherDisease => "OTHER_DISEASE" | "other_disease",
    }
);

string_enum!(Split {
    Train => "TRAIN" | "train",
    Test => "TEST" | "test",
});

string_enum!(Source {
    CovidCorpus => "COVID_CORPUS" | "covid",
    NegativeCorpus => "NEGATIVE_CORPUS" | "negative",
});

impl Label {
    pub fn class_index(self) -> usize {
        match self {
            Label::NonCovid => 0,
            Label::Covid => 1,
        }
    }
}

impl Subgroup {
    pub fn label(self) -> Label {
        match self {
            Subgroup::Covid => Label::Covid,
            Subgroup::Normal | Subgroup::OtherDisease => Label::NonCovid,
        }
    }

    pub fn source(self) -> Source {
        match self {
            Subgroup::Covid => Source::CovidCorpus,
            Subgroup::Normal | Subgroup::OtherDisease => Source::NegativeCorpus,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub image_path: String,
    pub patient_id: String,
    pub label: Label,
    pub subgroup: Subgroup,
    pub split: Split,
    pub source: Source,
    pub is_augmented: bool,
    pub augmentation_desc: Option<String>,
}

impl ImageRecord {
    /// An original (non-augmented) record with label and source derived
    /// from the subgroup.
    pub fn original(
        image_path: impl Into<String>,
        patient_id: impl Into<String>,
        subgroup: Subgroup,
        split: Split,
    ) -> Self {
        Self {
            image_path: image_path.into(),
            patient_id: patient_id.into(),
            label: subgroup.label(),
            subgroup,
            split,
            source: subgroup.source(),
            is_augmented: false,
            augmentation_desc: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgroupCounts {
    pub covid: usize,
    pub normal: usize,
    pub other_disease: usize,
}

impl SubgroupCounts {
    pub fn get(&self, subgroup: Subgroup) -> usize {
        match subgroup {
            Subgroup::Covid => self.covid,
            Subgroup::Normal => self.normal,
            Subgroup::OtherDisease => self.other_disease,
        }
    }

    fn get_mut(&mut self, subgroup: Subgroup) -> &mut usize {
        match subgroup {
            Subgroup::Covid => &mut self.covid,
            Subgroup::Normal => &mut self.normal,
            Subgroup::OtherDisease => &mut self.other_disease,
        }
    }

    pub fn non_covid(&self) -> usize {
        self.normal + self.other_disease
    }

    pub fn total(&self) -> usize {
        self.covid + self.non_covid()
    }
}

/// Per (split x subgroup) tally.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestCounts {
    pub train: SubgroupCounts,
    pub test: SubgroupCounts,
}

impl ManifestCounts {
    pub fn from_records(records: &[ImageRecord]) -> Self {
        let mut counts = Self::default();
        for r in records {
            *counts.split_mut(r.split).get_mut(r.subgroup) += 1;
        }
        counts
    }

    pub fn split(&self, split: Split) -> &SubgroupCounts {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut SubgroupCounts {
        match split {
            Split::Train => &mut self.train,
            Split::Test => &mut self.test,
        }
    }

    pub fn get(&self, split: Split, subgroup: Subgroup) -> usize {
        self.split(split).get(subgroup)
    }

    pub fn label_count(&self, split: Split, label: Label) -> usize {
        let c = self.split(split);
        match label {
            Label::Covid => c.covid,
            Label::NonCovid => c.non_covid(),
        }
    }

    pub fn total(&self) -> usize {
        self.train.total() + self.test.total()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
    pub counts: ManifestCounts,
    pub schema_version: u32,
}

#[derive(Serialize, Deserialize)]
struct CountsSidecar {
    schema_version: u32,
    counts: ManifestCounts,
}

impl DatasetManifest {
    /// Sorts records by path and computes the tallies.
    pub fn new(mut records: Vec<ImageRecord>) -> Self {
        records.sort_by(|a, b| a.image_path.cmp(&b.image_path));
        let counts = ManifestCounts::from_records(&records);
        Self {
            records,
            counts,
            schema_version: SCHEMA_VERSION,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn rows(&self, split: Split) -> Vec<ImageRecord> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .cloned()
            .collect()
    }

    pub fn by_path(&self) -> HashMap<&str, &ImageRecord> {
        self.records
            .iter()
            .map(|r| (r.image_path.as_str(), r))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        // Writing into a Vec cannot fail.
        w.write_record(CSV_HEADER).unwrap();
        for r in &self.records {
            w.write_record([
                r.image_path.as_str(),
                r.patient_id.as_str(),
                r.label.as_str(),
                r.subgroup.as_str(),
                r.split.as_str(),
                r.source.as_str(),
                if r.is_augmented { "1" } else { "0" },
                r.augmentation_desc.as_deref().unwrap_or(""),
            ])
            .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).expect("manifest fields are UTF-8")
    }

    /// Parses the CSV form. Records keep file order and counts are
    /// recomputed, so an unsorted file is reported by the validator.
    pub fn from_csv(text: &str) -> Result<Self, ManifestError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| ManifestError::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        if header.iter().ne(CSV_HEADER.iter().copied()) {
            return Err(ManifestError::Parse {
                line: 1,
                message: format!("expected header {}", CSV_HEADER.join(",")),
            });
        }
        let mut records = Vec::new();
        for row in reader.records() {
            let row = row.map_err(|e| ManifestError::Parse {
                line: e.position().map(|p| p.line()).unwrap_or(0),
                message: e.to_string(),
            })?;
            let line = row.position().map(|p| p.line()).unwrap_or(0);
            let parse_err = |message: String| ManifestError::Parse { line, message };
            if row.len() != CSV_HEADER.len() {
                return Err(parse_err(format!("expected {} fields", CSV_HEADER.len())));
            }
            let is_augmented = match &row[6] {
                "0" => false,
                "1" => true,
                other => return Err(parse_err(format!("invalid boolean {other:?}"))),
            };
            records.push(ImageRecord {
                image_path: row[0].to_string(),
                patient_id: row[1].to_string(),
                label: row[2].parse().map_err(parse_err)?,
                subgroup: row[3].parse().map_err(parse_err)?,
                split: row[4].parse().map_err(parse_err)?,
                source: row[5].parse().map_err(parse_err)?,
                is_augmented,
                augmentation_desc: (!row[7].is_empty()).then(|| row[7].to_string()),
            });
        }
        let counts = ManifestCounts::from_records(&records);
        Ok(Self {
            records,
            counts,
            schema_version: SCHEMA_VERSION,
        })
    }

    /// Path of the JSON sidecar holding `schema_version` and `counts`.
    pub fn counts_path(csv_path: &Path) -> PathBuf {
        csv_path.with_extension("counts.json")
    }

    pub fn save(&self, csv_path: &Path) -> Result<(), ManifestError> {
        if let Some(parent) = csv_path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(csv_path, self.to_csv()).map_err(io_err(csv_path))?;
        let sidecar = CountsSidecar {
            schema_version: self.schema_version,
            counts: self.counts,
        };
        let counts_path = Self::counts_path(csv_path);
        let mut json = serde_json::to_string_pretty(&sidecar).expect("counts serialize");
        json.push('\n');
        fs::write(&counts_path, json).map_err(io_err(&counts_path))
    }

    /// Loads the CSV and, when present, the stored counts sidecar.
    pub fn load(csv_path: &Path) -> Result<Self, ManifestError> {
        let text = fs::read_to_string(csv_path).map_err(io_err(csv_path))?;
        let mut manifest = Self::from_csv(&text)?;
        let counts_path = Self::counts_path(csv_path);
        if counts_path.exists() {
            let json = fs::read_to_string(&counts_path).map_err(io_err(&counts_path))?;
            let sidecar: CountsSidecar =
                serde_json::from_str(&json).map_err(|e| ManifestError::Parse {
                    line: e.line() as u64,
                    message: format!("{}: {e}", counts_path.display()),
                })?;
            manifest.counts = sidecar.counts;
            manifest.schema_version = sidecar.schema_version;
        }
        Ok(manifest)
    }
}

// ---------------------------------------------------------------------------
// Split specification

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusOptions {
    /// CSV file (relative to the corpus directory) mapping image paths to
    /// patient identifiers.
    #[serde(default)]
    pub metadata: Option<PathBuf>,
    #[serde(default = "default_path_column")]
    pub metadata_path_column: String,
    #[serde(default = "default_patient_column")]
    pub metadata_patient_column: String,
    /// Regex applied to the corpus-relative path; capture group 1 (or the
    /// whole match) is the patient identifier.
    #[serde(default)]
    pub patient_id_pattern: Option<String>,
}

fn default_path_column() -> String {
    "path".to_string()
}

fn default_patient_column() -> String {
    "patient_id".to_string()
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            metadata: None,
            metadata_path_column: default_path_column(),
            metadata_patient_column: default_patient_column(),
            patient_id_pattern: None,
        }
    }
}

/// One selection rule. Exactly one of `glob` or `files` must be given.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRule {
    pub corpus: Source,
    #[serde(default)]
    pub glob: Option<String>,
    #[serde(default)]
    pub files: Option<Vec<String>>,
    pub split: Split,
    pub subgroup: Subgroup,
    /// Number of images to take (first in path order); all matches if absent.
    #[serde(default)]
    pub count: Option<usize>,
}

impl SplitRule {
    fn describe(&self) -> String {
        match (&self.glob, &self.files) {
            (Some(g), _) => format!("{}:{g}", self.corpus),
            (None, Some(f)) => format!("{}:{} listed files", self.corpus, f.len()),
            (None, None) => self.corpus.to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    #[serde(default)]
    pub covid: CorpusOptions,
    #[serde(default)]
    pub negative: CorpusOptions,
    pub rules: Vec<SplitRule>,
}

impl SplitSpec {
    /// The bundled default layout:
    /// `train/` and `test/` folders in the COVID corpus, and `no_finding/`
    /// plus thirteen disease sub-folders under `train/` and `test/` in the
    /// negative corpus.
    pub fn bundled_default() -> Self {
        Self::from_toml_str(BUNDLED_SPLIT_SPEC).expect("bundled split spec parses")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ManifestError> {
        let spec: SplitSpec =
            toml::from_str(text).map_err(|e| ManifestError::InvalidSpec(e.to_string()))?;
        spec.check()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    fn options(&self, corpus: Source) -> &CorpusOptions {
        match corpus {
            Source::CovidCorpus => &self.covid,
            Source::NegativeCorpus => &self.negative,
        }
    }

    fn check(&self) -> Result<(), ManifestError> {
        for (i, rule) in self.rules.iter().enumerate() {
            if rule.glob.is_some() == rule.files.is_some() {
                return Err(ManifestError::InvalidSpec(format!(
                    "rule {i}: exactly one of `glob` or `files` is required"
                )));
            }
            if rule.subgroup.source() != rule.corpus {
                return Err(ManifestError::InvalidSpec(format!(
                    "rule {i}: subgroup {} cannot come from {}",
                    rule.subgroup, rule.corpus
                )));
            }
            if let Some(g) = &rule.glob {
                glob::Pattern::new(g).map_err(|e| {
                    ManifestError::InvalidSpec(format!("rule {i}: bad glob {g:?}: {e}"))
                })?;
            }
        }
        for corpus in [Source::CovidCorpus, Source::NegativeCorpus] {
            if let Some(p) = &self.options(corpus).patient_id_pattern {
                Regex::new(p).map_err(|e| {
                    ManifestError::InvalidSpec(format!("{corpus} patient_id_pattern: {e}"))
                })?;
            }
        }
        Ok(())
    }
}

struct PatientResolver {
    by_path: HashMap<String, String>,
    pattern: Option<Regex>,
}

impl PatientResolver {
    fn load(dir: &Path, opts: &CorpusOptions) -> Result<Self, ManifestError> {
        let mut by_path = HashMap::new();
        if let Some(meta) = &opts.metadata {
            let path = dir.join(meta);
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            let mut reader = csv::Reader::from_reader(text.as_bytes());
            let parse = |e: csv::Error| ManifestError::Parse {
                line: e.position().map(|p| p.line()).unwrap_or(0),
                message: format!("{}: {e}", path.display()),
            };
            let headers = reader.headers().map_err(parse)?.clone();
            let column = |name: &str| {
                headers.iter().position(|h| h == name).ok_or_else(|| {
                    ManifestError::InvalidSpec(format!(
                        "{} has no column {name:?}",
                        path.display()
                    ))
                })
            };
            let path_col = column(&opts.metadata_path_column)?;
            let patient_col = column(&opts.metadata_patient_column)?;
            for row in reader.records() {
                let row = row.map_err(parse)?;
                if let (Some(p), Some(id)) = (row.get(path_col), row.get(patient_col)) {
                    if !id.is_empty() {
                        by_path.insert(p.to_string(), id.to_string());
                    }
                }
            }
        }
        let pattern = opts
            .patient_id_pattern
            .as_deref()
            .map(Regex::new)
            .transpose()
            .map_err(|e| ManifestError::InvalidSpec(e.to_string()))?;
        Ok(Self { by_path, pattern })
    }

    fn resolve(&self, rel: &str) -> String {
        let file_name = rel.rsplit('/').next().unwrap_or(rel);
        if let Some(id) = self
            .by_path
            .get(rel)
            .or_else(|| self.by_path.get(file_name))
        {
            return id.clone();
        }
        if let Some(caps) = self.pattern.as_ref().and_then(|re| re.captures(rel)) {
            let m = caps.get(1).or_else(|| caps.get(0)).expect("group 0 exists");
            return m.as_str().to_string();
        }
        Path::new(file_name)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| file_name.to_string())
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Image files under `dir` as `/`-separated relative paths, sorted.
fn list_images(dir: &Path) -> Result<Vec<String>, ManifestError> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(dir).follow_links(true) {
        let entry = entry.map_err(|e| ManifestError::Io {
            path: e.path().unwrap_or(dir).to_path_buf(),
            source: e.into_io_error().unwrap_or_else(|| std::io::Error::other("walk error")),
        })?;
        if entry.file_type().is_file() && is_image(entry.path()) {
            let rel = entry
                .path()
                .strip_prefix(dir)
                .expect("walkdir yields paths under its root");
            let rel = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            out.push(rel);
        }
    }
    out.sort();
    Ok(out)
}

fn join_path(dir: &Path, rel: &str) -> String {
    dir.join(rel).to_string_lossy().into_owned()
}

pub fn build_manifest(
    covid_dir: &Path,
    negative_dir: &Path,
    spec: &SplitSpec,
) -> Result<DatasetManifest, ManifestError> {
    spec.check()?;
    for dir in [covid_dir, negative_dir] {
        if !dir.is_dir() {
            return Err(ManifestError::MissingDirectory(dir.to_path_buf()));
        }
    }
    let dir_of = |corpus: Source| match corpus {
        Source::CovidCorpus => covid_dir,
        Source::NegativeCorpus => negative_dir,
    };

    let mut listings: BTreeMap<Source, Vec<String>> = BTreeMap::new();
    let mut resolvers: BTreeMap<Source, PatientResolver> = BTreeMap::new();
    for corpus in [Source::CovidCorpus, Source::NegativeCorpus] {
        if spec.rules.iter().any(|r| r.corpus == corpus) {
            let dir = dir_of(corpus);
            resolvers.insert(corpus, PatientResolver::load(dir, spec.options(corpus))?);
            if spec
                .rules
                .iter()
                .any(|r| r.corpus == corpus && r.glob.is_some())
            {
                listings.insert(corpus, list_images(dir)?);
            }
        }
    }

    let match_opts = glob::MatchOptions {
        case_sensitive: true,
        require_literal_separator: true,
        require_literal_leading_dot: false,
    };
    let mut claimed: HashSet<(Source, String)> = HashSet::new();
    let mut missing = Vec::new();
    let mut records = Vec::new();

    for (i, rule) in spec.rules.iter().enumerate() {
        let dir = dir_of(rule.corpus);
        let mut candidates: Vec<String> = Vec::new();
        if let Some(g) = &rule.glob {
            let pattern = glob::Pattern::new(g).expect("checked");
            candidates.extend(
                listings[&rule.corpus]
                    .iter()
                    .filter(|rel| pattern.matches_with(rel, match_opts))
                    .filter(|rel| !claimed.contains(&(rule.corpus, (*rel).clone())))
                    .cloned(),
            );
        } else if let Some(files) = &rule.files {
            for rel in files {
                if claimed.contains(&(rule.corpus, rel.clone())) || candidates.contains(rel) {
                    return Err(ManifestError::DuplicatePath(join_path(dir, rel)));
                }
                if dir.join(rel).is_file() {
                    candidates.push(rel.clone());
                } else {
                    missing.push(dir.join(rel));
                }
            }
        }
        if let Some(required) = rule.count {
            if candidates.len() < required {
                return Err(ManifestError::InsufficientImages {
                    rule: i,
                    pattern: rule.describe(),
                    required,
                    found: candidates.len(),
                });
            }
            candidates.truncate(required);
        }
        let resolver = &resolvers[&rule.corpus];
        for rel in candidates {
            records.push(ImageRecord::original(
                join_path(dir, &rel),
                resolver.resolve(&rel),
                rule.subgroup,
                rule.split,
            ));
            claimed.insert((rule.corpus, rel));
        }
    }

    if !missing.is_empty() {
        missing.sort();
        return Err(ManifestError::MissingFiles(missing));
    }

    let manifest = DatasetManifest::new(records);
    if let Some(w) = manifest
        .records
        .windows(2)
        .find(|w| w[0].image_path == w[1].image_path)
    {
        return Err(ManifestError::DuplicatePath(w[0].image_path.clone()));
    }
    if let Some(leak) = find_patient_leaks(&manifest.records).into_iter().next() {
        return Err(ManifestError::PatientLeak {
            patient_id: leak.patient_id,
            train_path: leak.train_path,
            test_path: leak.test_path,
        });
    }
    Ok(manifest)
}

struct Leak {
    patient_id: String,
    train_path: String,
    test_path: String,
}

/// Patients with images in both splits, sorted by patient id.
fn find_patient_leaks(records: &[ImageRecord]) -> Vec<Leak> {
    let mut first: BTreeMap<&str, [Option<&str>; 2]> = BTreeMap::new();
    for r in records {
        let slot = &mut first.entry(r.patient_id.as_str()).or_default()[match r.split {
            Split::Train => 0,
            Split::Test => 1,
        }];
        slot.get_or_insert(r.image_path.as_str());
    }
    first
        .into_iter()
        .filter_map(|(id, [train, test])| {
            Some(Leak {
                patient_id: id.to_string(),
                train_path: train?.to_string(),
                test_path: test?.to_string(),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IssueKind {
    MissingFile,
    UndecodableImage,
    DuplicatePath,
    PatientLeak,
    LabelInconsistent,
    AugmentedOutsideTrain,
    MissingAugmentationDesc,
    CountMismatch,
    UnsortedRecords,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub kind: IssueKind,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn count(&self, kind: IssueKind) -> usize {
        self.issues.iter().filter(|i| i.kind == kind).count()
    }

    fn push(&mut self, kind: IssueKind, message: String) {
        self.issues.push(ValidationIssue { kind, message });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for issue in &self.issues {
            writeln!(f, "{:?}: {}", issue.kind, issue.message)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ValidateOptions {
    /// Check that every image exists and decodes. Disabled for manifests
    /// whose rows stand for pre-computed features rather than files.
    pub check_files: bool,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        Self { check_files: true }
    }
}

pub fn validate_manifest(manifest: &DatasetManifest) -> ValidationReport {
    validate_manifest_with(manifest, ValidateOptions::default())
}

pub fn validate_manifest_with(manifest: &DatasetManifest, opts: ValidateOptions) -> ValidationReport {
    use IssueKind::*;
    let mut report = ValidationReport::default();
    let records = &manifest.records;

    if records
        .windows(2)
        .any(|w| w[0].image_path > w[1].image_path)
    {
        report.push(UnsortedRecords, "records are not sorted by image_path".into());
    }

    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.image_path.as_str()) {
            report.push(DuplicatePath, format!("{} listed more than once", r.image_path));
        }
        if r.subgroup.label() != r.label || r.subgroup.source() != r.source {
            report.push(
                LabelInconsistent,
                format!(
                    "{}: label {}, subgroup {}, source {} disagree",
                    r.image_path, r.label, r.subgroup, r.source
                ),
            );
        }
        if r.is_augmented && r.split != Split::Train {
            report.push(
                AugmentedOutsideTrain,
                format!("{} is augmented but in {}", r.image_path, r.split),
            );
        }
        if r.is_augmented && r.augmentation_desc.as_deref().unwrap_or("").is_empty() {
            report.push(
                MissingAugmentationDesc,
                format!("{} is augmented without a transform description", r.image_path),
            );
        }
    }

    for leak in find_patient_leaks(records) {
        report.push(
            PatientLeak,
            format!(
                "patient {} in TRAIN ({}) and TEST ({})",
                leak.patient_id, leak.train_path, leak.test_path
            ),
        );
    }

    let recomputed = ManifestCounts::from_records(records);
    for split in [Split::Train, Split::Test] {
        for subgroup in [Subgroup::Covid, Subgroup::Normal, Subgroup::OtherDisease] {
            let (stored, actual) = (
                manifest.counts.get(split, subgroup),
                recomputed.get(split, subgroup),
            );
            if stored != actual {
                report.push(
                    CountMismatch,
                    format!("{split}/{subgroup}: stored {stored}, records {actual}"),
                );
            }
        }
    }

    if opts.check_files {
        let file_issues: Vec<(IssueKind, String)> = records
            .par_iter()
            .filter_map(|r| {
                let path = Path::new(&r.image_path);
                if !path.is_file() {
                    return Some((MissingFile, format!("{} does not exist", r.image_path)));
                }
                let decoded = image::ImageReader::open(path)
                    .and_then(|reader| reader.with_guessed_format())
                    .map_err(|e| e.to_string())
                    .and_then(|reader| reader.into_dimensions().map_err(|e| e.to_string()));
                match decoded {
                    Ok((w, h)) if w > 0 && h > 0 => None,
                    Ok(_) => Some((UndecodableImage, format!("{} is empty", r.image_path))),
                    Err(e) => Some((UndecodableImage, format!("{}: {e}", r.image_path))),
                }
            })
            .collect();
        for (kind, message) in file_issues {
            report.push(kind, message);
        }
    }

    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write_png(path: &Path, shade: u8) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        image::GrayImage::from_pixel(4, 4, image::Luma([shade]))
            .save(path)
            .unwrap();
    }

    fn small_spec(negatives: usize) -> SplitSpec {
        SplitSpec::from_toml_str(&format!(
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
            glob = "*.png"
            split = "train"
            subgroup = "normal"
            count = {negatives}
            "#
        ))
        .unwrap()
    }

    #[test]
    fn enum_strings_round_trip() {
        for l in [Label::Covid, Label::NonCovid] {
            assert_eq!(l.as_str().parse::<Label>().unwrap(), l);
        }
        assert_eq!("other_disease".parse::<Subgroup>().unwrap(), Subgroup::OtherDisease);
        assert!("MAYBE".parse::<Label>().is_err());
    }

    #[test]
    fn empty_negative_dir_is_insufficient() {
        let tmp = tempfile::tempdir().unwrap();
        let (covid, neg) = (tmp.path().join("covid"), tmp.path().join("neg"));
        write_png(&covid.join("train/a.png"), 1);
        fs::create_dir_all(&neg).unwrap();
        let err = build_manifest(&covid, &neg, &small_spec(2000)).unwrap_err();
        assert!(
            matches!(err, ManifestError::InsufficientImages { required: 2000, found: 0, .. }),
            "{err}"
        );
        assert!(err.to_string().contains("insufficient images"));
    }

    #[test]
    fn patient_leak_names_patient() {
        let tmp = tempfile::tempdir().unwrap();
        let (covid, neg) = (tmp.path().join("covid"), tmp.path().join("neg"));
        write_png(&covid.join("train/P7_a.png"), 1);
        write_png(&covid.join("test/P7_b.png"), 2);
        write_png(&covid.join("test/P8_a.png"), 3);
        write_png(&neg.join("n1.png"), 4);
        let mut spec = small_spec(1);
        spec.covid.patient_id_pattern = Some(r"(P\d+)_".into());
        let err = build_manifest(&covid, &neg, &spec).unwrap_err();
        match err {
            ManifestError::PatientLeak { patient_id, .. } => assert_eq!(patient_id, "P7"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn metadata_file_supplies_patient_ids() {
        let tmp = tempfile::tempdir().unwrap();
        let (covid, neg) = (tmp.path().join("covid"), tmp.path().join("neg"));
        write_png(&covid.join("train/x.png"), 1);
        write_png(&covid.join("test/y.png"), 2);
        write_png(&neg.join("n1.png"), 4);
        fs::write(covid.join("meta.csv"), "filename,patientid\nx.png,17\ny.png,18\n").unwrap();
        let mut spec = small_spec(1);
        spec.covid.metadata = Some("meta.csv".into());
        spec.covid.metadata_path_column = "filename".into();
        spec.covid.metadata_patient_column = "patientid".into();
        let m = build_manifest(&covid, &neg, &spec).unwrap();
        let ids: Vec<_> = m.records.iter().map(|r| r.patient_id.as_str()).collect();
        // Records are sorted by path, so test/ precedes train/.
        assert_eq!(ids, ["18", "17", "n1"]);
    }

    #[test]
    fn listed_missing_files_are_all_reported() {
        let tmp = tempfile::tempdir().unwrap();
        let (covid, neg) = (tmp.path().join("covid"), tmp.path().join("neg"));
        write_png(&covid.join("a.png"), 1);
        fs::create_dir_all(&neg).unwrap();
        let spec = SplitSpec::from_toml_str(
            r#"
            [[rules]]
            corpus = "covid"
            files = ["a.png", "gone1.png", "gone2.png"]
            split = "train"
            subgroup = "covid"
            "#,
        )
        .unwrap();
        let err = build_manifest(&covid, &neg, &spec).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("gone1.png") && msg.contains("gone2.png"), "{msg}");
    }

    #[test]
    fn duplicate_listed_file_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let (covid, neg) = (tmp.path().join("covid"), tmp.path().join("neg"));
        write_png(&covid.join("a.png"), 1);
        fs::create_dir_all(&neg).unwrap();
        let spec = SplitSpec::from_toml_str(
            r#"
            [[rules]]
            corpus = "covid"
            files = ["a.png"]
            split = "train"
            subgroup = "covid"

            [[rules]]
            corpus = "covid"
            files = ["a.png"]
            split = "test"
            subgroup = "covid"
            "#,
        )
        .unwrap();
        assert!(matches!(
            build_manifest(&covid, &neg, &spec),
            Err(ManifestError::DuplicatePath(_))
        ));
    }

    #[test]
    fn spec_rejects_subgroup_from_wrong_corpus() {
        let err = SplitSpec::from_toml_str(
            r#"
            [[rules]]
            corpus = "negative"
            glob = "*"
            split = "train"
            subgroup = "covid"
            "#,
        )
        .unwrap_err();
        assert!(matches!(err, ManifestError::InvalidSpec(_)));
    }

    #[test]
    fn missing_directory() {
        let tmp = tempfile::tempdir().unwrap();
        let err = build_manifest(
            &tmp.path().join("nope"),
            tmp.path(),
            &SplitSpec::bundled_default(),
        )
        .unwrap_err();
        assert!(matches!(err, ManifestError::MissingDirectory(_)));
    }

    #[test]
    fn validator_reports_missing_file_and_count_mismatch() {
        let tmp = tempfile::tempdir().unwrap();
        let present = tmp.path().join("a.png");
        write_png(&present, 9);
        let mut m = DatasetManifest::new(vec![
            ImageRecord::original(present.to_string_lossy(), "p1", Subgroup::Covid, Split::Train),
            ImageRecord::original(
                tmp.path().join("b.png").to_string_lossy(),
                "p2",
                Subgroup::Normal,
                Split::Test,
            ),
        ]);
        let report = validate_manifest(&m);
        assert_eq!(report.issues.len(), 1, "{report}");
        assert_eq!(report.count(IssueKind::MissingFile), 1);

        m.counts.test.normal += 1;
        let report = validate_manifest_with(&m, ValidateOptions { check_files: false });
        assert_eq!(report.count(IssueKind::CountMismatch), 1);
        assert_eq!(report.issues.len(), 1);
    }

    #[test]
    fn validator_flags_undecodable_and_inconsistent_rows() {
        let tmp = tempfile::tempdir().unwrap();
        let junk = tmp.path().join("junk.png");
        fs::write(&junk, b"not an image").unwrap();
        let mut rec = ImageRecord::original(junk.to_string_lossy(), "p", Subgroup::Normal, Split::Test);
        rec.label = Label::Covid;
        rec.is_augmented = true;
        let m = DatasetManifest::new(vec![rec]);
        let report = validate_manifest(&m);
        assert_eq!(report.count(IssueKind::UndecodableImage), 1);
        assert_eq!(report.count(IssueKind::LabelInconsistent), 1);
        assert_eq!(report.count(IssueKind::AugmentedOutsideTrain), 1);
        assert_eq!(report.count(IssueKind::MissingAugmentationDesc), 1);
    }

    #[test]
    fn csv_round_trip_keeps_optional_fields() {
        let mut aug = ImageRecord::original("out/a,b__aug1.png", "p1", Subgroup::Covid, Split::Train);
        aug.is_augmented = true;
        aug.augmentation_desc = Some("hflip;rot=-7.31".into());
        let m = DatasetManifest::new(vec![
            aug,
            ImageRecord::original("x/n.png", "p2", Subgroup::OtherDisease, Split::Test),
        ]);
        let csv = m.to_csv();
        assert!(csv.starts_with(
            "image_path,patient_id,label,subgroup,split,source,is_augmented,augmentation_desc\n"
        ));
        assert!(csv.contains("\"out/a,b__aug1.png\",p1,COVID,COVID,TRAIN,COVID_CORPUS,1,hflip;rot=-7.31\n"));
        assert_eq!(DatasetManifest::from_csv(&csv).unwrap(), m);
    }

    #[test]
    fn bad_header_is_rejected() {
        assert!(matches!(
            DatasetManifest::from_csv("path,label\n"),
            Err(ManifestError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn bundled_default_spec_shape() {
        let spec = SplitSpec::bundled_default();
        let sum = |split: Split, subgroup: Subgroup| -> usize {
            spec.rules
                .iter()
                .filter(|r| r.split == split && r.subgroup == subgroup)
                .map(|r| r.count.unwrap_or(0))
                .sum()
        };
        assert_eq!(sum(Split::Train, Subgroup::Normal), 700);
        assert_eq!(sum(Split::Train, Subgroup::OtherDisease), 1300);
        assert_eq!(sum(Split::Test, Subgroup::Normal), 1700);
        assert_eq!(sum(Split::Test, Subgroup::OtherDisease), 1300);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_record() -> impl Strategy<Value = ImageRecord> {
            (
                "[a-z]{1,6}",
                "p[0-9]{1,2}",
                prop_oneof![
                    Just(Subgroup::Covid),
                    Just(Subgroup::Normal),
                    Just(Subgroup::OtherDisease)
                ],
                prop_oneof![Just(Split::Train), Just(Split::Test)],
            )
                .prop_map(|(path, pid, sg, split)| ImageRecord::original(path, pid, sg, split))
        }

        proptest! {
            #[test]
            fn counts_sum_to_record_count(records in proptest::collection::vec(arb_record(), 0..60)) {
                let m = DatasetManifest::new(records);
                prop_assert_eq!(m.counts.total(), m.len());
            }

            #[test]
            fn clean_manifests_are_patient_disjoint(records in proptest::collection::vec(arb_record(), 0..40)) {
                let m = DatasetManifest::new(records);
                let report = validate_manifest_with(&m, ValidateOptions { check_files: false });
                if report.count(IssueKind::PatientLeak) == 0 {
                    let train: HashSet<_> = m.records.iter().filter(|r| r.split == Split::Train).map(|r| &r.patient_id).collect();
                    prop_assert!(m.records.iter().filter(|r| r.split == Split::Test).all(|r| !train.contains(&r.patient_id)));
                }
            }

            #[test]
            fn csv_serialization_is_stable(records in proptest::collection::vec(arb_record(), 0..30)) {
                let m = DatasetManifest::new(records);
                let csv = m.to_csv();
                prop_assert_eq!(DatasetManifest::from_csv(&csv).unwrap().to_csv(), csv);
            }
        }
    }
}
