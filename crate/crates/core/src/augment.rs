//! Seeded augmentation of the minority (COVID) training class.
//!
//! Every augmented image is described by a [`TransformChain`] whose textual
//! form is stored in the manifest's `augmentation_desc` column, e.g.
//! `hflip;rot=-7.31;dist=1.85:0c1f9a44d2e07b13`. Parsing that string and
//! calling [`apply_transform`] on the original reproduces the image exactly.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, ImageBuffer, ImageFormat, Pixel, Primitive};
use num_traits::{NumCast, ToPrimitive};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{DatasetManifest, ImageRecord, Split, Subgroup};
use crate::seed::derived_rng;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
    #[error("target_count {target} is below the {source_count} source images")]
    TargetBelowSource { target: usize, source_count: usize },
    #[error("no TRAIN/COVID images to augment")]
    NoSourceImages,
    #[error("manifest already contains augmented TRAIN/COVID records")]
    AlreadyAugmented,
    #[error("output directory {path} is not writable: {source}")]
    Unwritable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("originals {first} and {second} share the file stem {stem:?}")]
    NameCollision {
        stem: String,
        first: String,
        second: String,
    },
    #[error("cannot decode {path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("cannot encode {path}: {source}")]
    Encode {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("invalid transform description {0:?}")]
    ParseTransform(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub seed: u64,
    /// TRAIN/COVID images after augmentation, originals included.
    pub target_count: usize,
    pub rotation_max_deg: f64,
    pub distortion_amplitude_px: f64,
    pub enable_hflip: bool,
    /// Replicas per original beyond this number are exact copies (`dup=k`).
    pub max_transformed_per_image: Option<usize>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            seed: 2020,
            target_count: 496,
            rotation_max_deg: 10.0,
            distortion_amplitude_px: 3.0,
            enable_hflip: true,
            max_transformed_per_image: None,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: &str| Err(AugmentError::InvalidConfig(m.to_string()));
        if self.target_count == 0 {
            return bad("target_count must be positive");
        }
        if !(self.rotation_max_deg.is_finite() && self.rotation_max_deg > 0.0) {
            return bad("rotation_max_deg must be > 0");
        }
        if !(self.distortion_amplitude_px.is_finite() && self.distortion_amplitude_px >= 0.0) {
            return bad("distortion_amplitude_px must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    HFlip,
    /// Counter-clockwise rotation about the image centre; exposed corners
    /// are black.
    Rotate { degrees: f64 },
    /// Smooth sinusoidal displacement field of at most `amplitude` pixels,
    /// generated from `seed`.
    Distort { amplitude: f64, seed: u64 },
    /// Exact copy (oversampling); `index` distinguishes copies.
    Duplicate { index: usize },
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::HFlip => f.write_str("hflip"),
            Transform::Rotate { degrees } => write!(f, "rot={degrees:.2}"),
            Transform::Distort { amplitude, seed } => write!(f, "dist={amplitude:.2}:{seed:016x}"),
            Transform::Duplicate { index } => write!(f, "dup={index}"),
        }
    }
}

impl FromStr for Transform {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || AugmentError::ParseTransform(s.to_string());
        let finite = |v: f64| if v.is_finite() { Ok(v) } else { Err(err()) };
        if s == "hflip" {
            return Ok(Transform::HFlip);
        }
        let (key, value) = s.split_once('=').ok_or_else(err)?;
        match key {
            "rot" => Ok(Transform::Rotate {
                degrees: finite(value.parse().map_err(|_| err())?)?,
            }),
            "dist" => {
                let (amp, seed) = value.split_once(':').ok_or_else(err)?;
                let amplitude: f64 = finite(amp.parse().map_err(|_| err())?)?;
                if amplitude < 0.0 {
                    return Err(err());
                }
                Ok(Transform::Distort {
                    amplitude,
                    seed: u64::from_str_radix(seed, 16).map_err(|_| err())?,
                })
            }
            "dup" => Ok(Transform::Duplicate {
                index: value.parse().map_err(|_| err())?,
            }),
            _ => Err(err()),
        }
    }
}

/// Ordered list of transforms, applied left to right.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransformChain(pub Vec<Transform>);

impl fmt::Display for TransformChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

impl FromStr for TransformChain {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.is_empty() {
            return Ok(Self::default());
        }
        s.split(';').map(str::parse).collect::<Result<_, _>>().map(Self)
    }
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// Draws the transform chain for replica `replica` (1-based) of one image.
/// The stream depends only on `(cfg.seed, image_path, replica)`.
pub fn sample_chain(cfg: &AugmentConfig, image_path: &str, replica: usize) -> TransformChain {
    if let Some(max) = cfg.max_transformed_per_image {
        if replica > max {
            return TransformChain(vec![Transform::Duplicate {
                index: replica - max,
            }]);
        }
    }
    let mut rng = derived_rng(
        cfg.seed,
        &[b"augment", image_path.as_bytes(), &(replica as u64).to_le_bytes()],
    );
    let mut steps = Vec::with_capacity(3);
    let flip: bool = rng.random();
    if cfg.enable_hflip && flip {
        steps.push(Transform::HFlip);
    }
    let max = cfg.rotation_max_deg;
    let degrees = round2(rng.random_range(-max..=max)).clamp(-max, max);
    steps.push(Transform::Rotate { degrees });
    let amplitude = round2(rng.random_range(0.0..=1.0) * cfg.distortion_amplitude_px)
        .min(cfg.distortion_amplitude_px);
    let warp_seed: u64 = rng.random();
    if cfg.distortion_amplitude_px > 0.0 {
        steps.push(Transform::Distort {
            amplitude,
            seed: warp_seed,
        });
    }
    TransformChain(steps)
}

// ---------------------------------------------------------------------------
// Pixel-level transforms

#[derive(Clone, Copy)]
enum Edge {
    Black,
    Clamp,
}

const WARP_COMPONENTS: usize = 3;

/// Sum of low-frequency plane waves, normalised so each axis stays within
/// `amplitude` pixels.
struct WarpField {
    amplitude: f64,
    // (cycles along x, cycles along y, phase, weight) per component and axis.
    waves: [[(f64, f64, f64, f64); WARP_COMPONENTS]; 2],
    norm: [f64; 2],
}

impl WarpField {
    fn new(amplitude: f64, seed: u64) -> Self {
        let mut rng = derived_rng(seed, &[b"warp-field"]);
        let mut waves = [[(0.0f64, 0.0f64, 0.0f64, 0.0f64); WARP_COMPONENTS]; 2];
        let mut norm = [0.0; 2];
        for axis in 0..2 {
            for w in waves[axis].iter_mut() {
                *w = (
                    rng.random_range(0.25..1.5),
                    rng.random_range(0.25..1.5),
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(-1.0..1.0),
                );
                norm[axis] += w.3.abs();
            }
        }
        Self {
            amplitude,
            waves,
            norm,
        }
    }

    fn displacement(&self, u: f64, v: f64) -> (f64, f64) {
        let axis = |a: usize| {
            if self.norm[a] == 0.0 {
                return 0.0;
            }
            let s: f64 = self.waves[a]
                .iter()
                .map(|&(fx, fy, phase, weight)| weight * (2.0 * PI * (fx * u + fy * v) + phase).sin())
                .sum();
            self.amplitude * s / self.norm[a]
        };
        (axis(0), axis(1))
    }
}

type Buffer<P> = ImageBuffer<P, Vec<<P as Pixel>::Subpixel>>;

/// Resamples `src` with bilinear interpolation; `source_of(x, y)` gives the
/// source coordinate sampled for output pixel `(x, y)`.
fn resample<P, F>(src: &Buffer<P>, edge: Edge, source_of: F) -> Buffer<P>
where
    P: Pixel,
    F: Fn(f64, f64) -> (f64, f64),
{
    let (w, h) = src.dimensions();
    let n = P::CHANNEL_COUNT as usize;
    let max = <P::Subpixel as Primitive>::DEFAULT_MAX_VALUE.to_f64().unwrap_or(1.0);
    let min = <P::Subpixel as Primitive>::DEFAULT_MIN_VALUE.to_f64().unwrap_or(0.0);
    let integral = max > 1.0;

    let fetch = |xi: i64, yi: i64, acc: &mut [f64; 4], weight: f64| {
        if weight == 0.0 {
            return;
        }
        let (x, y) = match edge {
            Edge::Black => {
                if xi < 0 || yi < 0 || xi >= w as i64 || yi >= h as i64 {
                    return;
                }
                (xi as u32, yi as u32)
            }
            Edge::Clamp => (
                xi.clamp(0, w as i64 - 1) as u32,
                yi.clamp(0, h as i64 - 1) as u32,
            ),
        };
        for (a, c) in acc.iter_mut().zip(src.get_pixel(x, y).channels()) {
            *a += weight * c.to_f64().unwrap_or(0.0);
        }
    };

    ImageBuffer::from_fn(w, h, |x, y| {
        let (sx, sy) = source_of(x as f64, y as f64);
        let (x0, y0) = (sx.floor(), sy.floor());
        let (fx, fy) = (sx - x0, sy - y0);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let mut acc = [0.0f64; 4];
        fetch(x0, y0, &mut acc, (1.0 - fx) * (1.0 - fy));
        fetch(x0 + 1, y0, &mut acc, fx * (1.0 - fy));
        fetch(x0, y0 + 1, &mut acc, (1.0 - fx) * fy);
        fetch(x0 + 1, y0 + 1, &mut acc, fx * fy);
        let mut out = [<P::Subpixel as Primitive>::DEFAULT_MIN_VALUE; 4];
        for (o, a) in out.iter_mut().zip(acc).take(n) {
            let v = if integral { a.round() } else { a };
            *o = num_cast(v.clamp(min, max));
        }
        *P::from_slice(&out[..n])
    })
}

fn num_cast<S: Primitive>(v: f64) -> S {
    <S as NumCast>::from(v).unwrap_or(S::DEFAULT_MIN_VALUE)
}

fn rotate<P: Pixel>(src: &Buffer<P>, degrees: f64) -> Buffer<P> {
    if degrees == 0.0 {
        return src.clone();
    }
    let (w, h) = src.dimensions();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    // Inverse map in y-down pixel coordinates.
    let theta = degrees.to_radians();
    let (s, c) = theta.sin_cos();
    resample(src, Edge::Black, |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        (cx + c * dx - s * dy, cy + s * dx + c * dy)
    })
}

fn distort<P: Pixel>(src: &Buffer<P>, amplitude: f64, seed: u64) -> Buffer<P> {
    if amplitude == 0.0 {
        return src.clone();
    }
    let (w, h) = src.dimensions();
    let field = WarpField::new(amplitude, seed);
    resample(src, Edge::Clamp, |x, y| {
        let (dx, dy) = field.displacement(x / w as f64, y / h as f64);
        (x + dx, y + dy)
    })
}

fn apply_chain<P: Pixel + 'static>(src: &Buffer<P>, chain: &TransformChain) -> Buffer<P> {
    let mut img = src.clone();
    for step in &chain.0 {
        img = match *step {
            Transform::HFlip => image::imageops::flip_horizontal(&img),
            Transform::Rotate { degrees } => rotate(&img, degrees),
            Transform::Distort { amplitude, seed } => distort(&img, amplitude, seed),
            Transform::Duplicate { .. } => img,
        };
    }
    img
}

/// Applies `chain` to a decoded image. Output dimensions and pixel format
/// match the input for 8- and 16-bit images; other formats become RGBA8.
pub fn apply_transform(image: &DynamicImage, chain: &TransformChain) -> DynamicImage {
    match image {
        DynamicImage::ImageLuma8(b) => DynamicImage::ImageLuma8(apply_chain(b, chain)),
        DynamicImage::ImageLumaA8(b) => DynamicImage::ImageLumaA8(apply_chain(b, chain)),
        DynamicImage::ImageRgb8(b) => DynamicImage::ImageRgb8(apply_chain(b, chain)),
        DynamicImage::ImageRgba8(b) => DynamicImage::ImageRgba8(apply_chain(b, chain)),
        DynamicImage::ImageLuma16(b) => DynamicImage::ImageLuma16(apply_chain(b, chain)),
        DynamicImage::ImageLumaA16(b) => DynamicImage::ImageLumaA16(apply_chain(b, chain)),
        DynamicImage::ImageRgb16(b) => DynamicImage::ImageRgb16(apply_chain(b, chain)),
        DynamicImage::ImageRgba16(b) => DynamicImage::ImageRgba16(apply_chain(b, chain)),
        other => DynamicImage::ImageRgba8(apply_chain(&other.to_rgba8(), chain)),
    }
}

fn encode_png(img: &DynamicImage) -> Result<Vec<u8>, image::ImageError> {
    let mut bytes = Vec::new();
    img.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)?;
    Ok(bytes)
}

fn file_stem(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string())
}

/// Path of replica `replica` of `original` inside `out_dir`.
pub fn augmented_path(out_dir: &Path, original: &str, replica: usize) -> PathBuf {
    out_dir.join(format!("{}__aug{replica}.png", file_stem(original)))
}

/// Expands TRAIN/COVID to exactly `cfg.target_count` records by writing
/// augmented PNGs into `out_dir`. Replica `j` of every original is produced
/// before replica `j + 1` of any, so originals are used evenly.
pub fn augment_minority(
    manifest: &DatasetManifest,
    cfg: &AugmentConfig,
    out_dir: &Path,
) -> Result<DatasetManifest, AugmentError> {
    cfg.validate()?;
    let minority = |r: &&ImageRecord| r.split == Split::Train && r.subgroup == Subgroup::Covid;
    let originals: Vec<&ImageRecord> = manifest
        .records
        .iter()
        .filter(minority)
        .filter(|r| !r.is_augmented)
        .collect();
    let current = manifest.records.iter().filter(minority).count();

    if current == cfg.target_count {
        return Ok(manifest.clone());
    }
    if current != originals.len() {
        return Err(AugmentError::AlreadyAugmented);
    }
    if cfg.target_count < originals.len() {
        return Err(AugmentError::TargetBelowSource {
            target: cfg.target_count,
            source_count: originals.len(),
        });
    }
    if originals.is_empty() {
        return Err(AugmentError::NoSourceImages);
    }

    let mut stems: HashMap<String, &str> = HashMap::new();
    for r in &originals {
        if let Some(first) = stems.insert(file_stem(&r.image_path), &r.image_path) {
            return Err(AugmentError::NameCollision {
                stem: file_stem(&r.image_path),
                first: first.to_string(),
                second: r.image_path.clone(),
            });
        }
    }

    fs::create_dir_all(out_dir).map_err(|source| AugmentError::Unwritable {
        path: out_dir.to_path_buf(),
        source,
    })?;

    let n = originals.len();
    let extra = cfg.target_count - n;
    let replicas_of = |i: usize| extra / n + (i < extra % n) as usize;

    let produced: Vec<Vec<ImageRecord>> = originals
        .par_iter()
        .enumerate()
        .map(|(i, orig)| -> Result<Vec<ImageRecord>, AugmentError> {
            let count = replicas_of(i);
            if count == 0 {
                return Ok(Vec::new());
            }
            let img = image::open(&orig.image_path).map_err(|source| AugmentError::Decode {
                path: orig.image_path.clone(),
                source,
            })?;
            let mut out = Vec::with_capacity(count);
            for replica in 1..=count {
                let chain = sample_chain(cfg, &orig.image_path, replica);
                let desc = chain.to_string();
                let target = augmented_path(out_dir, &orig.image_path, replica);
                let target_str = target.to_string_lossy().into_owned();
                // Render from the parsed description so the stored text is
                // exactly what produced the pixels.
                let parsed: TransformChain = desc.parse()?;
                let bytes = encode_png(&apply_transform(&img, &parsed)).map_err(|source| {
                    AugmentError::Encode {
                        path: target_str.clone(),
                        source,
                    }
                })?;
                fs::write(&target, bytes).map_err(|source| AugmentError::Unwritable {
                    path: target.clone(),
                    source,
                })?;
                out.push(ImageRecord {
                    image_path: target_str,
                    patient_id: orig.patient_id.clone(),
                    label: orig.label,
                    subgroup: orig.subgroup,
                    split: orig.split,
                    source: orig.source,
                    is_augmented: true,
                    augmentation_desc: Some(desc),
                });
            }
            Ok(out)
        })
        .collect::<Result<_, _>>()?;

    let mut records = manifest.records.clone();
    records.extend(produced.into_iter().flatten());
    Ok(DatasetManifest::new(records))
}
