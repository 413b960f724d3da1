//! Transfer-learning pipeline for COVID-19 screening on chest radiographs.
//!
//! The crate is organised along the stages of the pipeline:
//!
//! * [`manifest`] builds and validates a patient-disjoint, split-labelled
//!   inventory of images from a positive and a negative corpus.
//! * [`augment`] expands the minority (COVID) training class with seeded
//!   flips, small rotations, smooth warps and oversampling.
//! * [`backbone`] preprocesses images and runs a frozen pretrained network to
//!   obtain penultimate-layer features, persisted in the `FEAT1` format.
//! * [`head`] trains the replaced last layer (softmax + cross-entropy, ADAM).
//! * [`evaluate`] computes operating points, threshold sweeps, Wald intervals,
//!   ROC/AUC, confusion matrices and per-subgroup score histograms.
//! * [`synthetic`] generates a separable Gaussian feature fixture so the
//!   training and evaluation stages can be exercised without images or models.

pub mod augment;
pub mod backbone;
pub mod evaluate;
pub mod head;
pub mod manifest;
pub mod synthetic;

mod seed;

pub use manifest::{DatasetManifest, ImageRecord, Label, Source, Split, Subgroup};
