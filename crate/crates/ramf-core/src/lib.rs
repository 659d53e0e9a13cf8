//! Non-exemplar class-incremental learning with random auxiliary class
//! augmentation and mixed features (RAMF).
//!
//! The crate is organized as a small stack:
//!
//! - [`autodiff`]: dense f64 tensors, a reverse-mode tape, an SGD optimizer
//!   with cosine annealing, and a finite-difference gradient checker.
//! - [`data`]: IDX ingestion, deterministic synthetic image generation,
//!   class-incremental task splitting, and batch iteration.
//! - [`augment`]: class augmentations that expand the label space (pair
//!   mixing, rotation, cutout, color permutation) and the head-index
//!   bookkeeping behind them.
//! - [`model`]: the CNN feature extractor, the cosine-normalized classifier,
//!   mixed features, and the prototype store.
//! - [`trainer`]: the stage loop — initial training, incremental training
//!   with noisy prototype replay and feature distillation, evaluation.
//! - [`metrics`]: accuracy / forgetting / intransigence, confusion matrices,
//!   memory accounting.
//! - [`report`]: experiment artifact files (CSV/JSON) with atomic writes.
//! - [`verify`]: a fast self-check suite used by the CLI.

pub mod augment;
pub mod autodiff;
pub mod data;
mod error;
pub mod metrics;
pub mod model;
pub mod report;
mod seeds;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
