//! Open-vocabulary semantic segmentation with teacher-student domain
//! adaptation, exercised end to end on a deterministic synthetic
//! shapes benchmark.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`vocab`] builds prompt sets, augments them, and produces robust
//!   text embeddings and per-category semantic anchors.
//! - [`encoders`] defines the vision-language encoder contract, a
//!   deterministic toy encoder pair, and the fine-tuning policy
//!   (layer-wise learning rates, selective freezing).
//! - [`costvolume`] computes cosine similarities between dense visual
//!   features and text embeddings.
//! - [`decoder`] refines the cost volume into full-resolution
//!   per-category score maps.
//! - [`uda`] implements the teacher-student adaptation loop: source
//!   supervision, cross-domain class mix-up, quality-weighted
//!   pseudo-label losses, decoder-only EMA teacher and the blending
//!   schedule.
//! - [`data`] generates and loads the two-domain synthetic dataset.
//! - [`eval`] accumulates confusion matrices and reports per-class
//!   IoU / mIoU.
//! - [`cli`] wires everything into the `frovss` command-line tool.
//!
//! Everything is deterministic given a seed; see the `examples/`
//! directory for one runnable walkthrough per capability.

pub mod costvolume;
pub mod data;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod model;
pub mod presets;
pub mod rng;
pub mod opt;
pub mod tape;
pub mod train;
pub mod uda;
pub mod vocab;

pub use error::{Error, Result};
