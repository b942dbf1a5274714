//! Hermes: semi-supervised dual-branch tumor segmentation and classification.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`config`] — run configuration and validation.
//! - [`schedule`] — closed-form threshold and learning-rate schedules.
//! - [`tensor`] — a small reverse-mode autodiff engine over `ndarray` (f64).
//! - [`data`] — dataset ingestion, labeled/unlabeled splits, weak/strong
//!   augmentation, and a deterministic synthetic lesion generator.
//! - [`model`] — the dual-branch network with inter-task attention and
//!   gradient-saliency fusion.
//! - [`pseudo`] — dual-threshold pseudo-label selection, anchor sampling,
//!   and the contrastive memory bank.
//! - [`losses`] — every training objective and the total loss.
//! - [`engine`] — the training loop, evaluation, and experiment harnesses.
//! - [`cli`] — command-line entry points.

pub mod cli;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod losses;
pub mod model;
pub mod pseudo;
pub mod schedule;
pub mod tensor;

pub use config::TrainConfig;
pub use error::{HermesError, Result};
pub use schedule::ScheduleState;
