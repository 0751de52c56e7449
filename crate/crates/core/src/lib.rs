//! Temporal localization of rare actions in long videos from video-level
//! labels plus first-occurrence clip labels.
//!
//! The pipeline is: [`synthdata`] writes feature corpora, [`labeling`]
//! derives frame supervision, [`trainer`] fits a [`model`] with the
//! [`losses`], [`inference`] turns frame scores into segments and [`eval`]
//! scores them with mAP over temporal IoU thresholds.

pub mod config;
pub mod error;
pub mod eval;
pub mod inference;
pub mod exec;
pub mod labeling;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
