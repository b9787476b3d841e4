//! Pairwise class balance for long-tailed classification.
//!
//! The crate is organised bottom-up:
//!
//! - [`datagen`]: synthetic long-tailed datasets and tabular ingestion.
//! - [`confmat`]: hard, soft and EMA confusion matrices, soft targets, PwB.
//! - [`calib`]: post-hoc calibration from a confusion matrix or mean scores.
//! - [`loss`]: the classification losses with closed-form logit gradients.
//! - [`head`]: the recurrent classifier head with exact backpropagation.
//! - [`trainer`]: deterministic mini-batch SGD with online confusion statistics.
//! - [`report`]: evaluation, calibration studies, per-step analysis, heatmaps.
//! - [`gradcheck`]: finite-difference checks of the analytic gradients.
//!
//! Classes are 0-based throughout the API. When a background class is
//! enabled it occupies index `C`, after the `C` foreground classes.

pub mod calib;
pub mod confmat;
pub mod datagen;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod loss;
pub mod math;
pub mod report;
pub mod trainer;

pub use error::{Error, Result};
