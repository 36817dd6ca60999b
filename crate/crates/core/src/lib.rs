//! Desk-scale laboratory for non-contrastive Siamese representation learning.
//!
//! * [`models`]: configurable encoders and heads, SimSiam / BYOL / NNSiam losses.
//! * [`datapipe`]: datasets, paired-view augmentation and data-ordering schedules.
//! * [`trainer`]: fixed-budget pretraining with checkpoints and metrics logs.
//! * [`diagnostics`]: singular spectrum, cumulative explained variance and the
//!   AUC collapse metric.
//! * [`eval`]: k-NN, linear probe and the loss + AUC accuracy predictor.
//! * [`distill`]: feature-regression distillation with online normalization.

pub mod config;
pub mod datapipe;
pub mod diagnostics;
pub mod distill;
mod error;
pub mod eval;
pub mod models;
pub mod queue;
pub mod rng;
pub mod trainer;

pub use error::{CoreError, Result};
