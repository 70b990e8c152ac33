//! Desk-scale simulator for federated learning under noisy labels.
//!
//! Clients learn label-decoupled spherical representations with contrastive
//! pretraining, model the embedding geometry with a von Mises-Fisher mixture
//! plus uniform background, score how well each sample's observed label agrees
//! with that geometry, split clean from noisy samples with a 1-D Gaussian
//! mixture, and train robustly with a symmetric cross-entropy loss and a
//! per-client noise-absorption matrix. A run is fully described by a JSON
//! manifest and replays byte-identically from its master seed.

pub mod data_plane;
pub mod directional_stats;
pub mod error;
pub mod federation;
pub mod geometry_evidence;
pub mod learner;
pub mod manifest;
pub mod metrics_report;
pub mod noise_model;
pub mod seeding;

pub use error::{Error, Result};
