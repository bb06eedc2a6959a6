//! Continual test-time adaptation engine for a toy two-stage detector.
//!
//! A source-trained detector adapts online to a stream of corrupted synthetic
//! scenes, one frame at a time, with no labels: a mean-teacher pair drives
//! self-training, object-level contrastive learning sharpens features,
//! adaptive monitoring skips unstable frames and retunes per-class
//! pseudo-label thresholds, and Fisher-guided randomized restoration resets
//! inactive parameters back to the source weights to limit forgetting.

pub mod autodiff;
pub mod config;
pub mod contrastive;
pub mod detector;
pub mod engine;
pub mod eval;
pub mod mean_teacher;
pub mod monitor;
pub mod report;
pub mod restore;
pub mod rng;
pub mod streams;
