//! Video anomaly detection by spatio-temporal relation learning.
//!
//! A dual-decoder auto-encoder predicts the next frame and the optical flow
//! towards it, a relation module scores how plausible each moving object is
//! at its location in the scene, and the scoring harness fuses both into a
//! per-frame anomaly score.

pub mod tensor;
pub mod video;
pub mod regions;
pub mod nn;
pub mod stae;
pub mod relation;
pub mod scoring;
pub mod config;
pub mod checkpoint;
pub mod pipeline;
