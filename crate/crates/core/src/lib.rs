//! Self-supervised pretraining for presentation-attack detection.
//!
//! The pipeline pretrains a feature extractor on unlabeled images through two
//! pretext tasks — De-Folding (reconstruct an image from its folded version)
//! and De-Mixing (keep embeddings consistent under convex pixel mixing) — and
//! then fine-tunes a binary spoofness detector on labels. The crate provides:
//!
//! - [`transforms`]: folding and mixing operators plus their spec samplers
//! - [`models`]: the extractor / generator / critic / detector networks
//! - [`losses`]: reconstruction, adversarial, topological, cross-entropy
//! - [`training`]: pretraining and fine-tuning loops with checkpoint/resume
//! - [`metrics`]: ROC, AUC, EER, TDR@FDR, ACE over spoofness scores
//! - [`datagen`]: synthetic fingerprint/face corpora with protocol splits
//!
//! Everything is deterministic given explicit seeds: the same seed yields
//! bit-identical parameters, histories, and artifacts.

pub mod datagen;
pub mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod optim;
pub mod seeds;
pub mod training;
pub mod transforms;

pub use error::{CoreError, Result};
pub use image::{ImageSample, Label, Modality};
