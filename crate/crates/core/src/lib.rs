//! Temporal inversion-aware learning for paired longitudinal images.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: stable elementary functions, a flat parameter store and a
//!   central-difference gradient checker.
//! - [`encoders`]: small trainable paired-image and text encoders producing
//!   unit-norm embeddings in a shared space.
//! - [`objectives`]: pairwise sigmoid contrastive losses (base and
//!   change-aware), bidirectional cross-entropy and the temporal consistency
//!   loss, each with analytic gradients.
//! - [`inference`]: label/probability inversion maps, inversion-aware score
//!   fusion and zero-shot classification.
//! - [`evaluation`]: the four-protocol classification evaluation, Recall@k,
//!   temporal-term F1 and ROC AUC.
//! - [`synthdata`]: a deterministic synthetic longitudinal benchmark.
//! - [`training`]: AdamW, schedules, staged pretraining and fine-tuning,
//!   linear probing and checkpoints.
//! - [`config`]: run configuration with paper-faithful defaults.

pub mod config;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod numerics;
pub mod objectives;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
