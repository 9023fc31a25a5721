//! Part-whole hierarchy representation learning on synthetic structured images.
//!
//! The library is organized around a three-branch self-distillation pretext:
//! a *localizability* branch matching sharpened softmax distributions between
//! a momentum teacher and a multi-crop student, a *composability* branch
//! matching a whole's embedding against the aggregate of its parts, and a
//! *decomposability* branch matching predicted part embeddings against the
//! parts themselves. Training runs a coarse-to-fine curriculum over anchor
//! scales `side / 2^m`.
//!
//! Modules:
//! - [`synthgen`] — deterministic synthetic corpus with landmark ground truth
//! - [`data`] — anchor sampling, multi-scale crops, exact-cover partitions,
//!   stochastic augmentation
//! - [`model`] — student/teacher encoders, projection heads, EMA machinery
//! - [`losses`] — sharpened softmax, centering, and the three branch losses
//!   with analytic student-side gradients
//! - [`trainer`] — curriculum schedule, AdamW, checkpointing, collapse monitor
//! - [`zeroshot`] — frozen-embedding analyses (clustering, composition,
//!   interpolation, sliding-window landmark matching)
//! - [`transfer`] — fine-tuning harness (classification head, encoder-decoder
//!   segmentation) with few-shot subsetting

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod image;
pub mod losses;
pub mod model;
pub mod nn;
pub mod plot;
pub mod rng;
pub mod stats;
pub mod synthgen;
pub mod trainer;
pub mod transfer;
pub mod zeroshot;

pub use error::{Error, Result};
pub use image::{Image, Rect};
pub use rng::Pcg32;

/// Schema version stamped into every JSON artifact this crate emits.
pub const SCHEMA_VERSION: u32 = 1;
