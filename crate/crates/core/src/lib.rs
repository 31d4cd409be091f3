//! Language-guided feature disentanglement for infrared object detection.
//!
//! The crate trains a small convolutional detector on single-channel images
//! while splitting its pyramid features into object and non-object channel
//! groups. Rule-generated captions supervise the object half through a
//! contrastive alignment loss; a cosine penalty pushes the two halves apart;
//! the detection head consumes only the object half, so the non-object half
//! can be discarded at inference.
//!
//! Modules map onto that pipeline: [`tensor`] (autodiff engine),
//! [`caption`] (annotation-to-text plus text encoding), [`model`] (backbone,
//! pyramid, decomposition, projector, head), [`losses`], [`data`] (synthetic
//! scenes and COCO-style ingestion), [`eval`] (decoding and AP metrics),
//! [`trainer`] (optimization loop, ablations, gradient checks) and
//! [`config`] (the run-configuration file).

pub mod caption;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod par;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
