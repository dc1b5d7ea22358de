//! Temporal action localization with learned per-frame action sensitivity.
//!
//! The pipeline runs on pre-extracted per-frame feature sequences:
//!
//! * [`model`] encodes a sequence with parallel temporal/channel attention,
//!   builds a feature pyramid and predicts per-frame class logits and
//!   boundary offsets.
//! * [`assignment`] maps ground-truth instances onto pyramid levels and
//!   frames.
//! * [`sensitivity`] weighs in-action frames with learnable class-level
//!   Gaussians plus an instance-level evaluator.
//! * [`losses`] holds the weighted focal and DIoU losses, the evaluator
//!   regression loss and the sensitivity-sampled contrastive loss.
//! * [`trainer`], [`inference`] and [`eval`] train, decode and score.
//! * [`data`] generates synthetic datasets and reads/writes file formats.

pub mod assignment;
pub mod data;
pub mod error;
pub mod eval;
pub mod inference;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod segment;
pub mod sensitivity;
pub mod trainer;

pub use error::{Error, Result};
