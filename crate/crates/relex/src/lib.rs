//! Distantly-supervised relation extraction.
//!
//! The pipeline: sentences with dependency annotations are reduced to
//! sub-tree paths between the entity pair, encoded by a small transformer
//! into relation-aware sentence vectors, pooled over bags with selective
//! attention, and scored against the relation inventory. Evaluation ranks
//! bag-level predictions into a precision/recall curve.

pub mod corpus;
pub mod depparse;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod model;
pub mod nn;
pub mod sentrep;
pub mod structinput;
pub mod pipeline;
pub mod report;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
