//! Desk-scale study of expertise-tailored explanation examples.
//!
//! The pipeline trains a small convolutional classifier on a procedurally
//! generated shapes dataset, factors its activation space through a bank of
//! unit-norm concept vectors, fits per-user expertise weights from simulated
//! annotations, ranks candidate explanation examples with several selection
//! strategies, and measures how well retrained simulated users predict the
//! classifier's decisions.

pub mod concepts;
pub mod error;
pub mod eval;
pub mod explain;
pub mod numerics;
pub mod selection;
pub mod synthdata;
pub mod target_model;
pub mod user_model;

pub use error::{Error, Result};
