//! Training and distillation of low-resolution anchor-free detectors.
//!
//! The pipeline trains a multi-resolution fusion teacher: shared weights run a
//! high-resolution and a pyramid-shifted low-resolution pass, the per-level
//! feature pairs are fused by a gated module, and a low-resolution student is
//! then trained against the fused pyramid with an L1 feature loss. Everything
//! runs on a deterministic synthetic shape-detection benchmark with a
//! COCO-protocol AP evaluator.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod head;
pub mod model;
pub mod nn;
pub mod pyramid;
pub mod train;
pub mod verify;
pub mod tensor;

pub use error::{Error, Result};
