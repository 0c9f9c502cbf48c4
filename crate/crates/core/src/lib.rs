//! Two-stream gated tag summarization.
//!
//! An image and its tag list go through two parallel networks — a
//! tag-only transformer stream and an image-fused stream where tag
//! queries cross-attend over grid features — whose per-tag scores are
//! blended by a learned gate. Training combines a BCE-Dice objective on
//! the fused output with per-stream auxiliary terms, tag add/drop
//! augmentation, and an optional unsupervised pre-training stage.
//!
//! Everything runs on a small deterministic tensor engine with
//! reverse-mode autodiff (`f32` for training, `f64` for gradient
//! checking).

pub mod data;
pub mod error;
pub mod loss;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
