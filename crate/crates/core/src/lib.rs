//! Multimodal language-model toolkit: a frozen decoder-only core extended
//! with modality-specific low-rank adapters, a conformer speech encoder,
//! dynamic multi-crop vision, staged training schedules, and the metric
//! stack used to evaluate them.

pub mod audio;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod lora;
pub mod model;
pub mod numerics;
pub mod params;
pub mod projector;
pub mod rng;
pub mod text;
pub mod training;
pub mod vision;

pub use error::{Error, Result};
