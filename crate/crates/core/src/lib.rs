//! Dual-backbone person re-identification with attention-based fusion,
//! built on a small reverse-mode autodiff engine.

pub mod ablation;
pub mod backbones;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dmf;
pub mod error;
pub mod evaluator;
pub mod model;
pub mod nn;
pub mod objective;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
