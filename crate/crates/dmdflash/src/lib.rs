//! Two-phase distribution-matching distillation at desk scale.
//!
//! A few-step generator is distilled from an analytic Gaussian-mixture target
//! with timestep-decoupled losses (distribution matching at high noise,
//! data-space adversarial supervision at the final step), then refined with
//! preference optimization that runs jointly with the ongoing distillation.
//! Everything is 64-bit, deterministic per seed, and checked against
//! closed-form oracles.

pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod numerics;
pub mod reward;
pub mod suites;
pub mod teacher;
pub mod trainer;

pub use error::{Error, Result};
