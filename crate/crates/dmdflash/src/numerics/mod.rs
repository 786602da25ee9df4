//! Computational substrate: dense tensors, a reverse-mode gradient tape,
//! the Adam optimizer, and seeded stream-splittable RNG.

mod adam;
mod rng;
mod tape;
mod tensor;

pub use adam::{AdamHyper, AdamState};
pub use rng::{Rng, RngState};
pub use tape::{Gradients, Tape};
pub use tensor::Tensor;
