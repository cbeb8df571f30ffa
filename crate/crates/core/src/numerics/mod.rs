//! Dense tensors, reverse-mode differentiation, Adam and seeded randomness.
//!
//! Storage and arithmetic are `f64` throughout so that finite-difference
//! checks stay meaningful at small step sizes; binary corpora are still
//! written as `f32` by [`crate::capture`].

pub mod adam;
pub mod container;
pub mod gradcheck;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use container::Container;
pub use rng::{Rng, SeedTree};
pub use tape::{Gradients, LinearTerm, Tape, Var};
pub use tensor::{matmul, softmax, Tensor};
