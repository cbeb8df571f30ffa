//! Neural TSP construction policy with sparse-autoencoder interpretability.
//!
//! The crate is organised as a pipeline:
//!
//! * [`numerics`]: tensors, a reverse-mode tape, Adam, seeded RNG streams and
//!   the weight container format shared by every checkpoint.
//! * [`tsp`]: instance generators, tour evaluation and reference solvers
//!   (nearest neighbour, 2-opt, Held–Karp).
//! * [`policy`]: transformer encoder with a pointer decoder.
//! * [`training`]: REINFORCE with a warm-up initialised moving-average baseline.
//! * [`capture`]: per-node encoder residual harvesting into a fixed-stride
//!   binary corpus.
//! * [`sae`]: top-k sparse autoencoder, its training loop and grid search.
//! * [`analysis`]: feature activations, summaries, rankings and overlay exports.
//! * [`cli`]: the `tsp-interp` command-line entry point.

pub mod analysis;
pub mod capture;
pub mod cli;
pub mod error;
pub mod numerics;
pub mod policy;
pub mod sae;
pub mod training;
pub mod tsp;

pub use error::{Error, Result};
