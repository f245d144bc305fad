//! A numerical laboratory for codebook dynamics in vector quantization.
//!
//! The crate simulates exactly-specified non-stationary 2D data streams
//! (translation, scaling, split), runs a family of online codebook-update
//! rules against them, and measures when codes die and when they keep
//! tracking the data. Batch Lloyd's k-means serves as the convergence
//! oracle, and a small transformer projector with hand-rolled reverse-mode
//! gradients demonstrates whole-codebook adaptation from a winner-only loss.
//!
//! Modules:
//! - [`core`]: codebook, batches, nearest-code assignment, distortion and
//!   utilization metrics.
//! - [`kmeans`]: batch Lloyd iteration, initialization, fixed-point tests.
//! - [`streams`]: drift processes with analytic state Jacobians and their
//!   tangent-kernel products.
//! - [`updaters`]: the codebook-update rules behind one strategy surface.
//! - [`transvq`]: learnable codebook projector (linear attention + MLP)
//!   with exact reverse-mode gradients and lossless parameter serialization.
//! - [`harness`]: reproducible experiment runs, batch-size sweeps, rule
//!   comparisons, CSV traces.
//! - [`svg`]: dependency-free scatter snapshots of a run.

#![allow(clippy::needless_range_loop)]

pub mod core;
pub mod error;
pub mod harness;
pub mod kmeans;
pub mod streams;
pub mod svg;
pub mod transvq;
pub mod updaters;

pub use error::{Error, Result};
