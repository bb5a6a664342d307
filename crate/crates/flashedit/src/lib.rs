//! One-step text-guided image editing on a synthetic image world.
//!
//! The stack has three mechanisms: a one-step inversion-and-editing pipeline
//! (a one-step generator, an inversion network, and a visual adapter trained
//! with an anchor-and-refine schedule), a background shield that recomposes
//! self-attention key-value sets from a source-pass cache so background tokens
//! are recalled rather than recomputed, and a sparsified cross-attention that
//! prunes text tokens pre-softmax and scatters the result with exact zeros on
//! background rows.
//!
//! Everything runs on a small dense-tensor library with reverse-mode autodiff
//! ([`autodiff`]), at 32x32 pixels, so every mechanism is checkable against
//! brute-force oracles. See the `book/` guide for a narrative walkthrough.

pub mod autodiff;
pub mod bg_shield;
pub mod checkpoint;
pub mod error;
pub mod rng;
pub mod tensor;

pub mod eval;
pub mod guide;
pub mod hooks;
pub mod model;
pub mod prompt;
pub mod losses;
pub mod optim;
pub mod metrics;
pub mod pipeline;
pub mod ppm;
pub mod scene;
pub mod schedule;
pub mod ssca;
pub mod train;

pub use error::{Error, Result};
