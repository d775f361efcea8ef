//! Simulator for a speckle-based soft optical tactile sensor, plus a small
//! CPU-only CNN decoder that reads contact state back out of the speckle.
//!
//! The crate covers the full pipeline: scene description (elastomer slab,
//! embedded scatterers, coherent source, bare sensor grid), quasi-static
//! contact mechanics, coherent speckle rendering, dataset synthesis, and
//! decoder training/evaluation. Everything is seeded: the same scene,
//! stimulus, and seeds reproduce outputs byte for byte, independent of
//! thread count.

// Validation deliberately writes `!(x > 0.0)` so NaN fails the check too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Progress callbacks and finite-difference closures are one-off signatures;
// aliasing them would name things used exactly once.
#![allow(clippy::type_complexity)]

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod geom;
pub mod mechanics;
pub mod model;
pub mod ops;
pub mod optics;
pub mod pgm;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod training;
mod trig;

pub use error::{Error, Result};
