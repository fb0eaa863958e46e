//! End-to-end person search on a deterministic, double-precision substrate.
//!
//! The pipeline detects people in scene images and matches a box-annotated
//! query person against a gallery, in one network and without NMS:
//!
//! * a small two-resolution convolutional backbone ([`backbone`]),
//! * a fixed set of learnable proposals refined by a cascade of dynamic
//!   person search heads ([`heads`]), each pairing a detection head with a
//!   flexible re-id head built on dynamic RoI sampling ([`roi`]),
//! * one-to-one bipartite matching for detection plus diverse re-id sample
//!   matching for identity supervision ([`matching`]),
//! * detection losses and a memory-backed re-id objective ([`losses`]),
//! * a training loop with checkpointing ([`train`]) and the person-search
//!   evaluation protocol ([`eval`]).
//!
//! All learnable operations run on a tape-based reverse-mode autodiff graph
//! over `f64` arrays ([`autodiff`]); analytic gradients are validated against
//! central finite differences by the [`verify`] suites.

pub mod autodiff;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod heads;
pub mod losses;
pub mod matching;
pub mod model;
pub mod params;
pub mod rng;
pub mod roi;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
