//! Neural collapse, relative flatness and grokking on modular arithmetic.
//!
//! The crate trains small MLPs on `(a ∘ b) mod p` tasks and tracks the
//! geometry of the penultimate-layer features alongside the flatness of the
//! loss with respect to the final layer.

pub mod error;
pub mod geometry;
pub mod harness;
pub mod model;
pub mod numkit;
pub mod oracles;
pub mod parallel;
pub mod regularizers;
pub mod tasks;

pub use error::{Error, Result};
pub use numkit::{Matrix, Rng};
pub use parallel::Exec;
