//! Two-phase norm-constrained training: free training followed by per-layer
//! projected-gradient training at captured weight norms, as drop-in wrappers
//! over SGD-momentum, Adam and LAMB, plus the margin and escape diagnostics
//! used to study them at desk scale.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod losses;
pub mod network;
pub mod optim;
pub mod rng;
pub mod schedule;

pub use error::{LawnError, Result};
