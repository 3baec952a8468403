//! Speculative draft-and-verify inference for a flow-matching action policy.

pub mod actions;
pub mod bench;
pub mod draft;
pub mod envsim;
pub mod error;
pub mod flowpolicy;
pub mod latcost;
pub mod nn;
pub mod par;
pub mod rng;
pub mod runtime;
pub mod verifier;

pub use error::{Error, Result};
