//! Desk-scale set-prediction detector for human-object interaction with
//! hard-positive query mining.

pub mod error;
pub mod numerics;

pub use error::{HqmError, Result};
pub mod geometry;
pub mod scenes;
pub mod model;
pub mod matching;
pub mod losses;
pub mod hqm;
pub mod harness;
