//! Multi-task dense regression under disjoint partial supervision, with an
//! AIPW-corrected supervised loss for labels that are missing not at random
//! and a learnable allometric consistency constraint between tasks.

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
