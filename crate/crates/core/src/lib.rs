//! Knowledge-distillation experiments at desk scale.

pub mod augment;
pub mod autodistiller;
pub mod cli;
pub mod error;
pub mod io;
pub mod losses;
pub mod mapping;
pub mod mi;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod search;
pub mod trees;

pub use error::{Error, Result};
