//! Weight-space merging laboratory for Decision Transformers.

pub mod analysis;
pub mod arch;
pub mod checkpoint;
pub mod dataset;
pub mod dt;
pub mod env;
mod error;
pub mod grid;
pub mod io;
pub mod lm;
pub mod merge;
pub mod mff;
pub mod report;
pub mod rng;
pub mod selector;
pub mod transformer;

pub use arch::{Activation, ArchConfig};
pub use error::{Error, Result};
pub use selector::{LayerSelector, Sublayer};
