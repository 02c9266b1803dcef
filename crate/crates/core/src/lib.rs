//! Next-location recommendation with temporal prompts and geography-aware
//! quadkey encoding.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod geocode;
pub mod model;
pub mod numcore;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
