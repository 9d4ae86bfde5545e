#[cfg(doctest)]
mod book;
mod binio;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod heatmap;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ndcore;
pub mod nn;
pub mod posedisc;
pub mod rng;
pub mod skeleton;
pub mod trainer;

pub use error::{Error, FormatError, Result};
