mod archive;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod distortions;
pub mod error;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod training;

pub use error::{Error, Result};
