//! Datasets, experiment runners and report files for the shadowcert
//! command line.

pub mod data;
pub mod error;
pub mod experiments;
pub mod ppm;
pub mod report;

pub use error::{HarnessError, Result};
