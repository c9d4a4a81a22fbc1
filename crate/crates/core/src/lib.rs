//! Certificate spoofing against randomized smoothing and interval bound
//! propagation, on a small self-contained network engine.

pub mod attack;
pub mod binio;
pub mod error;
pub mod ibp;
pub mod nn;
pub mod rng;
pub mod smoothing;
pub mod tensor;

pub use error::{Error, Result, Section};
pub use nn::{Architecture, Network};
pub use tensor::Tensor;
