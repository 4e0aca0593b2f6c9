//! Binary gaze time series: run-length encoding, design matrices and the
//! regression models used to compare them (logistic GLM, crossed random
//! intercept GLMM, GEE with AR(1) or banded Toeplitz working correlation,
//! and stratified Cox models on run durations), plus a simulator.

pub mod cox;
pub mod design;
pub mod error;
pub mod gee;
pub mod glm;
pub mod glmm;
pub mod ingest;
pub mod linalg;
pub mod report;
pub mod rle;
pub mod sim;

pub use error::{Error, Result};
