//! Bivariate multiscale spatial models for data observed on two misaligned
//! areal supports, with change-of-support prediction onto their common
//! partition.

pub mod basis;
pub mod error;
pub mod evaluate;
pub mod linalg;
pub mod model;
pub mod predict;
pub mod sampler;
pub mod simulate;
pub mod supports;

pub use error::{Error, Result};
