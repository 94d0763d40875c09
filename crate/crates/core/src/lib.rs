//! Long-term multivariate time-series forecasting with spectral multi-period
//! patching, dynamic deformable convolution over 3D patch tensors, and
//! amplitude-weighted multi-scale aggregation.
//!
//! The crate carries its own small tensor type and reverse-mode autodiff
//! tape so every gradient can be checked against finite differences.

pub mod aggregate;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod deform;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod patching;
pub mod pipeline;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use model::{ModelConfig, ModelState};
pub use spectral::SpectralProfile;
pub use tensor::Tensor;
