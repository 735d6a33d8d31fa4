//! Conditional flow-based generation for sparse-view fan-beam CT.
//!
//! The numeric code is generic over [`scalar::Real`]; the aliases below fix
//! the precisions used by the pipeline (`f64` for the CT stack, `f32` for
//! networks).

pub mod denoiser;
pub mod error;
pub mod fbp;
pub mod image;
pub mod io;
pub mod metrics;
pub mod pfgm;
pub mod phantom;
pub mod pipeline;
pub mod projector;
pub mod sampler;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Image = image::ImageGrid<f64>;
pub type Image32 = image::ImageGrid<f32>;
pub type Sino = projector::Sinogram<f64>;
pub type Sino32 = projector::Sinogram<f32>;
pub type Dataset = pfgm::DiracDataset<f64>;
pub type Net = denoiser::TinyUNet<f32>;
pub type Net64 = denoiser::TinyUNet<f64>;
