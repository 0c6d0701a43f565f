//! Orientation-conditioned diffusion priors and decoupled radiance-field
//! lifting on small synthetic scenes.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common concrete instantiations.

pub mod conddiffusion;
pub mod error;
pub mod evalmetrics;
pub mod image;
pub mod lifter;
pub mod quatpose;
pub mod radiancefield;
pub mod scalar;
pub mod synthscenes;
pub mod tensorgrad;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};

pub type Quaternion64 = quatpose::Quaternion<f64>;
pub type Quaternion32 = quatpose::Quaternion<f32>;
pub type CameraPose64 = quatpose::CameraPose<f64>;
pub type CameraPose32 = quatpose::CameraPose<f32>;
pub type Tensor64 = tensorgrad::Tensor<f64>;
pub type Tensor32 = tensorgrad::Tensor<f32>;
pub type Tape64 = tensorgrad::Tape<f64>;
pub type Tape32 = tensorgrad::Tape<f32>;
pub type Denoiser64 = conddiffusion::Denoiser<f64>;
pub type Denoiser32 = conddiffusion::Denoiser<f32>;
pub type RadianceGrid64 = radiancefield::RadianceGrid<f64>;
pub type RadianceGrid32 = radiancefield::RadianceGrid<f32>;
