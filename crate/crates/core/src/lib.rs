//! Anchor-free Siamese single-object tracker with hard-negative emphasis
//! training, sized to train on a CPU.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod assignment;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod hne;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod tracker;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Box32 = geometry::BBox<f32>;
pub type Box64 = geometry::BBox<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model32 = model::SiameseModel<f32>;
pub type Model64 = model::SiameseModel<f64>;
pub type Trainer32 = train::Trainer<f32>;
