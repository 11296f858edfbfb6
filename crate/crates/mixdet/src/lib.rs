//! Mixture-density object detection: boxes are modeled by a mixture of
//! per-coordinate Cauchy (or Gaussian) components with per-component class
//! distributions, trained by maximum likelihood on synthetic scenes.

pub mod cli;
pub mod config;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod inference;
pub mod mixture;
pub mod network;
pub mod real;
pub mod training;

pub use error::{Error, Result};
pub use real::Real;

/// The math core is generic over the scalar type; training and the CLI run
/// in double precision.
pub type BBoxF = geometry::BBox<f64>;
pub type TensorF = diffcore::Tensor<f64>;
pub type TapeF = diffcore::Tape<f64>;
pub type MixtureModelF = mixture::MixtureModel<f64>;
pub type DetectorF = network::Detector<f64>;
