//! Masked anchored spherical distance functions: a compact parametric
//! surface representation fitted directly to unoriented point clouds.
//!
//! A shape is a set of anchors, each carrying a position, a rotation vector,
//! spherical-harmonic radial coefficients, and a Fourier view mask that crops
//! the anchor's spherical patch. The crate provides the differentiable
//! sampling pipeline from parameters to oriented surface points, the
//! optimization loop that fits anchors to a target cloud, patch orientation,
//! reconstruction metrics, and file IO for clouds and fitted models.

pub mod cloud;
pub mod error;
pub mod kdtree;
pub mod model;
pub mod sampler;
pub mod sh;

pub use error::{Error, Result};
