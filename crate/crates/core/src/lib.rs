//! Multi-scale non-rigid registration of a high-resolution specimen volume
//! (micro-CT) to a lower-resolution pre-operative volume (clinical CT).
//!
//! The pipeline: segment lung tissue ([`mask`]), fit an affine from a few
//! landmark pairs ([`transform`]), then optimise forward and backward cubic
//! B-spline lattices over a coarse-to-fine pyramid ([`volume`],
//! [`optimizer`]). The objective is masked normalised mutual information
//! ([`similarity`]) minus bending-energy, volume-preservation and
//! inverse-consistency penalties ([`penalty`]). [`eval`] measures surface
//! distances before and after and tests the improvement.

pub mod cli;
pub mod error;
pub mod eval;
pub mod io;
pub mod mask;
pub mod optimizer;
pub mod penalty;
pub mod phantom;
pub mod similarity;
pub mod transform;
pub mod volume;

pub use error::{Error, Result};

/// Physical point or displacement in millimetres.
pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
