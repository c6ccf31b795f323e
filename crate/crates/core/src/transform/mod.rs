//! Landmark-initialised affine alignment and the cubic B-spline free-form
//! deformation model.

mod affine;
mod bspline;
mod landmarks;

pub use affine::AffineTransform;
pub use bspline::{
    beta3, beta3_derivative, cubic_weights, cubic_weights_d1, cubic_weights_d2, compose_residual,
    ControlLattice, Deformation, Deriv, GridBasis, LatticeGeometry,
};
pub use landmarks::{fit_affine_landmarks, fit_landmarks_with_mode, AffineFit, FitMode, LandmarkSet};
