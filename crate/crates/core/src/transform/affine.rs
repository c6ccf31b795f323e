use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Mat3, Vec3};

/// `x ↦ matrix · x + translation`, in millimetres.
///
/// Serialises as the 12 entries of the 3×4 matrix `[matrix | translation]`
/// in row-major order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 12]", try_from = "[f64; 12]")]
pub struct AffineTransform {
    matrix: Mat3,
    translation: Vec3,
}

const SINGULAR_DET: f64 = 1e-12;

impl AffineTransform {
    pub fn new(matrix: Mat3, translation: Vec3) -> Result<Self> {
        let det = matrix.determinant();
        if !det.is_finite() || det.abs() <= SINGULAR_DET {
            return Err(Error::InvalidInput(format!(
                "affine matrix is singular (det = {det:e})"
            )));
        }
        if translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidInput("affine translation is not finite".into()));
        }
        Ok(AffineTransform {
            matrix,
            translation,
        })
    }

    pub fn identity() -> Self {
        AffineTransform {
            matrix: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        AffineTransform {
            matrix: Mat3::identity(),
            translation: t,
        }
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.matrix
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.matrix * p + self.translation
    }

    pub fn inverse(&self) -> AffineTransform {
        let inv = self
            .matrix
            .try_inverse()
            .expect("constructor rejects singular matrices");
        AffineTransform {
            matrix: inv,
            translation: -(inv * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &AffineTransform) -> AffineTransform {
        AffineTransform {
            matrix: self.matrix * other.matrix,
            translation: self.matrix * other.translation + self.translation,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.matrix == Mat3::identity() && self.translation == Vec3::zeros()
    }
}

impl From<AffineTransform> for [f64; 12] {
    fn from(a: AffineTransform) -> Self {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = a.matrix[(r, c)];
            }
            out[r * 4 + 3] = a.translation[r];
        }
        out
    }
}

impl TryFrom<[f64; 12]> for AffineTransform {
    type Error = Error;

    fn try_from(v: [f64; 12]) -> Result<Self> {
        let matrix = Mat3::from_fn(|r, c| v[r * 4 + c]);
        let translation = Vec3::new(v[3], v[7], v[11]);
        AffineTransform::new(matrix, translation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_translation() {
        let p = Vec3::new(1.0, -2.0, 3.5);
        assert_eq!(AffineTransform::identity().apply(&p), p);
        let t = Vec3::new(0.5, 0.25, -1.0);
        assert_eq!(AffineTransform::from_translation(t).apply(&p), p + t);
    }

    #[test]
    fn apply_matches_expansion() {
        let m = Mat3::new(1.1, 0.2, -0.3, 0.05, 0.9, 0.4, -0.2, 0.1, 1.3);
        let t = Vec3::new(3.0, -1.0, 2.0);
        let a = AffineTransform::new(m, t).unwrap();
        let p = Vec3::new(0.7, -4.0, 2.2);
        let q = a.apply(&p);
        for r in 0..3 {
            let expect = m[(r, 0)] * p[0] + m[(r, 1)] * p[1] + m[(r, 2)] * p[2] + t[r];
            assert!((q[r] - expect).abs() < 1e-12);
        }
        let back = a.inverse().apply(&q);
        assert!((back - p).norm() < 1e-12);
    }

    #[test]
    fn singular_rejected() {
        let m = Mat3::new(1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 0.0, 1.0);
        assert!(AffineTransform::new(m, Vec3::zeros()).is_err());
    }

    #[test]
    fn json_is_row_major() {
        let a = AffineTransform::new(Mat3::identity() * 2.0, Vec3::new(1.0, 2.0, 3.0)).unwrap();
        let s = serde_json::to_string(&a).unwrap();
        assert_eq!(s, "[2.0,0.0,0.0,1.0,0.0,2.0,0.0,2.0,0.0,0.0,2.0,3.0]");
        let back: AffineTransform = serde_json::from_str(&s).unwrap();
        assert_eq!(back, a);
        assert!(serde_json::from_str::<AffineTransform>("[0,0,0,0,0,0,0,0,0,0,0,0]").is_err());
    }
}
