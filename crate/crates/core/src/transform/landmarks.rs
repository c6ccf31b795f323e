use nalgebra::{DMatrix, Matrix3};
use serde::{Deserialize, Serialize};

use super::AffineTransform;
use crate::error::{Error, Result};
use crate::{Mat3, Vec3};

/// Relative singular-value threshold below which a point set is treated as
/// coplanar (or collinear).
const PLANARITY_TOL: f64 = 1e-9;

/// Ordered (source, target) point pairs in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    pairs: Vec<(Vec3, Vec3)>,
}

impl LandmarkSet {
    pub fn new(pairs: Vec<(Vec3, Vec3)>) -> Result<Self> {
        if pairs.len() < 3 {
            return Err(Error::TooFewLandmarks { found: pairs.len() });
        }
        for (i, (s, d)) in pairs.iter().enumerate() {
            if s.iter().chain(d.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("landmark {i} is not finite")));
            }
            if pairs[..i].iter().any(|(p, _)| p == s) {
                return Err(Error::DuplicateLandmark { index: i });
            }
        }
        Ok(LandmarkSet { pairs })
    }

    pub fn pairs(&self) -> &[(Vec3, Vec3)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Root-mean-square residual of `a` on these pairs.
    pub fn rms_error(&self, a: &AffineTransform) -> f64 {
        let sum: f64 = self.pairs.iter().map(|(s, d)| (a.apply(s) - d).norm_squared()).sum();
        (sum / self.pairs.len() as f64).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMode {
    /// Full 12-parameter least-squares affine.
    Affine,
    /// Rotation, isotropic scale and translation.
    Similarity,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineFit {
    pub transform: AffineTransform,
    pub mode: FitMode,
}

fn centred_sources(lm: &LandmarkSet) -> (Vec3, DMatrix<f64>) {
    let n = lm.len();
    let mean = lm.pairs.iter().map(|(s, _)| s).sum::<Vec3>() / n as f64;
    let m = DMatrix::from_fn(n, 3, |r, c| lm.pairs[r].0[c] - mean[c]);
    (mean, m)
}

fn singular_values(lm: &LandmarkSet) -> Vec<f64> {
    let (_, m) = centred_sources(lm);
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv.resize(3, 0.0);
    sv
}

/// Least-squares affine from landmarks. Falls back to a closed-form
/// similarity transform when there are only three pairs or the source points
/// are coplanar.
pub fn fit_affine_landmarks(lm: &LandmarkSet) -> Result<AffineFit> {
    let sv = singular_values(lm);
    let coplanar = sv[0] == 0.0 || sv[2] <= PLANARITY_TOL * sv[0];
    if lm.len() == 3 || coplanar {
        fit_landmarks_with_mode(lm, FitMode::Similarity)
    } else {
        fit_landmarks_with_mode(lm, FitMode::Affine)
    }
}

pub fn fit_landmarks_with_mode(lm: &LandmarkSet, mode: FitMode) -> Result<AffineFit> {
    let transform = match mode {
        FitMode::Affine => fit_full_affine(lm)?,
        FitMode::Similarity => fit_similarity(lm)?,
    };
    Ok(AffineFit { transform, mode })
}

fn fit_full_affine(lm: &LandmarkSet) -> Result<AffineTransform> {
    let sv = singular_values(lm);
    if lm.len() < 4 || sv[0] == 0.0 || sv[2] <= PLANARITY_TOL * sv[0] {
        return Err(Error::RankDeficient(
            "a full affine needs at least 4 non-coplanar source points".into(),
        ));
    }
    let n = lm.len();
    let design = DMatrix::from_fn(n, 4, |r, c| if c < 3 { lm.pairs[r].0[c] } else { 1.0 });
    let targets = DMatrix::from_fn(n, 3, |r, c| lm.pairs[r].1[c]);
    let svd = design.svd(true, true);
    let solution = svd
        .solve(&targets, 1e-12)
        .map_err(|e| Error::RankDeficient(e.to_string()))?;
    // solution is 4×3: rows are (x, y, z, 1) coefficients of each target axis.
    let matrix = Mat3::from_fn(|r, c| solution[(c, r)]);
    let translation = Vec3::new(solution[(3, 0)], solution[(3, 1)], solution[(3, 2)]);
    AffineTransform::new(matrix, translation)
}

/// Umeyama's closed-form least-squares similarity.
fn fit_similarity(lm: &LandmarkSet) -> Result<AffineTransform> {
    let sv = singular_values(lm);
    if sv[0] == 0.0 || sv[1] <= PLANARITY_TOL * sv[0] {
        return Err(Error::RankDeficient("source landmarks are collinear".into()));
    }
    let n = lm.len() as f64;
    let mu_s = lm.pairs.iter().map(|(s, _)| s).sum::<Vec3>() / n;
    let mu_d = lm.pairs.iter().map(|(_, d)| d).sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in &lm.pairs {
        let cs = s - mu_s;
        cov += (d - mu_d) * cs.transpose();
        var_s += cs.norm_squared();
    }
    cov /= n;
    var_s /= n;
    let svd = cov.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let mut sign = Mat3::identity();
    if (u * v_t).determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rotation = u * sign * v_t;
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * sign[(i, i)]).sum();
    let scale = trace / var_s;
    let matrix = rotation * scale;
    let translation = mu_d - matrix * mu_s;
    AffineTransform::new(matrix, translation)
}
