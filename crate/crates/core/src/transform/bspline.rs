//! Uniform cubic B-spline displacement lattices.
//!
//! A lattice with control points at `origin + (i, j, k) ⊙ spacing` represents
//! the displacement
//!
//! ```text
//! D(x) = Σ_ijk β³(u - i) β³(v - j) β³(w - k) φ_ijk,   (u, v, w) = (x - origin) / spacing
//! ```
//!
//! and the full transform is `x ↦ x + D(x)` (after an optional affine map).
//! A point is covered when every lattice coordinate lies in `[1, n - 2]`, so
//! its 4×4×4 support is inside the lattice.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AffineTransform;
use crate::error::{Error, Result};
use crate::volume::{Aabb, Grid};
use crate::{Mat3, Vec3};

const COVER_TOLERANCE: f64 = 1e-9;

/// Cubic B-spline kernel, support `[-2, 2]`.
pub fn beta3(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        2.0 / 3.0 - a * a + 0.5 * a * a * a
    } else if a < 2.0 {
        let b = 2.0 - a;
        b * b * b / 6.0
    } else {
        0.0
    }
}

pub fn beta3_derivative(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        -2.0 * x + 1.5 * x * a
    } else if a < 2.0 {
        let b = 2.0 - a;
        -x.signum() * 0.5 * b * b
    } else {
        0.0
    }
}

/// Weights of the four control points `base-1 ..= base+2` at fractional
/// offset `t ∈ [0, 1]` from `base`.
#[inline]
pub fn cubic_weights(t: f64) -> [f64; 4] {
    let s = 1.0 - t;
    let t2 = t * t;
    let t3 = t2 * t;
    [
        s * s * s / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

#[inline]
pub fn cubic_weights_d1(t: f64) -> [f64; 4] {
    let s = 1.0 - t;
    [
        -0.5 * s * s,
        1.5 * t * t - 2.0 * t,
        -1.5 * t * t + t + 0.5,
        0.5 * t * t,
    ]
}

#[inline]
pub fn cubic_weights_d2(t: f64) -> [f64; 4] {
    [1.0 - t, 3.0 * t - 2.0, 1.0 - 3.0 * t, t]
}

/// First supporting control point and fractional offset along one axis.
#[inline]
fn axis_support(u: f64, n: usize) -> Option<(usize, f64)> {
    let hi = (n - 2) as f64;
    if !(u >= 1.0 - COVER_TOLERANCE && u <= hi + COVER_TOLERANCE) {
        return None;
    }
    let u = u.clamp(1.0, hi);
    let base = (u.floor() as usize).min(n - 3);
    Some((base - 1, u - base as f64))
}

/// Geometry of a lattice, as stored in the JSON sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeGeometry {
    pub grid_dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlLattice {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    coefficients: Vec<Vec3>,
}

struct PointSupport {
    first: [usize; 3],
    w: [[f64; 4]; 3],
    d1: [[f64; 4]; 3],
}

impl ControlLattice {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        coefficients: Vec<Vec3>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d < 4) {
            return Err(Error::InvalidInput(format!(
                "lattice needs at least 4 control points per axis, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidInput(format!("invalid lattice spacing {spacing:?}")));
        }
        let n: usize = dims.iter().product();
        if coefficients.len() != n {
            return Err(Error::InvalidInput(format!(
                "lattice has {} coefficients, expected {n}",
                coefficients.len()
            )));
        }
        if coefficients.iter().any(|c| c.iter().any(|x| !x.is_finite())) {
            return Err(Error::InvalidInput("lattice coefficients must be finite".into()));
        }
        Ok(ControlLattice {
            dims,
            spacing,
            origin,
            coefficients,
        })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let n = dims.iter().product();
        ControlLattice::new(dims, spacing, origin, vec![Vec3::zeros(); n])
    }

    pub fn from_geometry(geometry: &LatticeGeometry, coefficients: Vec<Vec3>) -> Result<Self> {
        ControlLattice::new(geometry.grid_dims, geometry.spacing, geometry.origin, coefficients)
    }

    /// Zero lattice with the given spacing whose covered region contains
    /// `extent`, with one control point of margin on every side.
    pub fn covering(extent: &Aabb, spacing: [f64; 3]) -> Result<Self> {
        let mut dims = [0usize; 3];
        let mut origin = [0.0; 3];
        for a in 0..3 {
            let span = (extent.max[a] - extent.min[a]).max(0.0);
            dims[a] = ((span / spacing[a]) - 1e-9).ceil().max(0.0) as usize + 3;
            dims[a] = dims[a].max(4);
            origin[a] = extent.min[a] - spacing[a];
        }
        ControlLattice::zeros(dims, spacing, origin)
    }

    /// Lattice whose coefficient at each control point is `f(position)`.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        mut f: impl FnMut(Vec3) -> Vec3,
    ) -> Result<Self> {
        let mut lattice = ControlLattice::zeros(dims, spacing, origin)?;
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let idx = lattice.index(i, j, k);
                    lattice.coefficients[idx] = f(lattice.control_point(i, j, k));
                }
            }
        }
        ControlLattice::new(dims, spacing, origin, lattice.coefficients)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn geometry(&self) -> LatticeGeometry {
        LatticeGeometry {
            grid_dims: self.dims,
            spacing: self.spacing,
            origin: self.origin,
        }
    }

    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }

    pub fn coefficients(&self) -> &[Vec3] {
        &self.coefficients
    }

    pub fn coefficients_mut(&mut self) -> &mut [Vec3] {
        &mut self.coefficients
    }

    /// Returns a copy with the given coefficients and the same geometry.
    pub fn with_coefficients(&self, coefficients: Vec<Vec3>) -> ControlLattice {
        assert_eq!(coefficients.len(), self.coefficients.len());
        ControlLattice {
            coefficients,
            ..self.clone()
        }
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn control_point(&self, i: usize, j: usize, k: usize) -> Vec3 {
        Vec3::new(
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        )
    }

    /// Physical region where displacements are defined.
    pub fn covered_extent(&self) -> Aabb {
        let lo = self.control_point(1, 1, 1);
        let hi = self.control_point(self.dims[0] - 2, self.dims[1] - 2, self.dims[2] - 2);
        Aabb::new(lo, hi)
    }

    pub fn covers(&self, x: &Vec3) -> bool {
        (0..3).all(|a| {
            let u = (x[a] - self.origin[a]) / self.spacing[a];
            axis_support(u, self.dims[a]).is_some()
        })
    }

    pub fn max_abs_coefficient(&self) -> f64 {
        self.coefficients.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    #[inline]
    fn support(&self, x: &Vec3, with_derivative: bool) -> Option<PointSupport> {
        let mut first = [0usize; 3];
        let mut w = [[0.0; 4]; 3];
        let mut d1 = [[0.0; 4]; 3];
        for a in 0..3 {
            let u = (x[a] - self.origin[a]) / self.spacing[a];
            let (f, t) = axis_support(u, self.dims[a])?;
            first[a] = f;
            w[a] = cubic_weights(t);
            if with_derivative {
                let d = cubic_weights_d1(t);
                let inv = 1.0 / self.spacing[a];
                d1[a] = d.map(|v| v * inv);
            }
        }
        Some(PointSupport { first, w, d1 })
    }

    /// Displacement at `x`, `None` outside the covered region.
    #[inline]
    pub fn try_displacement(&self, x: &Vec3) -> Option<Vec3> {
        let s = self.support(x, false)?;
        let mut out = Vec3::zeros();
        for c in 0..4 {
            for b in 0..4 {
                let wbc = s.w[1][b] * s.w[2][c];
                let row = self.index(s.first[0], s.first[1] + b, s.first[2] + c);
                for a in 0..4 {
                    out += self.coefficients[row + a] * (s.w[0][a] * wbc);
                }
            }
        }
        Some(out)
    }

    /// Displacement and its spatial derivative `∂D_r/∂x_c` at `x`.
    #[inline]
    pub fn try_displacement_and_gradient(&self, x: &Vec3) -> Option<(Vec3, Mat3)> {
        let s = self.support(x, true)?;
        let mut d = Vec3::zeros();
        let mut g = Mat3::zeros();
        for c in 0..4 {
            for b in 0..4 {
                let row = self.index(s.first[0], s.first[1] + b, s.first[2] + c);
                for a in 0..4 {
                    let phi = self.coefficients[row + a];
                    let w = s.w[0][a] * s.w[1][b] * s.w[2][c];
                    let gx = s.d1[0][a] * s.w[1][b] * s.w[2][c];
                    let gy = s.w[0][a] * s.d1[1][b] * s.w[2][c];
                    let gz = s.w[0][a] * s.w[1][b] * s.d1[2][c];
                    d += phi * w;
                    for r in 0..3 {
                        g[(r, 0)] += phi[r] * gx;
                        g[(r, 1)] += phi[r] * gy;
                        g[(r, 2)] += phi[r] * gz;
                    }
                }
            }
        }
        Some((d, g))
    }

    pub fn displacement(&self, x: &Vec3) -> Result<Vec3> {
        self.try_displacement(x)
            .ok_or(Error::InsufficientLattice([x[0], x[1], x[2]]))
    }

    /// Jacobian of `x ↦ x + D(x)`.
    pub fn jacobian(&self, x: &Vec3) -> Result<Mat3> {
        self.try_displacement_and_gradient(x)
            .map(|(_, g)| g + Mat3::identity())
            .ok_or(Error::InsufficientLattice([x[0], x[1], x[2]]))
    }

    /// Adds `B_p(x) · force` to `grad[p]` for the 64 control points supporting
    /// `x`. Returns false when `x` is not covered.
    #[inline]
    pub fn scatter(&self, x: &Vec3, force: &Vec3, grad: &mut [Vec3]) -> bool {
        let Some(s) = self.support(x, false) else {
            return false;
        };
        for c in 0..4 {
            for b in 0..4 {
                let wbc = s.w[1][b] * s.w[2][c];
                let row = self.index(s.first[0], s.first[1] + b, s.first[2] + c);
                for a in 0..4 {
                    grad[row + a] += force * (s.w[0][a] * wbc);
                }
            }
        }
        true
    }

    /// Halves the spacing along every axis. Coefficients follow cubic B-spline
    /// subdivision so the displacement over the covered region is unchanged.
    pub fn refine(&self) -> ControlLattice {
        let mut dims = self.dims;
        let mut coeffs = self.coefficients.clone();
        for axis in 0..3 {
            let n = dims[axis];
            let m = 2 * n - 3;
            let mut new_dims = dims;
            new_dims[axis] = m;
            let stride_old = [1, dims[0], dims[0] * dims[1]];
            let stride_new = [1, new_dims[0], new_dims[0] * new_dims[1]];
            let mut out = vec![Vec3::zeros(); new_dims.iter().product()];
            for k in 0..new_dims[2] {
                for j in 0..new_dims[1] {
                    for i in 0..new_dims[0] {
                        let pos = [i, j, k];
                        let q = pos[axis] + 1;
                        let mut src = pos;
                        let old = |src: [usize; 3]| -> Vec3 {
                            coeffs[src[0] * stride_old[0] + src[1] * stride_old[1] + src[2] * stride_old[2]]
                        };
                        let value = if q % 2 == 0 {
                            let c = q / 2;
                            src[axis] = c - 1;
                            let a = old(src);
                            src[axis] = c;
                            let b = old(src);
                            src[axis] = c + 1;
                            (a + b * 6.0 + old(src)) / 8.0
                        } else {
                            let c = q / 2;
                            src[axis] = c;
                            let a = old(src);
                            src[axis] = c + 1;
                            (a + old(src)) / 2.0
                        };
                        out[i * stride_new[0] + j * stride_new[1] + k * stride_new[2]] = value;
                    }
                }
            }
            coeffs = out;
            dims = new_dims;
        }
        let spacing = self.spacing.map(|s| s / 2.0);
        let origin = [
            self.origin[0] + spacing[0],
            self.origin[1] + spacing[1],
            self.origin[2] + spacing[2],
        ];
        ControlLattice {
            dims,
            spacing,
            origin,
            coefficients: coeffs,
        }
    }
}

/// Which basis derivative to use along an axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Deriv {
    Value,
    First,
    Second,
}

#[derive(Clone, Debug)]
struct AxisTable {
    first: Vec<usize>,
    w: [Vec<[f64; 4]>; 3],
}

impl AxisTable {
    fn weights(&self, d: Deriv) -> &[[f64; 4]] {
        match d {
            Deriv::Value => &self.w[0],
            Deriv::First => &self.w[1],
            Deriv::Second => &self.w[2],
        }
    }
}

/// Precomputed per-axis B-spline weights of a lattice geometry at the voxel
/// centres of a regular grid. Field evaluation and its adjoint run as three
/// separable 1-D contractions.
#[derive(Clone, Debug)]
pub struct GridBasis {
    lattice_dims: [usize; 3],
    grid: Grid,
    axes: [AxisTable; 3],
}

impl GridBasis {
    pub fn new(lattice: &ControlLattice, grid: &Grid) -> Result<Self> {
        let mut axes: Vec<AxisTable> = Vec::with_capacity(3);
        for a in 0..3 {
            let n = grid.dims[a];
            let mut table = AxisTable {
                first: Vec::with_capacity(n),
                w: [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)],
            };
            let inv = 1.0 / lattice.spacing[a];
            for i in 0..n {
                let x = grid.origin[a] + i as f64 * grid.spacing[a];
                let u = (x - lattice.origin[a]) * inv;
                let Some((first, t)) = axis_support(u, lattice.dims[a]) else {
                    let mut p = grid.point(0, 0, 0);
                    p[a] = x;
                    return Err(Error::InsufficientLattice([p[0], p[1], p[2]]));
                };
                table.first.push(first);
                table.w[0].push(cubic_weights(t));
                table.w[1].push(cubic_weights_d1(t).map(|v| v * inv));
                table.w[2].push(cubic_weights_d2(t).map(|v| v * inv * inv));
            }
            axes.push(table);
        }
        let [x, y, z]: [AxisTable; 3] = axes.try_into().expect("three axes");
        Ok(GridBasis {
            lattice_dims: lattice.dims,
            grid: grid.clone(),
            axes: [x, y, z],
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn lattice_dims(&self) -> [usize; 3] {
        self.lattice_dims
    }

    pub fn lattice_len(&self) -> usize {
        self.lattice_dims.iter().product()
    }

    /// Evaluates `Σ_p φ_p ∂^d B_p` at every grid point, x-fastest.
    pub fn eval(&self, coefficients: &[Vec3], deriv: [Deriv; 3]) -> Vec<Vec3> {
        let [na, nb, _nc] = self.lattice_dims;
        let [ni, nj, nk] = self.grid.dims;
        assert_eq!(coefficients.len(), self.lattice_len());
        let (tx, ty, tz) = (&self.axes[0], &self.axes[1], &self.axes[2]);
        let (wx, wy, wz) = (tx.weights(deriv[0]), ty.weights(deriv[1]), tz.weights(deriv[2]));

        let plane_l = na * nb;
        let mut t1 = vec![Vec3::zeros(); nk * plane_l];
        t1.par_chunks_mut(plane_l).enumerate().for_each(|(k, out)| {
            let c0 = tz.first[k];
            for m in 0..4 {
                let w = wz[k][m];
                if w == 0.0 {
                    continue;
                }
                let src = &coefficients[(c0 + m) * plane_l..(c0 + m + 1) * plane_l];
                for (o, s) in out.iter_mut().zip(src) {
                    *o += s * w;
                }
            }
        });

        let plane_m = na * nj;
        let mut t2 = vec![Vec3::zeros(); nk * plane_m];
        t2.par_chunks_mut(plane_m).enumerate().for_each(|(k, out)| {
            let src_plane = &t1[k * plane_l..(k + 1) * plane_l];
            for j in 0..nj {
                let b0 = ty.first[j];
                let row = &mut out[j * na..(j + 1) * na];
                for m in 0..4 {
                    let w = wy[j][m];
                    if w == 0.0 {
                        continue;
                    }
                    let src = &src_plane[(b0 + m) * na..(b0 + m + 1) * na];
                    for (o, s) in row.iter_mut().zip(src) {
                        *o += s * w;
                    }
                }
            }
        });

        let plane_o = ni * nj;
        let mut out = vec![Vec3::zeros(); nk * plane_o];
        out.par_chunks_mut(plane_o).enumerate().for_each(|(k, plane)| {
            for j in 0..nj {
                let src = &t2[(k * nj + j) * na..(k * nj + j + 1) * na];
                let row = &mut plane[j * ni..(j + 1) * ni];
                for (i, o) in row.iter_mut().enumerate() {
                    let a0 = tx.first[i];
                    let w = &wx[i];
                    *o = src[a0] * w[0] + src[a0 + 1] * w[1] + src[a0 + 2] * w[2] + src[a0 + 3] * w[3];
                }
            }
        });
        out
    }

    /// Adjoint of [`GridBasis::eval`]: adds `Σ_x field(x) ∂^d B_p(x)` to `out[p]`.
    pub fn adjoint_add(&self, field: &[Vec3], deriv: [Deriv; 3], out: &mut [Vec3]) {
        let [na, nb, nc] = self.lattice_dims;
        let [ni, nj, nk] = self.grid.dims;
        assert_eq!(field.len(), self.grid.len());
        assert_eq!(out.len(), self.lattice_len());
        let (tx, ty, tz) = (&self.axes[0], &self.axes[1], &self.axes[2]);
        let (wx, wy, wz) = (tx.weights(deriv[0]), ty.weights(deriv[1]), tz.weights(deriv[2]));

        let plane_m = na * nj;
        let mut u2 = vec![Vec3::zeros(); nk * plane_m];
        u2.par_chunks_mut(plane_m).enumerate().for_each(|(k, plane)| {
            for j in 0..nj {
                let src = &field[(k * nj + j) * ni..(k * nj + j + 1) * ni];
                let row = &mut plane[j * na..(j + 1) * na];
                for (i, g) in src.iter().enumerate() {
                    let a0 = tx.first[i];
                    let w = &wx[i];
                    row[a0] += g * w[0];
                    row[a0 + 1] += g * w[1];
                    row[a0 + 2] += g * w[2];
                    row[a0 + 3] += g * w[3];
                }
            }
        });

        let plane_l = na * nb;
        let mut u1 = vec![Vec3::zeros(); nk * plane_l];
        u1.par_chunks_mut(plane_l).enumerate().for_each(|(k, plane)| {
            let src_plane = &u2[k * plane_m..(k + 1) * plane_m];
            for j in 0..nj {
                let b0 = ty.first[j];
                let src = &src_plane[j * na..(j + 1) * na];
                for m in 0..4 {
                    let w = wy[j][m];
                    if w == 0.0 {
                        continue;
                    }
                    let row = &mut plane[(b0 + m) * na..(b0 + m + 1) * na];
                    for (o, s) in row.iter_mut().zip(src) {
                        *o += s * w;
                    }
                }
            }
        });

        // Gather per output z-plane so the reduction order is fixed.
        let mut contributors: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nc];
        for k in 0..nk {
            for m in 0..4 {
                let w = wz[k][m];
                if w != 0.0 {
                    contributors[tz.first[k] + m].push((k, w));
                }
            }
        }
        out.par_chunks_mut(plane_l).enumerate().for_each(|(c, plane)| {
            for &(k, w) in &contributors[c] {
                let src = &u1[k * plane_l..(k + 1) * plane_l];
                for (o, s) in plane.iter_mut().zip(src) {
                    *o += s * w;
                }
            }
        });
    }

    pub fn displacement(&self, coefficients: &[Vec3]) -> Vec<Vec3> {
        self.eval(coefficients, [Deriv::Value; 3])
    }

    /// Spatial derivative fields `∂D/∂x`, `∂D/∂y`, `∂D/∂z`.
    pub fn first_derivatives(&self, coefficients: &[Vec3]) -> [Vec<Vec3>; 3] {
        use Deriv::{First as F, Value as V};
        [
            self.eval(coefficients, [F, V, V]),
            self.eval(coefficients, [V, F, V]),
            self.eval(coefficients, [V, V, F]),
        ]
    }

    /// Jacobians of `x ↦ x + D(x)` at every grid point.
    pub fn jacobians(&self, coefficients: &[Vec3]) -> Vec<Mat3> {
        let [dx, dy, dz] = self.first_derivatives(coefficients);
        (0..dx.len())
            .map(|n| Mat3::from_columns(&[dx[n], dy[n], dz[n]]) + Mat3::identity())
            .collect()
    }
}

/// An affine map optionally followed by a B-spline displacement evaluated at
/// the input point: `x ↦ affine(x) + D(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Deformation {
    pub affine: AffineTransform,
    pub lattice: Option<ControlLattice>,
}

impl Deformation {
    pub fn identity() -> Self {
        Deformation {
            affine: AffineTransform::identity(),
            lattice: None,
        }
    }

    pub fn affine(affine: AffineTransform) -> Self {
        Deformation {
            affine,
            lattice: None,
        }
    }

    pub fn new(affine: AffineTransform, lattice: ControlLattice) -> Self {
        Deformation {
            affine,
            lattice: Some(lattice),
        }
    }

    /// `None` when the lattice does not cover `x`.
    #[inline]
    pub fn apply(&self, x: &Vec3) -> Option<Vec3> {
        let y = self.affine.apply(x);
        match &self.lattice {
            Some(l) => Some(y + l.try_displacement(x)?),
            None => Some(y),
        }
    }

    /// Jacobian of the full map at `x`.
    pub fn jacobian(&self, x: &Vec3) -> Option<Mat3> {
        let a = *self.affine.matrix();
        match &self.lattice {
            Some(l) => Some(a + l.try_displacement_and_gradient(x)?.1),
            None => Some(a),
        }
    }
}

/// `forward(backward(x)) - x`; `None` flags a round trip that leaves either
/// transform's domain.
pub fn compose_residual(forward: &Deformation, backward: &Deformation, x: &Vec3) -> Option<Vec3> {
    let y = backward.apply(x)?;
    Some(forward.apply(&y)? - x)
}
