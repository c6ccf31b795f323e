//! Scalar volumes on axis-aligned grids, interpolation, and the resampling
//! pyramid used for coarse-to-fine registration.
//!
//! Voxel `(i, j, k)` sits at the physical point `origin + (i, j, k) ⊙ spacing`
//! (millimetres). Voxel data is stored x-fastest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::transform::{Deformation, GridBasis};
use crate::Vec3;

/// Positions within this many voxels outside the sampled range are clamped
/// onto the boundary instead of being reported as outside.
const INDEX_TOLERANCE: f64 = 1e-9;

/// Grid descriptor: voxel counts, spacing in mm and the centre of voxel 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

/// Axis-aligned physical box, inclusive on both ends.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Aabb { min, max }
    }

    /// Smallest box containing all `points`.
    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let mut b = Aabb::new(first, first);
        for p in it {
            b.min = b.min.inf(p);
            b.max = b.max.sup(p);
        }
        Some(b)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let mut out = [Vec3::zeros(); 8];
        for (c, corner) in out.iter_mut().enumerate() {
            for a in 0..3 {
                corner[a] = if c >> a & 1 == 0 { self.min[a] } else { self.max[a] };
            }
        }
        out
    }
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidInput(format!("grid dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidInput(format!(
                "grid spacing must be positive and finite, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidInput(format!("grid origin must be finite, got {origin:?}")));
        }
        Ok(Grid {
            dims,
            spacing,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, linear: usize) -> [usize; 3] {
        let i = linear % self.dims[0];
        let rest = linear / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    #[inline]
    pub fn point(&self, i: usize, j: usize, k: usize) -> Vec3 {
        Vec3::new(
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        )
    }

    #[inline]
    pub fn point_linear(&self, linear: usize) -> Vec3 {
        let [i, j, k] = self.coords(linear);
        self.point(i, j, k)
    }

    /// Continuous voxel index of a physical point.
    #[inline]
    pub fn continuous_index(&self, p: &Vec3) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Box spanned by the first and last voxel centres.
    pub fn extent(&self) -> Aabb {
        Aabb::new(
            self.point(0, 0, 0),
            self.point(self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1),
        )
    }

    /// Sub-grid covering voxel indices `lo..=hi` per axis.
    pub fn sub_grid(&self, lo: [usize; 3], hi: [usize; 3]) -> Grid {
        let p = self.point(lo[0], lo[1], lo[2]);
        Grid {
            dims: [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1],
            spacing: self.spacing,
            origin: [p[0], p[1], p[2]],
        }
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Nearest voxel to `p`, or `None` when it falls outside the grid.
    pub fn nearest_voxel(&self, p: &Vec3) -> Option<[usize; 3]> {
        let c = self.continuous_index(p);
        let mut out = [0usize; 3];
        for a in 0..3 {
            let r = c[a].round();
            if !(r >= 0.0 && r <= (self.dims[a] - 1) as f64) {
                return None;
            }
            out[a] = r as usize;
        }
        Some(out)
    }

    pub(crate) fn same_geometry(&self, other: &Grid) -> bool {
        self.dims == other.dims
            && (0..3).all(|a| {
                (self.spacing[a] - other.spacing[a]).abs() <= 1e-9 * self.spacing[a]
                    && (self.origin[a] - other.origin[a]).abs() <= 1e-9 * self.spacing[a].max(1.0)
            })
    }
}

/// Dense scalar volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    grid: Grid,
    data: Vec<f64>,
}

/// Per-axis linear interpolation support: lower index and fractional weight.
#[inline]
fn axis_cell(c: f64, n: usize) -> Option<(usize, f64)> {
    let max = (n - 1) as f64;
    if !(c >= -INDEX_TOLERANCE && c <= max + INDEX_TOLERANCE) {
        return None;
    }
    let c = c.clamp(0.0, max);
    let i0 = (c.floor() as usize).min(n - 2);
    Some((i0, c - i0 as f64))
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if grid.dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidInput(format!(
                "volume dims must be at least 2 per axis, got {:?}",
                grid.dims
            )));
        }
        if data.len() != grid.len() {
            return Err(Error::InvalidInput(format!(
                "volume data has {} voxels, grid expects {}",
                data.len(),
                grid.len()
            )));
        }
        Ok(Volume { grid, data })
    }

    pub fn constant(grid: Grid, value: f64) -> Result<Self> {
        let n = grid.len();
        Volume::new(grid, vec![value; n])
    }

    /// Builds a volume by evaluating `f` at every voxel index.
    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(grid.len());
        for k in 0..grid.dims[2] {
            for j in 0..grid.dims[1] {
                for i in 0..grid.dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Volume::new(grid, data)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.grid.origin
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }

    /// Trilinear interpolation at continuous voxel index `c`.
    #[inline]
    pub fn sample_index(&self, c: [f64; 3]) -> Option<f64> {
        let d = self.grid.dims;
        let (i0, fx) = axis_cell(c[0], d[0])?;
        let (j0, fy) = axis_cell(c[1], d[1])?;
        let (k0, fz) = axis_cell(c[2], d[2])?;
        let sx = 1;
        let sy = d[0];
        let sz = d[0] * d[1];
        let base = i0 + sy * j0 + sz * k0;
        let v = &self.data;
        let c00 = v[base] * (1.0 - fx) + v[base + sx] * fx;
        let c10 = v[base + sy] * (1.0 - fx) + v[base + sy + sx] * fx;
        let c01 = v[base + sz] * (1.0 - fx) + v[base + sz + sx] * fx;
        let c11 = v[base + sz + sy] * (1.0 - fx) + v[base + sz + sy + sx] * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        Some(c0 * (1.0 - fz) + c1 * fz)
    }

    /// Trilinear interpolation at a physical point; `None` is the outside marker.
    #[inline]
    pub fn sample(&self, p: &Vec3) -> Option<f64> {
        self.sample_index(self.grid.continuous_index(p))
    }

    /// Interpolated value and its physical-space gradient (derivative of the
    /// trilinear interpolant, in intensity per mm).
    #[inline]
    pub fn sample_with_gradient(&self, p: &Vec3) -> Option<(f64, Vec3)> {
        let d = self.grid.dims;
        let c = self.grid.continuous_index(p);
        let (i0, fx) = axis_cell(c[0], d[0])?;
        let (j0, fy) = axis_cell(c[1], d[1])?;
        let (k0, fz) = axis_cell(c[2], d[2])?;
        let sy = d[0];
        let sz = d[0] * d[1];
        let base = i0 + sy * j0 + sz * k0;
        let v = &self.data;
        let v000 = v[base];
        let v100 = v[base + 1];
        let v010 = v[base + sy];
        let v110 = v[base + sy + 1];
        let v001 = v[base + sz];
        let v101 = v[base + sz + 1];
        let v011 = v[base + sz + sy];
        let v111 = v[base + sz + sy + 1];

        let c00 = v000 + (v100 - v000) * fx;
        let c10 = v010 + (v110 - v010) * fx;
        let c01 = v001 + (v101 - v001) * fx;
        let c11 = v011 + (v111 - v011) * fx;
        let c0 = c00 + (c10 - c00) * fy;
        let c1 = c01 + (c11 - c01) * fy;
        let value = c0 + (c1 - c0) * fz;

        let dx0 = (v100 - v000) + ((v110 - v010) - (v100 - v000)) * fy;
        let dx1 = (v101 - v001) + ((v111 - v011) - (v101 - v001)) * fy;
        let dx = dx0 + (dx1 - dx0) * fz;
        let dy = (c10 - c00) + ((c11 - c01) - (c10 - c00)) * fz;
        let dz = c1 - c0;
        let s = self.grid.spacing;
        let mut g = Vec3::new(dx / s[0], dy / s[1], dz / s[2]);
        // On a grid plane the interpolant has a kink; use the mean of the two
        // one-sided slopes there, which is what a central difference sees.
        for a in 0..3 {
            let r = c[a].round();
            if (c[a] - r).abs() <= INDEX_TOLERANCE && r >= 1.0 && r <= (d[a] - 2) as f64 {
                let mut lo = c;
                let mut hi = c;
                lo[a] = r - 1.0;
                hi[a] = r + 1.0;
                g[a] = (self.sample_index(hi)? - self.sample_index(lo)?) / (2.0 * s[a]);
            }
        }
        Some((value, g))
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Volume {
        Volume {
            grid: self.grid.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Separable Gaussian smoothing with per-axis sigma in voxels. Kernels are
/// truncated at 3 sigma and renormalised where they overhang the border.
pub fn gaussian_smooth(v: &Volume, sigma_voxels: [f64; 3]) -> Volume {
    let mut data = v.data.clone();
    let dims = v.grid.dims;
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let sigma = sigma_voxels[axis];
        if sigma <= 0.0 {
            continue;
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let n = dims[axis] as isize;
        let stride = strides[axis];
        let mut line = vec![0.0; dims[axis]];
        let mut out = data.clone();
        for start in 0..data.len() {
            if (start / stride) % dims[axis] != 0 {
                continue;
            }
            for (t, slot) in line.iter_mut().enumerate() {
                *slot = data[start + t * stride];
            }
            for t in 0..n {
                let mut acc = 0.0;
                let mut norm = 0.0;
                for (ki, w) in kernel.iter().enumerate() {
                    let s = t + ki as isize - radius;
                    if s >= 0 && s < n {
                        acc += w * line[s as usize];
                        norm += w;
                    }
                }
                out[start + t as usize * stride] = acc / norm;
            }
        }
        data = out;
    }
    Volume {
        grid: v.grid.clone(),
        data,
    }
}

/// Gaussian pre-filter (sigma = factor / 2 voxels) followed by decimation,
/// with output voxel centres at the centroids of their source blocks.
pub fn downsample(v: &Volume, factor: usize) -> Result<Volume> {
    if factor == 0 {
        return Err(Error::InvalidInput("downsample factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(v.clone());
    }
    let dims = v.grid.dims;
    if dims.iter().any(|&d| d / factor < 2) {
        return Err(Error::InvalidInput(format!(
            "downsampling dims {dims:?} by {factor} leaves fewer than 2 voxels on an axis"
        )));
    }
    let sigma = 0.5 * factor as f64;
    let smoothed = gaussian_smooth(v, [sigma; 3]);
    let f = factor as f64;
    let half = (f - 1.0) / 2.0;
    let out_dims = [dims[0] / factor, dims[1] / factor, dims[2] / factor];
    let s = v.grid.spacing;
    let o = v.grid.origin;
    let grid = Grid::new(
        out_dims,
        [s[0] * f, s[1] * f, s[2] * f],
        [o[0] + half * s[0], o[1] + half * s[1], o[2] + half * s[2]],
    )?;
    Volume::from_fn(grid, |i, j, k| {
        let c = [
            i as f64 * f + half,
            j as f64 * f + half,
            k as f64 * f + half,
        ];
        smoothed
            .sample_index(c)
            .expect("block centroid lies inside the source grid")
    })
}

/// Resamples onto the grid with `target_spacing` covering the same span of
/// voxel centres. Axes that get coarser are Gaussian pre-filtered with
/// sigma = ratio / 2 voxels.
pub fn resample_to_spacing(v: &Volume, target_spacing: [f64; 3]) -> Result<Volume> {
    if target_spacing.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return Err(Error::InvalidInput(format!(
            "target spacing must be positive, got {target_spacing:?}"
        )));
    }
    let s = v.grid.spacing;
    let dims = v.grid.dims;
    let mut sigma = [0.0; 3];
    let mut out_dims = [0usize; 3];
    for a in 0..3 {
        let ratio = target_spacing[a] / s[a];
        if ratio > 1.0 + 1e-12 {
            sigma[a] = 0.5 * ratio;
        }
        out_dims[a] = (((dims[a] - 1) as f64 / ratio) + 1e-9).floor() as usize + 1;
    }
    if out_dims.iter().any(|&d| d < 2) {
        return Err(Error::InvalidInput(format!(
            "resampling to spacing {target_spacing:?} leaves fewer than 2 voxels on an axis"
        )));
    }
    let source = if sigma.iter().any(|&x| x > 0.0) {
        gaussian_smooth(v, sigma)
    } else {
        v.clone()
    };
    let grid = Grid::new(out_dims, target_spacing, v.grid.origin)?;
    let ratio = [
        target_spacing[0] / s[0],
        target_spacing[1] / s[1],
        target_spacing[2] / s[2],
    ];
    Volume::from_fn(grid, |i, j, k| {
        source
            .sample_index([i as f64 * ratio[0], j as f64 * ratio[1], k as f64 * ratio[2]])
            .expect("resampled centre lies inside the source span")
    })
}

/// Trilinear upsampling to a finer (or equal) spacing.
pub fn upsample(v: &Volume, target_spacing: [f64; 3]) -> Result<Volume> {
    if target_spacing.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return Err(Error::InvalidInput(format!(
            "target spacing must be positive, got {target_spacing:?}"
        )));
    }
    let s = v.grid.spacing;
    if (0..3).any(|a| target_spacing[a] > s[a]) {
        return Err(Error::InvalidInput(format!(
            "upsample target spacing {target_spacing:?} is coarser than {s:?}"
        )));
    }
    if target_spacing == s {
        return Ok(v.clone());
    }
    resample_to_spacing(v, target_spacing)
}

/// Crops to the voxels whose centres lie inside `bbox`, padded by `margin`
/// voxels per side (clamped to the volume).
pub fn crop_to_extent(v: &Volume, bbox: &Aabb, margin: usize) -> Result<Volume> {
    let (lo, hi) = crop_range(&v.grid, bbox, margin)?;
    let grid = v.grid.sub_grid(lo, hi);
    if grid.dims.iter().any(|&d| d < 2) {
        return Err(Error::InvalidInput(format!(
            "crop leaves fewer than 2 voxels on an axis ({:?})",
            grid.dims
        )));
    }
    Volume::from_fn(grid, |i, j, k| v.get(lo[0] + i, lo[1] + j, lo[2] + k))
}

/// Inclusive voxel index range selected by [`crop_to_extent`].
pub fn crop_range(grid: &Grid, bbox: &Aabb, margin: usize) -> Result<([usize; 3], [usize; 3])> {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let n = grid.dims[a] as f64;
        let first = ((bbox.min[a] - grid.origin[a]) / grid.spacing[a] - INDEX_TOLERANCE).ceil();
        let last = ((bbox.max[a] - grid.origin[a]) / grid.spacing[a] + INDEX_TOLERANCE).floor();
        let first = first.max(0.0);
        let last = last.min(n - 1.0);
        if !(first <= last) {
            return Err(Error::DisjointExtents);
        }
        lo[a] = (first as usize).saturating_sub(margin);
        hi[a] = (last as usize + margin).min(grid.dims[a] - 1);
    }
    Ok((lo, hi))
}

/// Warps `floating` onto `target`: each output voxel centre `x` takes the value
/// of `floating` at `deformation(x)`; samples outside `floating` get
/// `background`.
pub fn resample_with_transform(
    floating: &Volume,
    deformation: &Deformation,
    target: &Grid,
    background: f64,
) -> Result<Volume> {
    let displacement = match &deformation.lattice {
        Some(lattice) => Some(GridBasis::new(lattice, target)?.displacement(lattice.coefficients())),
        None => None,
    };
    let mut data = Vec::with_capacity(target.len());
    for linear in 0..target.len() {
        let x = target.point_linear(linear);
        let mut y = deformation.affine.apply(&x);
        if let Some(d) = &displacement {
            y += d[linear];
        }
        data.push(floating.sample(&y).unwrap_or(background));
    }
    Volume::new(target.clone(), data)
}

/// One level of the registration pyramid; reference and floating share
/// `target_spacing`.
#[derive(Clone, Debug)]
pub struct PyramidLevel {
    /// 0 is the coarsest level.
    pub level_index: usize,
    pub reference: Volume,
    pub floating: Volume,
    pub reference_mask: BinaryMask,
    pub floating_mask: BinaryMask,
    pub target_spacing: [f64; 3],
}

/// Smallest allowed voxel count per axis on any pyramid level.
pub const MIN_LEVEL_DIM: usize = 8;

/// Resamples `v` to `target` spacing, using exact decimation when the ratio
/// is the same integer on every axis.
fn to_level_spacing(v: &Volume, target: [f64; 3]) -> Result<Volume> {
    let s = v.spacing();
    let ratio = target[0] / s[0];
    let m = ratio.round();
    let integral = m >= 1.0 && (0..3).all(|a| (s[a] * m - target[a]).abs() <= 1e-9 * target[a]);
    if integral {
        downsample(v, m as usize)
    } else if (0..3).all(|a| target[a] <= s[a]) {
        upsample(v, target)
    } else {
        resample_to_spacing(v, target)
    }
}

/// Builds `levels` pyramid levels, finest last. Target spacings are the
/// floating spacing times powers of two.
pub fn build_pyramid(
    reference: &Volume,
    floating: &Volume,
    reference_mask: &BinaryMask,
    floating_mask: &BinaryMask,
    levels: usize,
) -> Result<Vec<PyramidLevel>> {
    if levels == 0 {
        return Err(Error::InvalidInput("pyramid needs at least one level".into()));
    }
    if !reference_mask.grid().same_geometry(reference.grid()) {
        return Err(Error::InvalidInput("reference mask grid differs from reference volume".into()));
    }
    if !floating_mask.grid().same_geometry(floating.grid()) {
        return Err(Error::InvalidInput("floating mask grid differs from floating volume".into()));
    }
    let fs = floating.spacing();
    let rs = reference.spacing();
    if (0..3).any(|a| fs[a] > rs[a] * (1.0 + 1e-9)) {
        return Err(Error::InvalidInput(format!(
            "floating spacing {fs:?} must not be coarser than reference spacing {rs:?}"
        )));
    }
    let mut out = Vec::with_capacity(levels);
    for level in 0..levels {
        let factor = 1usize << (levels - 1 - level);
        let target = [fs[0] * factor as f64, fs[1] * factor as f64, fs[2] * factor as f64];
        let too_small = |d: [usize; 3]| d.iter().any(|&x| x < MIN_LEVEL_DIM);
        if floating.dims().iter().any(|&d| d / factor < MIN_LEVEL_DIM) {
            return Err(Error::InvalidInput(format!(
                "{levels} levels would shrink the floating volume {:?} below {MIN_LEVEL_DIM} voxels",
                floating.dims()
            )));
        }
        let float_l = downsample(floating, factor)?;
        let ref_l = to_level_spacing(reference, target)?;
        if too_small(ref_l.dims()) || too_small(float_l.dims()) {
            return Err(Error::InvalidInput(format!(
                "{levels} levels would shrink a volume below {MIN_LEVEL_DIM} voxels per axis"
            )));
        }
        out.push(PyramidLevel {
            level_index: level,
            reference_mask: reference_mask.resample_nearest(ref_l.grid()),
            floating_mask: floating_mask.resample_nearest(float_l.grid()),
            reference: ref_l,
            floating: float_l,
            target_spacing: target,
        });
    }
    Ok(out)
}
