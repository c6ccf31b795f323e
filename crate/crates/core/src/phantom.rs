//! Synthetic test pairs with known ground truth.
//!
//! The lung phantom is a soft-tissue ellipsoid holding two air-filled lobes
//! with smooth vessel-like texture; the sphere phantom is a textured ball
//! with a shrunken copy as specimen. Both are deterministic for a seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::mask::{morphology, BinaryMask, MorphOp};
use crate::transform::{AffineTransform, ControlLattice, Deformation};
use crate::volume::{resample_with_transform, Grid, Volume};
use crate::Vec3;

pub const AIR_HU: f64 = -1000.0;
pub const TISSUE_HU: f64 = 40.0;
pub const LUNG_HU: f64 = -850.0;

/// Reference/floating pair with masks and, where known, the true forward
/// displacement (reference point `x` corresponds to floating point
/// `x + D(x)`). The `*_mask` fields are the dilated registration masks and
/// the `*_object` fields the exact object masks used for surface distances.
#[derive(Clone, Debug)]
pub struct PhantomCase {
    pub reference: Volume,
    pub floating: Volume,
    pub reference_mask: BinaryMask,
    pub floating_mask: BinaryMask,
    pub reference_object: BinaryMask,
    pub floating_object: BinaryMask,
    pub truth: Option<ControlLattice>,
}

struct Blob {
    centre: Vec3,
    inv_two_sigma2: f64,
    amplitude: f64,
}

fn random_blobs(rng: &mut ChaCha8Rng, n: usize, lo: Vec3, hi: Vec3, sigma: (f64, f64), amp: f64) -> Vec<Blob> {
    (0..n)
        .map(|_| {
            let centre = Vec3::new(
                rng.gen_range(lo[0]..hi[0]),
                rng.gen_range(lo[1]..hi[1]),
                rng.gen_range(lo[2]..hi[2]),
            );
            let s = rng.gen_range(sigma.0..sigma.1);
            Blob {
                centre,
                inv_two_sigma2: 1.0 / (2.0 * s * s),
                amplitude: amp * rng.gen_range(0.5..1.0),
            }
        })
        .collect()
}

fn blob_sum(blobs: &[Blob], p: &Vec3) -> f64 {
    blobs
        .iter()
        .map(|b| b.amplitude * (-(p - b.centre).norm_squared() * b.inv_two_sigma2).exp())
        .sum()
}

/// Smooth 0→1 step of width `w` around 0.
fn smooth_step(t: f64, w: f64) -> f64 {
    0.5 * (1.0 + (t / w).tanh())
}

/// Lung-like phantom on `grid`: intensity volume in HU and the lung mask.
pub fn lung_phantom(grid: &Grid, seed: u64, noise_hu: f64) -> Result<(Volume, BinaryMask)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ext = grid.extent();
    let centre = (ext.min + ext.max) / 2.0;
    let half = (ext.max - ext.min) / 2.0;
    let voxel = grid.spacing.iter().copied().fold(f64::INFINITY, f64::min);
    let body_r = half * 0.92;
    let lobe_r = Vec3::new(half[0] * 0.4, half[1] * 0.7, half[2] * 0.75);
    let lobe_c = [
        centre - Vec3::new(half[0] * 0.42, 0.0, 0.0),
        centre + Vec3::new(half[0] * 0.42, 0.0, 0.0),
    ];
    let in_lobe = |p: &Vec3| {
        lobe_c
            .iter()
            .map(|c| {
                let q = (p - c).component_div(&lobe_r);
                1.0 - q.norm()
            })
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let blobs = random_blobs(
        &mut rng,
        160,
        centre - half * 0.85,
        centre + half * 0.85,
        (1.5 * voxel, 3.0 * voxel),
        450.0,
    );
    let edge = 1.0 * voxel / half.min();
    let values: Vec<f64> = (0..grid.len())
        .map(|n| {
            let p = grid.point_linear(n);
            let body = 1.0 - (p - centre).component_div(&body_r).norm();
            let lung = in_lobe(&p);
            let outside = AIR_HU + (TISSUE_HU - AIR_HU) * smooth_step(body, edge);
            let lung_value = LUNG_HU + blob_sum(&blobs, &p);
            let w = smooth_step(lung, edge);
            outside * (1.0 - w) + lung_value * w + noise_hu * rng.gen_range(-1.0..1.0)
        })
        .collect();
    let volume = Volume::new(grid.clone(), values)?;
    let mask = BinaryMask::from_fn(grid.clone(), |i, j, k| in_lobe(&grid.point(i, j, k)) > 0.0);
    Ok((volume, mask))
}

/// Random smooth displacement lattice whose largest displacement magnitude
/// over `grid` equals `amplitude` mm. Control points sit `cp_voxels` voxels
/// apart and those on the outer ring are zero so the field fades out.
pub fn smooth_warp(grid: &Grid, cp_voxels: f64, amplitude: f64, seed: u64) -> Result<ControlLattice> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spacing = grid.spacing.map(|s| s * cp_voxels);
    let raw = ControlLattice::covering(&grid.extent(), spacing)?;
    let [nx, ny, nz] = raw.dims();
    let mut coeffs = vec![Vec3::zeros(); raw.len()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let border = i < 2 || j < 2 || k < 2 || i + 2 >= nx || j + 2 >= ny || k + 2 >= nz;
                if !border {
                    coeffs[raw.index(i, j, k)] =
                        Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                }
            }
        }
    }
    let unit = raw.with_coefficients(coeffs);
    let peak = crate::transform::GridBasis::new(&unit, grid)?
        .displacement(unit.coefficients())
        .iter()
        .map(|d| d.norm())
        .fold(0.0, f64::max);
    let scale = if peak > 0.0 { amplitude / peak } else { 0.0 };
    Ok(unit.with_coefficients(unit.coefficients().iter().map(|c| c * scale).collect()))
}

/// Nearest-neighbour warp of a mask: output voxel `x` takes the mask value at
/// `deformation(x)`.
pub fn warp_mask(mask: &BinaryMask, deformation: &Deformation, target: &Grid) -> Result<BinaryMask> {
    let v = resample_with_transform(&mask.to_volume(), deformation, target, 0.0)?;
    Ok(BinaryMask::from_fn(target.clone(), |i, j, k| v.get(i, j, k) >= 0.5))
}

/// Lung phantom pair for warp recovery: the floating image is the plain
/// phantom and the reference is it warped by a random smooth lattice of the
/// given amplitude (voxels). Registration masks are the lung masks dilated
/// by two voxels so the lobe boundaries contribute.
pub fn warped_lung(dims: [usize; 3], amplitude_voxels: f64, seed: u64) -> Result<PhantomCase> {
    let grid = Grid::new(dims, [1.0; 3], [0.0; 3])?;
    let (floating, lung) = lung_phantom(&grid, seed, 0.0)?;
    let truth = smooth_warp(&grid, 16.0, amplitude_voxels, seed ^ 0x5eed)?;
    let deformation = Deformation::new(AffineTransform::identity(), truth.clone());
    let reference = resample_with_transform(&floating, &deformation, &grid, AIR_HU)?;
    let reference_lung = warp_mask(&lung, &deformation, &grid)?;
    Ok(PhantomCase {
        reference,
        floating,
        reference_mask: morphology(&reference_lung, MorphOp::Dilate, 2)?,
        floating_mask: morphology(&lung, MorphOp::Dilate, 2)?,
        reference_object: reference_lung,
        floating_object: lung,
        truth: Some(truth),
    })
}

/// Textured ball of `radius` mm centred in `grid`, and its mask.
pub fn textured_sphere(grid: &Grid, centre: Vec3, radius: f64, seed: u64) -> Result<(Volume, BinaryMask)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let voxel = grid.spacing.iter().copied().fold(f64::INFINITY, f64::min);
    let r3 = Vec3::repeat(radius * 0.8);
    let blobs = random_blobs(&mut rng, 24, centre - r3, centre + r3, (1.5 * voxel, 3.0 * voxel), 300.0);
    let values: Vec<f64> = (0..grid.len())
        .map(|n| {
            let p = grid.point_linear(n);
            let w = smooth_step(radius - (p - centre).norm(), 0.7 * voxel);
            AIR_HU * (1.0 - w) + (LUNG_HU + blob_sum(&blobs, &p)) * w
        })
        .collect();
    let mask = BinaryMask::from_fn(grid.clone(), |i, j, k| (grid.point(i, j, k) - centre).norm() <= radius);
    Ok((Volume::new(grid.clone(), values)?, mask))
}

/// Sphere specimen pair: the reference is a ball of radius `radius` voxels,
/// the floating specimen the same texture shrunk about the centre so its
/// surface lies `shrink` voxels inside.
pub fn sphere_pair(dims: [usize; 3], radius: f64, shrink: f64, seed: u64) -> Result<PhantomCase> {
    let grid = Grid::new(dims, [1.0; 3], [0.0; 3])?;
    let ext = grid.extent();
    let centre = (ext.min + ext.max) / 2.0;
    let (reference, reference_mask) = textured_sphere(&grid, centre, radius, seed)?;
    // Floating point y shows reference content at c + (y − c)·radius/(radius − shrink).
    let s = radius / (radius - shrink);
    let shrink_map = AffineTransform::new(crate::Mat3::identity() * s, centre * (1.0 - s))?;
    let floating =
        resample_with_transform(&reference, &Deformation::affine(shrink_map), &grid, AIR_HU)?;
    let floating_mask =
        BinaryMask::from_fn(grid.clone(), |i, j, k| (grid.point(i, j, k) - centre).norm() <= radius - shrink);
    Ok(PhantomCase {
        reference,
        floating,
        reference_mask: morphology(&reference_mask, MorphOp::Dilate, 2)?,
        floating_mask: morphology(&floating_mask, MorphOp::Dilate, 2)?,
        reference_object: reference_mask,
        floating_object: floating_mask,
        truth: None,
    })
}

/// Endpoint errors `‖recovered(x) − (x + truth(x))‖` over mask voxels, in mm.
/// Returns `(mean, max)`.
pub fn endpoint_error(truth: &ControlLattice, recovered: &Deformation, mask: &BinaryMask) -> Result<(f64, f64)> {
    let grid = mask.grid();
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    let mut n = 0usize;
    for (lin, &on) in mask.bits().iter().enumerate() {
        if !on {
            continue;
        }
        let x = grid.point_linear(lin);
        let expected = x + truth.displacement(&x)?;
        let got = recovered
            .apply(&x)
            .ok_or(crate::Error::InsufficientLattice([x[0], x[1], x[2]]))?;
        let e = (got - expected).norm();
        sum += e;
        max = max.max(e);
        n += 1;
    }
    if n == 0 {
        return Err(crate::Error::EmptyMask);
    }
    Ok((sum / n as f64, max))
}
