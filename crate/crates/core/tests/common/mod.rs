//! Shared fixtures and independent oracles for the integration tests and the
//! acceptance harness.
#![allow(dead_code)]

use lungfuse::penalty::{inverse_consistency, LatticePenalty};
use lungfuse::phantom::warped_lung;
use lungfuse::similarity::{joint_histogram, nmi, nmi_gradient, IntensityWindow, SimilarityConfig};
use lungfuse::transform::{AffineTransform, ControlLattice, Deformation};
use lungfuse::volume::Grid;
use lungfuse::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PERTURBATIONS: usize = 20;

pub fn random_vecs(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<Vec3> {
    (0..n)
        .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * scale)
        .collect()
}

pub fn axpy(a: &[Vec3], s: f64, v: &[Vec3]) -> Vec<Vec3> {
    a.iter().zip(v).map(|(x, y)| x + y * s).collect()
}

pub fn dot(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(analytic.abs()).max(1e-300)
}

fn small_domain() -> (ControlLattice, Grid) {
    let grid = Grid::new([12, 11, 10], [1.0, 1.1, 0.9], [0.0; 3]).unwrap();
    let lattice = ControlLattice::covering(&grid.extent(), [3.0, 3.0, 3.0]).unwrap();
    (lattice, grid)
}

/// Worst relative error of the bending-energy gradient along random
/// directions at random lattices.
pub fn bending_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lattice, grid) = small_domain();
    let pen = LatticePenalty::new(&lattice, &grid).unwrap();
    (0..PERTURBATIONS)
        .map(|_| {
            let phi = random_vecs(&mut rng, lattice.len(), 0.5);
            let dir = random_vecs(&mut rng, lattice.len(), 1.0);
            let g = pen.bending_with_gradient(&phi).gradient;
            let h = 1e-4;
            let fd = (pen.bending(&axpy(&phi, h, &dir)) - pen.bending(&axpy(&phi, -h, &dir))) / (2.0 * h);
            rel_err(dot(&g, &dir), fd)
        })
        .fold(0.0, f64::max)
}

pub fn volume_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lattice, grid) = small_domain();
    let pen = LatticePenalty::new(&lattice, &grid).unwrap();
    let f = |c: &[Vec3]| pen.volume_preservation(c).unwrap();
    (0..PERTURBATIONS)
        .map(|_| {
            let phi = random_vecs(&mut rng, lattice.len(), 0.3);
            let dir = random_vecs(&mut rng, lattice.len(), 1.0);
            let g = pen.volume_preservation_with_gradient(&phi).unwrap().gradient;
            let h = 1e-5;
            let fd = (f(&axpy(&phi, h, &dir)) - f(&axpy(&phi, -h, &dir))) / (2.0 * h);
            rel_err(dot(&g, &dir), fd)
        })
        .fold(0.0, f64::max)
}

pub fn consistency_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lattice, grid) = small_domain();
    let fwd_affine = AffineTransform::from_translation(Vec3::new(0.2, -0.1, 0.05));
    let bwd_affine = fwd_affine.inverse();
    let value = |a: &[Vec3], b: &[Vec3]| {
        let f = Deformation::new(fwd_affine, lattice.with_coefficients(a.to_vec()));
        let bk = Deformation::new(bwd_affine, lattice.with_coefficients(b.to_vec()));
        inverse_consistency(&f, &bk, &grid, &grid).unwrap()
    };
    (0..PERTURBATIONS)
        .map(|_| {
            let pf = random_vecs(&mut rng, lattice.len(), 0.3);
            let pb = random_vecs(&mut rng, lattice.len(), 0.3);
            let df = random_vecs(&mut rng, lattice.len(), 1.0);
            let db = random_vecs(&mut rng, lattice.len(), 1.0);
            let v = value(&pf, &pb);
            let h = 1e-5;
            let fd = (value(&axpy(&pf, h, &df), &axpy(&pb, h, &db)).value
                - value(&axpy(&pf, -h, &df), &axpy(&pb, -h, &db)).value)
                / (2.0 * h);
            rel_err(dot(&v.grad_forward, &df) + dot(&v.grad_backward, &db), fd)
        })
        .fold(0.0, f64::max)
}

/// NMI gradient on a 32³ lung phantom with a 5 mm lattice. Windows enclose
/// every intensity so no sample crosses a window edge inside the stencil;
/// trilinear interpolation has gradient jumps on voxel faces, so the central
/// difference converges only linearly and needs a small step.
pub fn nmi_gradient_error(seed: u64) -> f64 {
    let case = warped_lung([32, 32, 32], 2.0, 7).unwrap();
    let grid = case.reference.grid().clone();
    let lattice = ControlLattice::covering(&grid.extent(), [5.0; 3]).unwrap();
    let cfg = SimilarityConfig::default();
    let (lo, hi) = case.floating.min_max();
    let w = IntensityWindow::new(lo - 1.0, hi + 1.0).unwrap();
    let windows = Some([w, w]);
    let at = |c: Vec<Vec3>| Deformation::new(AffineTransform::identity(), lattice.with_coefficients(c));
    let value = |c: Vec<Vec3>| {
        let h = joint_histogram(&case.reference, &case.floating, &at(c), &case.reference_mask, &cfg, windows).unwrap();
        nmi(&h).unwrap().value
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..PERTURBATIONS)
        .map(|_| {
            let phi = random_vecs(&mut rng, lattice.len(), 0.8);
            let dir = random_vecs(&mut rng, lattice.len(), 1.0);
            let g = nmi_gradient(&case.reference, &case.floating, &at(phi.clone()), &case.reference_mask, &cfg, windows)
                .unwrap();
            let h = 1e-6;
            let fd = (value(axpy(&phi, h, &dir)) - value(axpy(&phi, -h, &dir))) / (2.0 * h);
            rel_err(dot(&g, &dir), fd)
        })
        .fold(0.0, f64::max)
}

/// Average ranks (1-based) with ties sharing the mean rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .map(|v| {
            let below = values.iter().filter(|w| *w < v).count() as f64;
            let equal = values.iter().filter(|w| *w == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

/// Two-sided signed-rank p-value by enumerating all 2^n sign patterns of the
/// non-zero differences.
pub fn signed_rank_enumeration(before: &[f64], after: &[f64]) -> f64 {
    let d: Vec<f64> = before.iter().zip(after).map(|(b, a)| b - a).filter(|x| *x != 0.0).collect();
    let n = d.len();
    let r = ranks(&d.iter().map(|x| x.abs()).collect::<Vec<_>>());
    let observed: f64 = d.iter().zip(&r).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let (mut le, mut ge) = (0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| r[i]).sum();
        if w <= observed + 1e-9 {
            le += 1;
        }
        if w >= observed - 1e-9 {
            ge += 1;
        }
    }
    let total = (1u64 << n) as f64;
    (2.0 * (le.min(ge) as f64) / total).min(1.0)
}

/// Mean of nearest-neighbour distances from each point of `a` to `b`, by
/// exhaustive search.
pub fn brute_force_distances(a: &[Vec3], b: &[Vec3]) -> Vec<f64> {
    a.iter()
        .map(|p| b.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min))
        .collect()
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<Vec3> {
    random_vecs(rng, n, scale)
}

/// True if every accepted-step trace is non-decreasing.
pub fn traces_monotone(traces: &[Vec<lungfuse::optimizer::TraceEntry>]) -> bool {
    traces.iter().all(|t| t.windows(2).all(|w| w[1].total >= w[0].total))
}
