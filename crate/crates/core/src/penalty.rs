//! Regularisers of the registration objective and the folding repair.
//!
//! All terms are sampled at the voxel centres of a regular grid (the mask's
//! bounding box at the current pyramid level) and come with analytic
//! gradients with respect to the lattice coefficients.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transform::{ControlLattice, Deformation, Deriv, GridBasis};
use crate::volume::Grid;
use crate::{Mat3, Vec3};

const CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PenaltyReport {
    pub bending: f64,
    pub volpres: f64,
    pub inconsistency: f64,
    pub sample_count: usize,
}

/// `(derivative orders, weight)` of the six distinct second-derivative terms;
/// mixed terms appear twice in the Hessian and are weighted accordingly.
const BENDING_TERMS: [([Deriv; 3], f64); 6] = {
    use Deriv::{First as F, Second as S, Value as V};
    [
        ([S, V, V], 1.0),
        ([V, S, V], 1.0),
        ([V, V, S], 1.0),
        ([F, F, V], 2.0),
        ([F, V, F], 2.0),
        ([V, F, F], 2.0),
    ]
};

const FIRST_DERIVS: [[Deriv; 3]; 3] = {
    use Deriv::{First as F, Value as V};
    [[F, V, V], [V, F, V], [V, V, F]]
};

/// Value and gradient of a lattice penalty.
#[derive(Clone, Debug)]
pub struct PenaltyValue {
    pub value: f64,
    pub gradient: Vec<Vec3>,
}

/// Per-lattice penalties with the B-spline basis tables precomputed for one
/// sample grid. Coefficient vectors passed in must match the lattice layout.
#[derive(Clone, Debug)]
pub struct LatticePenalty {
    basis: GridBasis,
}

/// Jacobians `I + ∂D` stored as their three columns.
fn jacobian_columns(basis: &GridBasis, coefficients: &[Vec3]) -> [Vec<Vec3>; 3] {
    let mut cols = basis.first_derivatives(coefficients);
    for c in 0..3 {
        cols[c].par_iter_mut().for_each(|v| v[c] += 1.0);
    }
    cols
}

#[inline]
fn det_columns(c0: &Vec3, c1: &Vec3, c2: &Vec3) -> f64 {
    c0.dot(&c1.cross(c2))
}

impl LatticePenalty {
    pub fn new(lattice: &ControlLattice, domain: &Grid) -> Result<Self> {
        Ok(LatticePenalty {
            basis: GridBasis::new(lattice, domain)?,
        })
    }

    pub fn from_basis(basis: GridBasis) -> Self {
        LatticePenalty { basis }
    }

    pub fn basis(&self) -> &GridBasis {
        &self.basis
    }

    pub fn sample_count(&self) -> usize {
        self.basis.grid().len()
    }

    /// Mean over the samples of the squared second derivatives of the
    /// displacement, mixed terms doubled.
    pub fn bending(&self, coefficients: &[Vec3]) -> f64 {
        let n = self.sample_count() as f64;
        BENDING_TERMS
            .iter()
            .map(|(d, w)| {
                let f = self.basis.eval(coefficients, *d);
                w * f.iter().map(|v| v.norm_squared()).sum::<f64>()
            })
            .sum::<f64>()
            / n
    }

    pub fn bending_with_gradient(&self, coefficients: &[Vec3]) -> PenaltyValue {
        let n = self.sample_count() as f64;
        let mut value = 0.0;
        let mut gradient = vec![Vec3::zeros(); self.basis.lattice_len()];
        for (d, w) in BENDING_TERMS {
            let mut f = self.basis.eval(coefficients, d);
            value += w * f.iter().map(|v| v.norm_squared()).sum::<f64>();
            let scale = 2.0 * w / n;
            f.iter_mut().for_each(|v| *v *= scale);
            self.basis.adjoint_add(&f, d, &mut gradient);
        }
        PenaltyValue {
            value: value / n,
            gradient,
        }
    }

    /// Determinants of `I + ∂D` at every sample.
    pub fn determinants(&self, coefficients: &[Vec3]) -> Vec<f64> {
        let [c0, c1, c2] = jacobian_columns(&self.basis, coefficients);
        (0..c0.len())
            .into_par_iter()
            .map(|n| det_columns(&c0[n], &c1[n], &c2[n]))
            .collect()
    }

    /// Mean squared log-determinant of `I + ∂D`. Errors on any det ≤ 0.
    pub fn volume_preservation(&self, coefficients: &[Vec3]) -> Result<f64> {
        let dets = self.determinants(coefficients);
        let bad = dets.iter().filter(|&&d| !(d > 0.0)).count();
        if bad > 0 {
            return Err(Error::NonPositiveJacobian { count: bad });
        }
        Ok(dets.iter().map(|d| d.ln().powi(2)).sum::<f64>() / dets.len() as f64)
    }

    pub fn volume_preservation_with_gradient(&self, coefficients: &[Vec3]) -> Result<PenaltyValue> {
        let cols = jacobian_columns(&self.basis, coefficients);
        let n = cols[0].len();
        let mut dets = vec![0.0; n];
        dets.par_iter_mut()
            .enumerate()
            .for_each(|(p, d)| *d = det_columns(&cols[0][p], &cols[1][p], &cols[2][p]));
        let bad = dets.iter().filter(|&&d| !(d > 0.0)).count();
        if bad > 0 {
            return Err(Error::NonPositiveJacobian { count: bad });
        }
        let value = dets.iter().map(|d| d.ln().powi(2)).sum::<f64>() / n as f64;
        // ∂ det / ∂ column a = column (a+1) × column (a+2).
        let mut gradient = vec![Vec3::zeros(); self.basis.lattice_len()];
        for a in 0..3 {
            let (b, c) = ((a + 1) % 3, (a + 2) % 3);
            let field: Vec<Vec3> = (0..n)
                .into_par_iter()
                .map(|p| {
                    let s = 2.0 * dets[p].ln() / (dets[p] * n as f64);
                    cols[b][p].cross(&cols[c][p]) * s
                })
                .collect();
            self.basis.adjoint_add(&field, FIRST_DERIVS[a], &mut gradient);
        }
        Ok(PenaltyValue { value, gradient })
    }
}

pub fn bending_energy(lattice: &ControlLattice, domain: &Grid) -> Result<PenaltyValue> {
    Ok(LatticePenalty::new(lattice, domain)?.bending_with_gradient(lattice.coefficients()))
}

pub fn volume_preservation(lattice: &ControlLattice, domain: &Grid) -> Result<PenaltyValue> {
    LatticePenalty::new(lattice, domain)?.volume_preservation_with_gradient(lattice.coefficients())
}

/// Inverse-consistency value and gradients for both lattices.
#[derive(Clone, Debug)]
pub struct ConsistencyValue {
    /// Sum of squared round-trip residuals over both domains.
    pub value: f64,
    /// Per-domain in-domain sample counts `[forward domain, backward domain]`.
    pub samples: [usize; 2],
    pub skipped: usize,
    /// Gradient of `value` for the forward and backward lattices (empty when
    /// the corresponding transform has no lattice or gradients were not asked for).
    pub grad_forward: Vec<Vec3>,
    pub grad_backward: Vec<Vec3>,
}

/// Per-domain partial sums, kept separate so callers can normalise each
/// domain by its own sample count.
#[derive(Clone, Debug)]
pub struct ConsistencyParts {
    pub sums: [f64; 2],
    pub samples: [usize; 2],
    pub skipped: usize,
    pub grad_forward: [Vec<Vec3>; 2],
    pub grad_backward: [Vec<Vec3>; 2],
}

impl ConsistencyParts {
    pub fn value(&self) -> f64 {
        self.sums[0] + self.sums[1]
    }

    /// Sum of per-domain means; a domain without samples contributes 0.
    pub fn mean(&self) -> f64 {
        (0..2)
            .filter(|&d| self.samples[d] > 0)
            .map(|d| self.sums[d] / self.samples[d] as f64)
            .sum()
    }

    /// Weights `[w0, w1]` applied to the two domains' gradients, summed.
    pub fn combined_gradients(&self, weights: [f64; 2]) -> (Vec<Vec3>, Vec<Vec3>) {
        let combine = |g: &[Vec<Vec3>; 2]| -> Vec<Vec3> {
            if g[0].is_empty() {
                return g[1].iter().map(|v| v * weights[1]).collect();
            }
            if g[1].is_empty() {
                return g[0].iter().map(|v| v * weights[0]).collect();
            }
            g[0].iter().zip(&g[1]).map(|(a, b)| a * weights[0] + b * weights[1]).collect()
        };
        (combine(&self.grad_forward), combine(&self.grad_backward))
    }

    /// Weights that turn the summed gradients into gradients of [`Self::mean`].
    pub fn mean_weights(&self) -> [f64; 2] {
        self.samples.map(|n| if n > 0 { 1.0 / n as f64 } else { 0.0 })
    }
}

/// Residual sum over one domain: `Σ_x ‖outer(inner(x)) − x‖²`, with gradients
/// for the inner lattice (as a force field on `grid`, pulled back through its
/// basis) and the outer lattice (scattered at the intermediate points).
struct DomainPass<'a> {
    inner: &'a Deformation,
    inner_field: Option<&'a [Vec3]>,
    inner_basis: Option<&'a GridBasis>,
    outer: &'a Deformation,
    grid: &'a Grid,
}

struct PassOut {
    sum: f64,
    samples: usize,
    skipped: usize,
    grad_inner: Vec<Vec3>,
    grad_outer: Vec<Vec3>,
}

impl DomainPass<'_> {
    fn run(&self, with_gradient: bool) -> Result<PassOut> {
        let n = self.grid.len();
        let outer_len = self.outer.lattice.as_ref().map_or(0, |l| l.len());
        let outer_affine = *self.outer.affine.matrix();

        struct ChunkOut {
            sum: f64,
            samples: usize,
            skipped: usize,
            force: Vec<(usize, Vec3)>,
            grad_outer: Vec<Vec3>,
        }

        let indices: Vec<usize> = (0..n).collect();
        let chunks: Vec<ChunkOut> = indices
            .par_chunks(CHUNK)
            .map(|idx| {
                let mut out = ChunkOut {
                    sum: 0.0,
                    samples: 0,
                    skipped: 0,
                    force: Vec::new(),
                    grad_outer: if with_gradient { vec![Vec3::zeros(); outer_len] } else { Vec::new() },
                };
                for &lin in idx {
                    let x = self.grid.point_linear(lin);
                    let mut y = self.inner.affine.apply(&x);
                    match (self.inner_field, &self.inner.lattice) {
                        (Some(f), _) => y += f[lin],
                        (None, Some(l)) => match l.try_displacement(&x) {
                            Some(d) => y += d,
                            None => {
                                out.skipped += 1;
                                continue;
                            }
                        },
                        (None, None) => {}
                    }
                    let (z, jac_outer) = match &self.outer.lattice {
                        Some(l) => match l.try_displacement_and_gradient(&y) {
                            Some((d, g)) => (self.outer.affine.apply(&y) + d, outer_affine + g),
                            None => {
                                out.skipped += 1;
                                continue;
                            }
                        },
                        None => (self.outer.affine.apply(&y), outer_affine),
                    };
                    let r = z - x;
                    out.sum += r.norm_squared();
                    out.samples += 1;
                    if with_gradient {
                        if let Some(l) = &self.outer.lattice {
                            l.scatter(&y, &(r * 2.0), &mut out.grad_outer);
                        }
                        if self.inner.lattice.is_some() {
                            out.force.push((lin, jac_outer.transpose() * r * 2.0));
                        }
                    }
                }
                out
            })
            .collect();

        let mut total = PassOut {
            sum: 0.0,
            samples: 0,
            skipped: 0,
            grad_inner: Vec::new(),
            grad_outer: if with_gradient { vec![Vec3::zeros(); outer_len] } else { Vec::new() },
        };
        let mut force = if with_gradient && self.inner.lattice.is_some() {
            vec![Vec3::zeros(); n]
        } else {
            Vec::new()
        };
        for c in chunks {
            total.sum += c.sum;
            total.samples += c.samples;
            total.skipped += c.skipped;
            for (a, b) in total.grad_outer.iter_mut().zip(&c.grad_outer) {
                *a += b;
            }
            for (lin, f) in c.force {
                force[lin] = f;
            }
        }
        if with_gradient {
            if let Some(l) = &self.inner.lattice {
                let owned;
                let basis = match self.inner_basis {
                    Some(b) => b,
                    None => {
                        owned = GridBasis::new(l, self.grid)?;
                        &owned
                    }
                };
                total.grad_inner = vec![Vec3::zeros(); l.len()];
                basis.adjoint_add(&force, [Deriv::Value; 3], &mut total.grad_inner);
            }
        }
        Ok(total)
    }
}

/// Precomputed inputs for repeated inverse-consistency evaluation: the
/// forward transform's domain grid (reference side) and the backward
/// transform's domain grid (floating side), with optional basis tables.
pub struct ConsistencyDomains<'a> {
    pub forward_grid: &'a Grid,
    pub backward_grid: &'a Grid,
    pub forward_basis: Option<&'a GridBasis>,
    pub backward_basis: Option<&'a GridBasis>,
}

/// `Σ_{x ∈ Ω_f} ‖b(f(x)) − x‖²` and `Σ_{y ∈ Ω_b} ‖f(b(y)) − y‖²` with their
/// gradients. Round trips leaving a lattice domain are skipped; more than
/// half skipped is reported as gross misalignment.
pub fn inverse_consistency_parts(
    forward: &Deformation,
    backward: &Deformation,
    domains: &ConsistencyDomains<'_>,
    fields: [Option<&[Vec3]>; 2],
    with_gradient: bool,
) -> Result<ConsistencyParts> {
    let p0 = DomainPass {
        inner: forward,
        inner_field: fields[0],
        inner_basis: domains.forward_basis,
        outer: backward,
        grid: domains.forward_grid,
    }
    .run(with_gradient)?;
    let p1 = DomainPass {
        inner: backward,
        inner_field: fields[1],
        inner_basis: domains.backward_basis,
        outer: forward,
        grid: domains.backward_grid,
    }
    .run(with_gradient)?;
    let total = domains.forward_grid.len() + domains.backward_grid.len();
    let skipped = p0.skipped + p1.skipped;
    if 2 * skipped > total {
        return Err(Error::GrossMisalignment {
            out_of_domain: skipped,
            total,
        });
    }
    Ok(ConsistencyParts {
        sums: [p0.sum, p1.sum],
        samples: [p0.samples, p1.samples],
        skipped,
        grad_forward: [p0.grad_inner, p1.grad_outer],
        grad_backward: [p0.grad_outer, p1.grad_inner],
    })
}

/// Summed inverse-consistency residual over both domains with gradients.
pub fn inverse_consistency(
    forward: &Deformation,
    backward: &Deformation,
    forward_grid: &Grid,
    backward_grid: &Grid,
) -> Result<ConsistencyValue> {
    let domains = ConsistencyDomains {
        forward_grid,
        backward_grid,
        forward_basis: None,
        backward_basis: None,
    };
    let parts = inverse_consistency_parts(forward, backward, &domains, [None, None], true)?;
    let (grad_forward, grad_backward) = parts.combined_gradients([1.0, 1.0]);
    Ok(ConsistencyValue {
        value: parts.value(),
        samples: parts.samples,
        skipped: parts.skipped,
        grad_forward,
        grad_backward,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FoldingParams {
    /// Determinants at or below this count as folded.
    pub epsilon: f64,
    /// Once repair fires it aims for every determinant to reach this value,
    /// which keeps the field positive between samples as well.
    pub margin: f64,
    pub max_iters: usize,
}

impl Default for FoldingParams {
    fn default() -> Self {
        FoldingParams {
            epsilon: 1e-6,
            margin: 0.1,
            max_iters: 50,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FoldingReport {
    pub iterations: usize,
    /// Sample points whose determinant was ≤ epsilon before repair.
    pub corrected_points: Vec<[f64; 3]>,
    pub min_det_before: f64,
    pub min_det_after: f64,
}

impl FoldingReport {
    pub fn fired(&self) -> bool {
        !self.corrected_points.is_empty()
    }
}

struct FoldState {
    dets: Vec<f64>,
    nonpositive: usize,
    deficit: f64,
}

fn fold_state(basis: &GridBasis, coefficients: &[Vec3], p: &FoldingParams) -> (FoldState, [Vec<Vec3>; 3]) {
    let cols = jacobian_columns(basis, coefficients);
    let dets: Vec<f64> = (0..cols[0].len())
        .into_par_iter()
        .map(|n| det_columns(&cols[0][n], &cols[1][n], &cols[2][n]))
        .collect();
    let nonpositive = dets.iter().filter(|&&d| d <= p.epsilon).count();
    let deficit = dets.iter().map(|&d| (p.margin - d).max(0.0).powi(2)).sum();
    (
        FoldState {
            dets,
            nonpositive,
            deficit,
        },
        cols,
    )
}

fn min_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Repairs sampled folds. When any determinant of `I + ∂D` on `domain` is at
/// or below `epsilon`, control points are moved along the descent direction
/// of `Σ max(0, margin − det)²` with a backtracking step, never accepting a
/// step that increases the number of folded samples. An unfolded lattice is
/// returned unchanged.
pub fn correct_folding_with(
    lattice: &ControlLattice,
    domain: &Grid,
    params: &FoldingParams,
) -> Result<(ControlLattice, FoldingReport)> {
    let basis = GridBasis::new(lattice, domain)?;
    correct_folding_on(lattice, &basis, params)
}

pub fn correct_folding(lattice: &ControlLattice, domain: &Grid) -> Result<(ControlLattice, FoldingReport)> {
    correct_folding_with(lattice, domain, &FoldingParams::default())
}

/// As [`correct_folding_with`] with precomputed basis tables.
pub fn correct_folding_on(
    lattice: &ControlLattice,
    basis: &GridBasis,
    params: &FoldingParams,
) -> Result<(ControlLattice, FoldingReport)> {
    let grid = basis.grid();
    let (mut state, mut cols) = fold_state(basis, lattice.coefficients(), params);
    let mut report = FoldingReport {
        min_det_before: min_of(&state.dets),
        ..Default::default()
    };
    if state.nonpositive == 0 {
        report.min_det_after = report.min_det_before;
        return Ok((lattice.clone(), report));
    }
    report.corrected_points = state
        .dets
        .iter()
        .enumerate()
        .filter(|(_, &d)| d <= params.epsilon)
        .map(|(n, _)| grid.point_linear(n).into())
        .collect();

    let min_spacing = lattice.spacing().iter().copied().fold(f64::INFINITY, f64::min);
    let mut coeffs = lattice.coefficients().to_vec();
    let mut step = 0.25 * min_spacing;
    while report.iterations < params.max_iters && state.deficit > 0.0 {
        report.iterations += 1;
        // Gradient of the deficit: −2 (margin − det) ∂det/∂φ.
        let mut grad = vec![Vec3::zeros(); coeffs.len()];
        for a in 0..3 {
            let (b, c) = ((a + 1) % 3, (a + 2) % 3);
            let field: Vec<Vec3> = (0..state.dets.len())
                .into_par_iter()
                .map(|n| {
                    let short = (params.margin - state.dets[n]).max(0.0);
                    if short == 0.0 {
                        Vec3::zeros()
                    } else {
                        cols[b][n].cross(&cols[c][n]) * (-2.0 * short)
                    }
                })
                .collect();
            basis.adjoint_add(&field, FIRST_DERIVS[a], &mut grad);
        }
        let gmax = grad.iter().map(|g| g.norm()).fold(0.0, f64::max);
        if !(gmax > 0.0) {
            break;
        }
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<Vec3> = coeffs.iter().zip(&grad).map(|(c, g)| c - g * (step / gmax)).collect();
            let (s, cl) = fold_state(basis, &trial, params);
            if s.nonpositive <= state.nonpositive && s.deficit < state.deficit {
                coeffs = trial;
                state = s;
                cols = cl;
                accepted = true;
                step = (step * 1.5).min(min_spacing);
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    report.min_det_after = min_of(&state.dets);
    if state.nonpositive > 0 {
        let locations = state
            .dets
            .iter()
            .enumerate()
            .filter(|(_, &d)| d <= params.epsilon)
            .map(|(n, _)| grid.point_linear(n).into())
            .collect();
        return Err(Error::FoldingNotRepaired {
            iterations: report.iterations,
            locations,
        });
    }
    Ok((lattice.with_coefficients(coeffs), report))
}

/// Dense-sampled minimum determinant of `I + ∂D` on `domain` refined by
/// `factor` along each axis.
pub fn min_determinant(lattice: &ControlLattice, domain: &Grid, factor: usize) -> Result<f64> {
    let f = factor.max(1);
    let dims = domain.dims.map(|d| (d - 1) * f + 1);
    let spacing = [0, 1, 2].map(|a| domain.spacing[a] / f as f64);
    let dense = Grid::new(dims, spacing, domain.origin)?;
    let basis = GridBasis::new(lattice, &dense)?;
    let (s, _) = fold_state(&basis, lattice.coefficients(), &FoldingParams::default());
    Ok(min_of(&s.dets))
}

/// Determinant of `I + ∂D` at one point.
pub fn jacobian_determinant(lattice: &ControlLattice, x: &Vec3) -> Result<f64> {
    let j: Mat3 = lattice.jacobian(x)?;
    Ok(j.determinant())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::AffineTransform;

    fn lattice(dims: [usize; 3]) -> ControlLattice {
        ControlLattice::zeros(dims, [4.0; 3], [-4.0; 3]).unwrap()
    }

    fn domain() -> Grid {
        Grid::new([9, 9, 9], [1.0; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn zero_lattice_penalties_vanish() {
        let l = lattice([6, 6, 6]);
        let p = LatticePenalty::new(&l, &domain()).unwrap();
        assert_eq!(p.bending(l.coefficients()), 0.0);
        assert_eq!(p.volume_preservation(l.coefficients()).unwrap(), 0.0);
    }

    #[test]
    fn ramp_has_no_bending() {
        let base = lattice([6, 6, 6]);
        let l = ControlLattice::from_fn([6, 6, 6], [4.0; 3], [-4.0; 3], |p| {
            Vec3::new(0.1 * p[0] + 0.05 * p[2], 2.0, -0.02 * p[1])
        })
        .unwrap();
        let p = LatticePenalty::new(&base, &domain()).unwrap();
        assert!(p.bending(l.coefficients()).abs() < 1e-10);
    }

    #[test]
    fn uniform_expansion_volpres() {
        // D(x) = s x with (1 + s)³ = 2.
        let s = 2f64.cbrt() - 1.0;
        let l = ControlLattice::from_fn([6, 6, 6], [4.0; 3], [-4.0; 3], |p| p * s).unwrap();
        let p = LatticePenalty::new(&l, &domain()).unwrap();
        let v = p.volume_preservation(l.coefficients()).unwrap();
        assert!((v - 2f64.ln().powi(2)).abs() < 1e-9);
    }

    #[test]
    fn translation_consistency_sum() {
        let g = domain();
        let t = Vec3::new(0.3, -0.2, 0.1);
        let f = Deformation::affine(AffineTransform::from_translation(t));
        let b = Deformation::identity();
        let v = inverse_consistency(&f, &b, &g, &g).unwrap();
        assert!((v.value - 2.0 * g.len() as f64 * t.norm_squared()).abs() < 1e-9);
        let inv = Deformation::affine(AffineTransform::from_translation(-t));
        assert!(inverse_consistency(&f, &inv, &g, &g).unwrap().value < 1e-20);
    }

    #[test]
    fn unfolded_lattice_is_untouched() {
        let l = ControlLattice::from_fn([6, 6, 6], [4.0; 3], [-4.0; 3], |p| Vec3::new(0.01 * p[1], 0.0, 0.0))
            .unwrap();
        let (out, report) = correct_folding(&l, &domain()).unwrap();
        assert_eq!(out, l);
        assert!(!report.fired());
    }
}
