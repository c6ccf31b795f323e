//! The weighted registration objective and its coarse-to-fine optimisation.
//!
//! Each direction (forward: reference → floating, backward: floating →
//! reference) contributes `w_s·S − α·C_smooth − β·C_volpres`, and the shared
//! inverse-consistency term `γ·C_inconsistency` ties the two lattices
//! together. Both lattices are improved jointly by gradient ascent with a
//! backtracking line search; only improving steps are accepted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::penalty::{
    correct_folding_on, inverse_consistency_parts, ConsistencyDomains, FoldingParams, LatticePenalty,
    PenaltyReport,
};
use crate::similarity::{IntensityWindow, MaskMode, ParzenMode, SimilarityConfig, SimilarityTerm};
use crate::transform::{AffineTransform, ControlLattice, Deformation, GridBasis};
use crate::volume::{build_pyramid, Aabb, PyramidLevel, Volume};
use crate::Vec3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LineSearch {
    /// Trial steps per iteration before giving up.
    pub max_trials: usize,
    pub shrink_factor: f64,
    /// Step growth after an accepted step.
    pub grow_factor: f64,
    /// First step length, in voxels of the current level.
    pub initial_step_voxels: f64,
}

impl Default for LineSearch {
    fn default() -> Self {
        LineSearch {
            max_trials: 8,
            shrink_factor: 0.5,
            grow_factor: 1.5,
            initial_step_voxels: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub bins: usize,
    pub levels: usize,
    pub max_iters_per_level: usize,
    pub final_cp_spacing_voxels: f64,
    pub convergence_tol: f64,
    pub line_search: LineSearch,
    /// Optimise the backward lattice with its own similarity and smoothness
    /// terms; when false it only follows the inverse-consistency term.
    pub symmetric: bool,
    pub parzen: ParzenMode,
    pub mask_mode: MaskMode,
    pub min_samples: usize,
    pub folding: FoldingParams,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            alpha: 1e-4,
            beta: 1e-12,
            gamma: 0.1,
            bins: 64,
            levels: 4,
            max_iters_per_level: 500,
            final_cp_spacing_voxels: 5.0,
            convergence_tol: 1e-6,
            line_search: LineSearch::default(),
            symmetric: true,
            parzen: ParzenMode::Cubic,
            mask_mode: MaskMode::Reference,
            min_samples: 1000,
            folding: FoldingParams::default(),
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)];
        for (name, v) in w {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        let sum = self.alpha + self.beta + self.gamma;
        if !(sum < 1.0) {
            return Err(Error::Config(format!(
                "alpha + beta + gamma = {sum} must be < 1 so the similarity weight 1 - alpha - beta - gamma stays positive"
            )));
        }
        if self.levels == 0 {
            return Err(Error::Config("levels must be >= 1".into()));
        }
        if !(self.final_cp_spacing_voxels > 0.0) {
            return Err(Error::Config("final_cp_spacing_voxels must be > 0".into()));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::Config("convergence_tol must be >= 0".into()));
        }
        let ls = &self.line_search;
        if ls.max_trials == 0 || !(ls.shrink_factor > 0.0 && ls.shrink_factor < 1.0) {
            return Err(Error::Config(
                "line_search needs max_trials >= 1 and 0 < shrink_factor < 1".into(),
            ));
        }
        if !(ls.grow_factor >= 1.0) || !(ls.initial_step_voxels > 0.0) {
            return Err(Error::Config(
                "line_search needs grow_factor >= 1 and initial_step_voxels > 0".into(),
            ));
        }
        self.similarity_config().validate()
    }

    /// `1 − α − β − γ`.
    pub fn similarity_weight(&self) -> f64 {
        1.0 - self.alpha - self.beta - self.gamma
    }

    pub fn similarity_config(&self) -> SimilarityConfig {
        SimilarityConfig {
            bins: self.bins,
            parzen: self.parzen,
            window_policy: crate::similarity::WindowPolicy::Exclude,
            min_samples: self.min_samples,
            mask_mode: self.mask_mode,
        }
    }

    /// `w_s·S − α·bending − β·volpres − γ·inconsistency`.
    pub fn weighted_total(&self, similarity: f64, bending: f64, volpres: f64, inconsistency: f64) -> f64 {
        self.similarity_weight() * similarity - self.alpha * bending - self.beta * volpres
            - self.gamma * inconsistency
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveComponents {
    pub similarity: f64,
    pub bending: f64,
    pub volpres: f64,
    pub inconsistency: f64,
    pub total: f64,
}

/// One accepted iterate. Penalties are summed over both lattices; `total`
/// is the jointly optimised objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub similarity_forward: f64,
    pub similarity_backward: f64,
    pub bending: f64,
    pub volpres: f64,
    pub inconsistency: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelStatus {
    /// Relative improvement stayed below tolerance for five accepted steps.
    Converged,
    MaxIterations,
    /// No improving step within the trial budget.
    LineSearchExhausted,
    /// Zero gradient at the starting point.
    Stationary,
    /// Too few masked samples at this resolution; lattices passed through.
    Skipped,
}

impl LevelStatus {
    pub fn is_converged(self) -> bool {
        matches!(self, LevelStatus::Converged | LevelStatus::LineSearchExhausted | LevelStatus::Stationary)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelOutcome {
    pub forward: ControlLattice,
    pub backward: ControlLattice,
    pub trace: Vec<TraceEntry>,
    pub status: LevelStatus,
    pub penalties: PenaltyReport,
    /// Trial lattices that needed folding repair.
    pub folding_repairs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationResult {
    pub affine: AffineTransform,
    pub forward_lattices: Vec<ControlLattice>,
    pub backward_lattices: Vec<ControlLattice>,
    pub objective_trace: Vec<Vec<TraceEntry>>,
    pub converged_levels: Vec<bool>,
    pub level_status: Vec<LevelStatus>,
    pub level_spacing: Vec<[f64; 3]>,
    pub penalties: Vec<PenaltyReport>,
}

impl RegistrationResult {
    /// Final forward transform (reference → floating).
    pub fn forward(&self) -> Deformation {
        match self.forward_lattices.last() {
            Some(l) => Deformation::new(self.affine, l.clone()),
            None => Deformation::affine(self.affine),
        }
    }

    /// Final backward transform (floating → reference).
    pub fn backward(&self) -> Deformation {
        let inv = self.affine.inverse();
        match self.backward_lattices.last() {
            Some(l) => Deformation::new(inv, l.clone()),
            None => Deformation::affine(inv),
        }
    }
}

impl serde::Serialize for RegistrationResult {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("RegistrationResult", 6)?;
        st.serialize_field("affine", &self.affine)?;
        st.serialize_field("converged_levels", &self.converged_levels)?;
        st.serialize_field("level_status", &self.level_status)?;
        st.serialize_field("level_spacing", &self.level_spacing)?;
        st.serialize_field("penalties", &self.penalties)?;
        st.serialize_field("objective_trace", &self.objective_trace)?;
        st.end()
    }
}

fn windows_for(reference: &Volume, ref_mask: &BinaryMask, floating: &Volume) -> Result<[IntensityWindow; 2]> {
    Ok([
        IntensityWindow::from_percentiles(reference, Some(ref_mask), 0.001, 0.999)?,
        IntensityWindow::from_percentiles(floating, None, 0.001, 0.999)?,
    ])
}

/// Sample set, basis tables and penalties for one direction.
struct Direction<'a> {
    sim: SimilarityTerm<'a>,
    penalty: LatticePenalty,
}

impl<'a> Direction<'a> {
    fn new(
        fixed: &'a Volume,
        moving: &'a Volume,
        fixed_mask: &'a BinaryMask,
        moving_mask: &'a BinaryMask,
        affine: &AffineTransform,
        lattice: &ControlLattice,
        cfg: &ObjectiveConfig,
    ) -> Result<Self> {
        let windows = windows_for(fixed, fixed_mask, moving)?;
        let sim = SimilarityTerm::new(
            fixed,
            moving,
            fixed_mask,
            Some(moving_mask),
            affine,
            windows,
            &cfg.similarity_config(),
        )?;
        let penalty = LatticePenalty::new(lattice, sim.grid())?;
        Ok(Direction { sim, penalty })
    }

    fn basis(&self) -> &GridBasis {
        self.penalty.basis()
    }
}

struct Evaluation {
    entry: TraceEntry,
    forward: ObjectiveComponents,
    grad_forward: Vec<Vec3>,
    grad_backward: Vec<Vec3>,
    sample_count: usize,
}

struct Problem<'a> {
    cfg: &'a ObjectiveConfig,
    fwd: Direction<'a>,
    bwd: Direction<'a>,
    fwd_affine: AffineTransform,
    bwd_affine: AffineTransform,
}

impl<'a> Problem<'a> {
    fn new(
        level: &'a PyramidLevel,
        affine: &AffineTransform,
        lf: &ControlLattice,
        lb: &ControlLattice,
        cfg: &'a ObjectiveConfig,
    ) -> Result<Self> {
        let inv = affine.inverse();
        let fwd = Direction::new(
            &level.reference,
            &level.floating,
            &level.reference_mask,
            &level.floating_mask,
            affine,
            lf,
            cfg,
        )?;
        let bwd = Direction::new(
            &level.floating,
            &level.reference,
            &level.floating_mask,
            &level.reference_mask,
            &inv,
            lb,
            cfg,
        )?;
        Ok(Problem {
            cfg,
            fwd,
            bwd,
            fwd_affine: *affine,
            bwd_affine: inv,
        })
    }

    fn evaluate(&self, lf: &ControlLattice, lb: &ControlLattice) -> Result<Evaluation> {
        let cfg = self.cfg;
        let ws = cfg.similarity_weight();
        let nf = lf.len();
        let nb = lb.len();
        let df = self.fwd.basis().displacement(lf.coefficients());
        let db = self.bwd.basis().displacement(lb.coefficients());

        let mut grad_f = vec![Vec3::zeros(); nf];
        let mut grad_b = vec![Vec3::zeros(); nb];

        let (sf, force) = self.fwd.sim.nmi_and_force(Some(&df))?;
        let scaled: Vec<Vec3> = force.iter().map(|f| f * ws).collect();
        self.fwd.basis().adjoint_add(&scaled, [crate::transform::Deriv::Value; 3], &mut grad_f);
        let bend_f = self.fwd.penalty.bending_with_gradient(lf.coefficients());
        let vol_f = self.fwd.penalty.volume_preservation_with_gradient(lf.coefficients())?;
        add_scaled(&mut grad_f, &bend_f.gradient, -cfg.alpha);
        add_scaled(&mut grad_f, &vol_f.gradient, -cfg.beta);

        let (sb, bend_b, vol_b) = if cfg.symmetric {
            let (sb, force) = self.bwd.sim.nmi_and_force(Some(&db))?;
            let scaled: Vec<Vec3> = force.iter().map(|f| f * ws).collect();
            self.bwd.basis().adjoint_add(&scaled, [crate::transform::Deriv::Value; 3], &mut grad_b);
            let bend = self.bwd.penalty.bending_with_gradient(lb.coefficients());
            let vol = self.bwd.penalty.volume_preservation_with_gradient(lb.coefficients())?;
            add_scaled(&mut grad_b, &bend.gradient, -cfg.alpha);
            add_scaled(&mut grad_b, &vol.gradient, -cfg.beta);
            (sb.value, bend.value, vol.value)
        } else {
            (0.0, 0.0, 0.0)
        };

        let ic = if cfg.gamma > 0.0 {
            let fwd_def = Deformation::new(self.fwd_affine, lf.clone());
            let bwd_def = Deformation::new(self.bwd_affine, lb.clone());
            let domains = ConsistencyDomains {
                forward_grid: self.fwd.sim.grid(),
                backward_grid: self.bwd.sim.grid(),
                forward_basis: Some(self.fwd.basis()),
                backward_basis: Some(self.bwd.basis()),
            };
            let parts = inverse_consistency_parts(&fwd_def, &bwd_def, &domains, [Some(&df), Some(&db)], true)?;
            let (gf, gb) = parts.combined_gradients(parts.mean_weights());
            add_scaled(&mut grad_f, &gf, -cfg.gamma);
            add_scaled(&mut grad_b, &gb, -cfg.gamma);
            parts.mean()
        } else {
            0.0
        };

        let bending = bend_f.value + bend_b;
        let volpres = vol_f.value + vol_b;
        let total = ws * (sf.value + sb) - cfg.alpha * bending - cfg.beta * volpres - cfg.gamma * ic;
        Ok(Evaluation {
            entry: TraceEntry {
                iteration: 0,
                similarity_forward: sf.value,
                similarity_backward: sb,
                bending,
                volpres,
                inconsistency: ic,
                total,
            },
            forward: ObjectiveComponents {
                similarity: sf.value,
                bending: bend_f.value,
                volpres: vol_f.value,
                inconsistency: ic,
                total: cfg.weighted_total(sf.value, bend_f.value, vol_f.value, ic),
            },
            grad_forward: grad_f,
            grad_backward: grad_b,
            sample_count: self.fwd.penalty.sample_count(),
        })
    }
}

fn add_scaled(out: &mut [Vec3], g: &[Vec3], s: f64) {
    for (o, v) in out.iter_mut().zip(g) {
        *o += v * s;
    }
}

fn dot(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn step_lattice(l: &ControlLattice, g: &[Vec3], s: f64) -> ControlLattice {
    l.with_coefficients(l.coefficients().iter().zip(g).map(|(c, d)| c + d * s).collect())
}

/// Forward-direction objective of the weighted sum: `w_s·S_f − α·B_f −
/// β·V_f − γ·IC`, with `IC` the sum of the per-domain mean squared
/// round-trip residuals. Both transforms need lattices covering their mask
/// bounding boxes.
pub fn objective(
    reference: &Volume,
    floating: &Volume,
    forward: &Deformation,
    backward: &Deformation,
    reference_mask: &BinaryMask,
    floating_mask: &BinaryMask,
    cfg: &ObjectiveConfig,
) -> Result<ObjectiveComponents> {
    cfg.validate()?;
    let (Some(lf), Some(lb)) = (&forward.lattice, &backward.lattice) else {
        return Err(Error::InvalidInput("objective needs lattices on both transforms".into()));
    };
    let level = PyramidLevel {
        level_index: 0,
        reference: reference.clone(),
        floating: floating.clone(),
        reference_mask: reference_mask.clone(),
        floating_mask: floating_mask.clone(),
        target_spacing: reference.spacing(),
    };
    let mut cfg = cfg.clone();
    cfg.symmetric = false;
    let mut problem = Problem::new(&level, &forward.affine, lf, lb, &cfg)?;
    problem.bwd_affine = backward.affine;
    Ok(problem.evaluate(lf, lb)?.forward)
}

/// Optimises one pyramid level starting from the given lattices.
pub fn optimize_level(
    level: &PyramidLevel,
    affine: &AffineTransform,
    forward: &ControlLattice,
    backward: &ControlLattice,
    cfg: &ObjectiveConfig,
) -> Result<LevelOutcome> {
    cfg.validate()?;
    let problem = Problem::new(level, affine, forward, backward, cfg)?;
    let mut folding_repairs = 0;
    let (mut lf, rf) = correct_folding_on(forward, problem.fwd.basis(), &cfg.folding)?;
    let (mut lb, rb) = correct_folding_on(backward, problem.bwd.basis(), &cfg.folding)?;
    folding_repairs += rf.fired() as usize + rb.fired() as usize;

    let mut current = problem.evaluate(&lf, &lb)?;
    let mut trace = vec![current.entry];
    let voxel = level.target_spacing.iter().copied().fold(f64::INFINITY, f64::min);
    let min_cp = lf.spacing().iter().chain(lb.spacing().iter()).copied().fold(f64::INFINITY, f64::min);
    let max_step = 0.5 * min_cp;
    let ls = &cfg.line_search;
    let mut step = (ls.initial_step_voxels * voxel).min(max_step);
    let mut slow = 0;
    let mut status = LevelStatus::MaxIterations;

    // Search direction over both lattices: Polak–Ribière conjugate
    // gradient, reset to the plain gradient when it stops being an ascent
    // direction or its line search fails.
    let mut direction: Option<(Vec<Vec3>, Vec<Vec3>)> = None;
    let mut previous: Option<(Vec<Vec3>, Vec<Vec3>)> = None;
    let mut iteration = 0;
    while iteration < cfg.max_iters_per_level {
        let (gf, gb) = (&current.grad_forward, &current.grad_backward);
        let gg = dot(gf, gf) + dot(gb, gb);
        if !(gg > 0.0) || !gg.is_finite() {
            status = LevelStatus::Stationary;
            break;
        }
        let (df, db) = match (&direction, &previous) {
            (Some((pf, pb)), Some((qf, qb))) => {
                let beta = ((dot(gf, gf) - dot(gf, qf) + dot(gb, gb) - dot(gb, qb)) / (dot(qf, qf) + dot(qb, qb))).max(0.0);
                let df: Vec<Vec3> = gf.iter().zip(pf).map(|(g, p)| g + p * beta).collect();
                let db: Vec<Vec3> = gb.iter().zip(pb).map(|(g, p)| g + p * beta).collect();
                if beta > 0.0 && dot(gf, &df) + dot(gb, &db) > 0.0 {
                    (df, db)
                } else {
                    (gf.clone(), gb.clone())
                }
            }
            _ => (gf.clone(), gb.clone()),
        };
        let conjugate = df != *gf || db != *gb;
        let dmax = df.iter().chain(db.iter()).map(|g| g.norm()).fold(0.0, f64::max);

        let mut accepted = None;
        for _ in 0..ls.max_trials {
            let s = step / dmax;
            let tf = step_lattice(&lf, &df, s);
            let tb = step_lattice(&lb, &db, s);
            let repaired = correct_folding_on(&tf, problem.fwd.basis(), &cfg.folding).and_then(|(tf, r1)| {
                correct_folding_on(&tb, problem.bwd.basis(), &cfg.folding).map(|(tb, r2)| (tf, tb, r1.fired() || r2.fired()))
            });
            let (tf, tb, fired) = match repaired {
                Ok(x) => x,
                Err(Error::FoldingNotRepaired { .. }) => {
                    step *= ls.shrink_factor;
                    continue;
                }
                Err(e) => return Err(e),
            };
            match problem.evaluate(&tf, &tb) {
                Ok(e) if e.entry.total > current.entry.total => {
                    folding_repairs += fired as usize;
                    accepted = Some((tf, tb, e));
                    break;
                }
                Ok(_)
                | Err(Error::UnusableOverlap { .. })
                | Err(Error::NonPositiveJacobian { .. })
                | Err(Error::GrossMisalignment { .. }) => step *= ls.shrink_factor,
                Err(e) => return Err(e),
            }
        }
        let Some((tf, tb, mut next)) = accepted else {
            if conjugate {
                // Retry along the plain gradient before giving up.
                direction = None;
                step = (ls.initial_step_voxels * voxel).min(max_step);
                continue;
            }
            status = if iteration == 0 { LevelStatus::Stationary } else { LevelStatus::LineSearchExhausted };
            break;
        };
        iteration += 1;
        let gain = (next.entry.total - current.entry.total) / current.entry.total.abs().max(1e-12);
        slow = if gain < cfg.convergence_tol { slow + 1 } else { 0 };
        next.entry.iteration = iteration;
        trace.push(next.entry);
        lf = tf;
        lb = tb;
        previous = Some((std::mem::take(&mut current.grad_forward), std::mem::take(&mut current.grad_backward)));
        direction = Some((df, db));
        current = next;
        step = (step * ls.grow_factor).min(max_step);
        if slow >= 5 {
            status = LevelStatus::Converged;
            break;
        }
    }

    Ok(LevelOutcome {
        forward: lf,
        backward: lb,
        trace,
        status,
        penalties: PenaltyReport {
            bending: current.forward.bending,
            volpres: current.forward.volpres,
            inconsistency: current.forward.inconsistency,
            sample_count: current.sample_count,
        },
        folding_repairs,
    })
}

fn union(a: &Aabb, b: &Aabb) -> Aabb {
    Aabb::new(a.min.inf(&b.min), a.max.sup(&b.max))
}

/// Spacing of the coarsest lattice: `2^(levels−1) · final_cp_spacing_voxels`
/// voxels of the finest level.
pub fn coarsest_lattice_spacing(finest_spacing: [f64; 3], cfg: &ObjectiveConfig) -> [f64; 3] {
    let f = cfg.final_cp_spacing_voxels * (1u64 << (cfg.levels - 1)) as f64;
    finest_spacing.map(|s| s * f)
}

/// Multi-level registration of `floating` (specimen) to `reference`, on top
/// of a fixed `affine` mapping reference points into the floating frame.
pub fn register(
    reference: &Volume,
    floating: &Volume,
    reference_mask: &BinaryMask,
    floating_mask: &BinaryMask,
    affine: &AffineTransform,
    cfg: &ObjectiveConfig,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    let pyramid = build_pyramid(reference, floating, reference_mask, floating_mask, cfg.levels)?;
    register_pyramid(&pyramid, affine, cfg)
}

/// As [`register`] on a prebuilt pyramid (coarsest level first).
pub fn register_pyramid(pyramid: &[PyramidLevel], affine: &AffineTransform, cfg: &ObjectiveConfig) -> Result<RegistrationResult> {
    cfg.validate()?;
    let finest = pyramid
        .last()
        .ok_or_else(|| Error::InvalidInput("empty pyramid".into()))?
        .target_spacing;
    let spacing = coarsest_lattice_spacing(finest, cfg);
    let ref_extent = pyramid
        .iter()
        .map(|l| l.reference.grid().extent())
        .reduce(|a, b| union(&a, &b))
        .expect("non-empty");
    let float_extent = pyramid
        .iter()
        .map(|l| l.floating.grid().extent())
        .reduce(|a, b| union(&a, &b))
        .expect("non-empty");
    let mut lf = ControlLattice::covering(&ref_extent, spacing)?;
    let mut lb = ControlLattice::covering(&float_extent, spacing)?;

    let mut result = RegistrationResult {
        affine: *affine,
        forward_lattices: Vec::new(),
        backward_lattices: Vec::new(),
        objective_trace: Vec::new(),
        converged_levels: Vec::new(),
        level_status: Vec::new(),
        level_spacing: Vec::new(),
        penalties: Vec::new(),
    };
    for (i, level) in pyramid.iter().enumerate() {
        if i > 0 {
            lf = lf.refine();
            lb = lb.refine();
        }
        let outcome = match optimize_level(level, affine, &lf, &lb, cfg) {
            Ok(o) => o,
            Err(Error::UnusableOverlap { .. }) => LevelOutcome {
                forward: lf.clone(),
                backward: lb.clone(),
                trace: Vec::new(),
                status: LevelStatus::Skipped,
                penalties: PenaltyReport::default(),
                folding_repairs: 0,
            },
            Err(e) => {
                return Err(Error::Registration {
                    level: i,
                    source: Box::new(e),
                    partial: Box::new(result),
                })
            }
        };
        lf = outcome.forward.clone();
        lb = outcome.backward.clone();
        result.forward_lattices.push(outcome.forward);
        result.backward_lattices.push(outcome.backward);
        result.objective_trace.push(outcome.trace);
        result.converged_levels.push(outcome.status.is_converged());
        result.level_status.push(outcome.status);
        result.level_spacing.push(level.target_spacing);
        result.penalties.push(outcome.penalties);
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_weights_leave_similarity_weight() {
        let cfg = ObjectiveConfig::default();
        assert!((cfg.similarity_weight() - 0.8999).abs() < 1e-12);
        cfg.validate().unwrap();
    }

    #[test]
    fn weighted_sum_by_hand() {
        let cfg = ObjectiveConfig {
            alpha: 0.1,
            beta: 0.1,
            gamma: 0.1,
            ..Default::default()
        };
        let t = cfg.weighted_total(1.5, 2.0, 1.0, 3.0);
        assert!((t - 0.45).abs() < 1e-12);
        let zero = ObjectiveConfig {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            ..Default::default()
        };
        assert_eq!(zero.weighted_total(1.37, 5.0, 6.0, 7.0), 1.37);
    }

    #[test]
    fn weight_constraint_rejected() {
        let cfg = ObjectiveConfig {
            alpha: 0.5,
            beta: 0.3,
            gamma: 0.2,
            ..Default::default()
        };
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("alpha + beta + gamma"));
    }

    #[test]
    fn coarsest_spacing_is_forty_voxels() {
        let cfg = ObjectiveConfig::default();
        assert_eq!(coarsest_lattice_spacing([1.0, 0.5, 2.0], &cfg), [40.0, 20.0, 80.0]);
    }
}
