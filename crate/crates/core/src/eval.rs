//! Surface-distance evaluation and the paired signed-rank test.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::transform::Deformation;
use crate::Vec3;

/// Largest number of non-zero differences tested by exact enumeration.
pub const EXACT_WILCOXON_MAX_N: usize = 25;

#[derive(Clone, Debug, PartialEq)]
pub struct SurfacePointSet {
    pub points: Vec<Vec3>,
    pub source: String,
}

/// Centres of all voxel faces between a foreground voxel and a background or
/// out-of-grid neighbour (6-connectivity).
pub fn extract_surface(mask: &BinaryMask, source: &str) -> Result<SurfacePointSet> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let g = mask.grid();
    let [nx, ny, nz] = g.dims;
    let mut points = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if !mask.get(i, j, k) {
                    continue;
                }
                let c = g.point(i, j, k);
                let idx = [i, j, k];
                for a in 0..3 {
                    for dir in [-1isize, 1] {
                        let n = idx[a] as isize + dir;
                        let open = n < 0 || n as usize >= g.dims[a] || {
                            let mut q = idx;
                            q[a] = n as usize;
                            !mask.get(q[0], q[1], q[2])
                        };
                        if open {
                            let mut p = c;
                            p[a] += dir as f64 * g.spacing[a] / 2.0;
                            points.push(p);
                        }
                    }
                }
            }
        }
    }
    Ok(SurfacePointSet {
        points,
        source: source.to_string(),
    })
}

/// Static 3-d tree over a point set for exact nearest-neighbour queries.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Vec3>,
    /// Node layout: the median of each index range sits at its midpoint.
    order: Vec<usize>,
    axes: Vec<u8>,
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut axes = vec![0u8; points.len()];
        build(points, &mut order, &mut axes, 0);
        KdTree {
            points: points.to_vec(),
            order,
            axes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index into the original point list and squared distance of the
    /// nearest point to `q`.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, self.order.len(), q, &mut best);
        Some(best)
    }

    fn search(&self, lo: usize, hi: usize, q: &Vec3, best: &mut (usize, f64)) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx];
        let d2 = (p - q).norm_squared();
        if d2 < best.1 || (d2 == best.1 && idx < best.0) {
            *best = (idx, d2);
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(near.0, near.1, q, best);
        if diff * diff <= best.1 {
            self.search(far.0, far.1, q, best);
        }
    }
}

fn build(points: &[Vec3], order: &mut [usize], axes: &mut [u8], _depth: usize) {
    if order.len() <= 1 {
        if let Some(a) = axes.first_mut() {
            *a = 0;
        }
        return;
    }
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for &i in order.iter() {
        lo = lo.inf(&points[i]);
        hi = hi.sup(&points[i]);
    }
    let axis = (hi - lo).imax();
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
    axes[mid] = axis as u8;
    let (left, right) = order.split_at_mut(mid);
    let (axes_left, axes_right) = axes.split_at_mut(mid);
    build(points, left, axes_left, _depth + 1);
    build(points, &mut right[1..], &mut axes_right[1..], _depth + 1);
}

/// Distance from every point of `a` to its nearest point of `b`.
pub fn min_distances(a: &[Vec3], b: &[Vec3]) -> Result<Vec<f64>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("surface point sets must be non-empty".into()));
    }
    let tree = KdTree::new(b);
    Ok(a.par_iter().map(|p| tree.nearest(p).expect("non-empty").1.sqrt()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub distances: Option<Vec<f64>>,
}

impl DistanceStats {
    pub fn from_distances(d: &[f64], keep: bool) -> Result<Self> {
        if d.is_empty() {
            return Err(Error::InvalidInput("no distances".into()));
        }
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Ok(DistanceStats {
            mean,
            std: var.sqrt(),
            min: d.iter().copied().fold(f64::INFINITY, f64::min),
            max: d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            n: d.len(),
            distances: keep.then(|| d.to_vec()),
        })
    }
}

/// Directional average minimum distance from surface `a` to surface `b`.
pub fn avg_min_distance(a: &SurfacePointSet, b: &SurfacePointSet) -> Result<DistanceStats> {
    DistanceStats::from_distances(&min_distances(&a.points, &b.points)?, true)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of ranks of positive differences `before − after`.
    pub statistic: f64,
    pub p_value: f64,
    /// Number of non-zero differences.
    pub n: usize,
    pub method: WilcoxonMethod,
}

/// Average ranks (1-based) of `values`, ties sharing their mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test on paired samples. Zero differences
/// are dropped and tied ranks averaged. Up to 25 non-zero differences the
/// null distribution is enumerated exactly; beyond that the normal
/// approximation with tie and continuity corrections is used.
pub fn wilcoxon_signed_rank(before: &[f64], after: &[f64]) -> Result<WilcoxonResult> {
    if before.len() != after.len() {
        return Err(Error::InvalidInput(format!(
            "paired samples differ in length: {} vs {}",
            before.len(),
            after.len()
        )));
    }
    if before.len() < 6 {
        return Err(Error::InvalidInput(format!("need at least 6 pairs, got {}", before.len())));
    }
    let diffs: Vec<f64> = before.iter().zip(after).map(|(b, a)| b - a).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(Error::DegenerateTest);
    }
    let n = diffs.len();
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();

    if n <= EXACT_WILCOXON_MAX_N {
        // Doubled ranks are integers even with averaged ties.
        let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        let mut counts = vec![0.0f64; max + 1];
        counts[0] = 1.0;
        for &r in &doubled {
            for s in (r..=max).rev() {
                counts[s] += counts[s - r];
            }
        }
        let observed = (w_plus * 2.0).round() as usize;
        let total = 2f64.powi(n as i32);
        let lower: f64 = counts[..=observed].iter().sum::<f64>() / total;
        let upper: f64 = counts[observed..].iter().sum::<f64>() / total;
        return Ok(WilcoxonResult {
            statistic: w_plus,
            p_value: (2.0 * lower.min(upper)).min(1.0),
            n,
            method: WilcoxonMethod::Exact,
        });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    if !(var > 0.0) {
        return Err(Error::DegenerateTest);
    }
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(WilcoxonResult {
        statistic: w_plus,
        p_value: (2.0 * normal.sf(z)).min(1.0),
        n,
        method: WilcoxonMethod::Normal,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub before: DistanceStats,
    pub after: DistanceStats,
    /// `None` when every paired difference is zero.
    pub wilcoxon: Option<WilcoxonResult>,
    pub p_value: Option<f64>,
    pub degenerate: bool,
}

impl EvaluationReport {
    fn new(before: DistanceStats, after: DistanceStats, paired: (&[f64], &[f64])) -> Result<Self> {
        let (wilcoxon, degenerate) = match wilcoxon_signed_rank(paired.0, paired.1) {
            Ok(w) => (Some(w), false),
            Err(Error::DegenerateTest) => (None, true),
            Err(e) => return Err(e),
        };
        Ok(EvaluationReport {
            p_value: wilcoxon.as_ref().map(|w| w.p_value),
            before,
            after,
            wilcoxon,
            degenerate,
        })
    }
}

/// AvgDist before and after for specimen surface points paired by index:
/// `before[i]` and `after[i]` are the same specimen point under the two
/// alignments, measured against the reference surface.
pub fn evaluate_paired(reference: &SurfacePointSet, before: &[Vec3], after: &[Vec3]) -> Result<EvaluationReport> {
    if before.len() != after.len() {
        return Err(Error::InvalidInput("before and after point lists must pair up".into()));
    }
    let db = min_distances(before, &reference.points)?;
    let da = min_distances(after, &reference.points)?;
    EvaluationReport::new(
        DistanceStats::from_distances(&db, true)?,
        DistanceStats::from_distances(&da, true)?,
        (&db, &da),
    )
}

/// Evaluates a registration from the specimen's native mask: its surface
/// points are mapped into the reference frame by `before` (typically the
/// inverse affine) and `after` (the backward transform), and distances to
/// the reference surface are paired by specimen point. Points a map sends
/// outside its domain are dropped from both lists.
pub fn evaluate_registration(
    reference_mask: &BinaryMask,
    floating_mask: &BinaryMask,
    before: &Deformation,
    after: &Deformation,
) -> Result<EvaluationReport> {
    let reference = extract_surface(reference_mask, "reference")?;
    let specimen = extract_surface(floating_mask, "floating")?;
    let (pb, pa): (Vec<Vec3>, Vec<Vec3>) = specimen
        .points
        .iter()
        .filter_map(|p| Some((before.apply(p)?, after.apply(p)?)))
        .unzip();
    if pb.is_empty() {
        return Err(Error::GrossMisalignment {
            out_of_domain: specimen.points.len(),
            total: specimen.points.len(),
        });
    }
    evaluate_paired(&reference, &pb, &pa)
}

/// Evaluation from specimen masks already resampled onto the reference grid
/// before and after registration. The two surfaces have no point identity,
/// so each before-surface point is paired with its nearest after-surface
/// point for the signed-rank test; the reported stats are the plain
/// directional AvgDist of each surface.
pub fn evaluate_masks(
    reference_mask: &BinaryMask,
    before_mask: &BinaryMask,
    after_mask: &BinaryMask,
) -> Result<EvaluationReport> {
    let reference = extract_surface(reference_mask, "reference")?;
    let sb = extract_surface(before_mask, "before")?;
    let sa = extract_surface(after_mask, "after")?;
    let before = avg_min_distance(&sb, &reference)?;
    let after = avg_min_distance(&sa, &reference)?;
    let db = before.distances.clone().unwrap_or_default();
    let da_all = after.distances.clone().unwrap_or_default();
    let tree = KdTree::new(&sa.points);
    let paired_after: Vec<f64> = sb
        .points
        .iter()
        .map(|p| da_all[tree.nearest(p).expect("non-empty").0])
        .collect();
    EvaluationReport::new(before, after, (&db, &paired_after))
}

/// Rounds to one decimal, halves away from zero.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

fn cells(s: &DistanceStats) -> [f64; 4] {
    [s.mean, s.std, s.min, s.max]
}

/// One row in the layout `label & mean & std & min & max & mean & std & min & max \\`.
pub fn format_table_row(label: &str, before: &DistanceStats, after: &DistanceStats) -> String {
    let v: Vec<String> = cells(before)
        .iter()
        .chain(cells(after).iter())
        .map(|x| format!("{:.1}", round1(*x)))
        .collect();
    format!("{label} & {} \\\\", v.join(" & "))
}

/// Table of cases with two summary rows: the column-wise mean of the case
/// values and, when every case kept its distances, the statistics pooled
/// over all points.
pub fn format_table(cases: &[(String, EvaluationReport)]) -> Result<String> {
    if cases.is_empty() {
        return Err(Error::InvalidInput("no cases to tabulate".into()));
    }
    let mut out = String::from("AvgDist [mm] & mean & std & min. & max. & mean & std & min. & max. \\\\\n");
    for (label, r) in cases {
        out.push_str(&format_table_row(label, &r.before, &r.after));
        out.push('\n');
    }
    let n = cases.len() as f64;
    let mean_of = |pick: fn(&EvaluationReport) -> &DistanceStats| {
        let mut acc = [0.0; 4];
        for (_, r) in cases {
            for (a, v) in acc.iter_mut().zip(cells(pick(r))) {
                *a += v / n;
            }
        }
        DistanceStats {
            mean: acc[0],
            std: acc[1],
            min: acc[2],
            max: acc[3],
            n: cases.iter().map(|(_, r)| pick(r).n).sum(),
            distances: None,
        }
    };
    out.push_str(&format_table_row("mean of cases", &mean_of(|r| &r.before), &mean_of(|r| &r.after)));
    out.push('\n');
    let pooled = |pick: fn(&EvaluationReport) -> &DistanceStats| -> Option<DistanceStats> {
        let mut all = Vec::new();
        for (_, r) in cases {
            all.extend_from_slice(pick(r).distances.as_ref()?);
        }
        DistanceStats::from_distances(&all, false).ok()
    };
    if let (Some(b), Some(a)) = (pooled(|r| &r.before), pooled(|r| &r.after)) {
        out.push_str(&format_table_row("pooled", &b, &a));
        out.push('\n');
    }
    Ok(out)
}
