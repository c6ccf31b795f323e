//! Masked normalised mutual information from Parzen-window joint histograms,
//! with its analytic derivative with respect to the transformed sample
//! positions and hence the lattice coefficients.
//!
//! Intensities are mapped to continuous bin coordinates in `[2, bins - 3]`
//! so the cubic Parzen kernel (four bins wide) never leaves the histogram.
//! The reference axis always uses the nearest bin; the floating axis uses the
//! cubic B-spline kernel unless [`ParzenMode::Nearest`] is selected.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::transform::{cubic_weights, cubic_weights_d1, AffineTransform, Deformation, GridBasis};
use crate::volume::{Grid, Volume};
use crate::Vec3;

const BIN_PAD: f64 = 2.0;
const CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityWindow {
    pub min: f64,
    pub max: f64,
}

impl IntensityWindow {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min < max) || !min.is_finite() || !max.is_finite() {
            return Err(Error::InvalidInput(format!(
                "intensity window [{min}, {max}] must satisfy min < max"
            )));
        }
        Ok(IntensityWindow { min, max })
    }

    /// Window spanning the `lo`..`hi` quantiles of the (masked) voxels. A
    /// constant image gets a unit-wide window around its value.
    pub fn from_percentiles(v: &Volume, mask: Option<&BinaryMask>, lo: f64, hi: f64) -> Result<Self> {
        let mut values: Vec<f64> = match mask {
            Some(m) => v
                .data()
                .iter()
                .zip(m.bits())
                .filter_map(|(&x, &b)| b.then_some(x))
                .collect(),
            None => v.data().to_vec(),
        };
        if values.is_empty() {
            return Err(Error::EmptyMask);
        }
        values.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p.clamp(0.0, 1.0) * (values.len() - 1) as f64;
            let i = pos.floor() as usize;
            let j = (i + 1).min(values.len() - 1);
            values[i] + (values[j] - values[i]) * (pos - i as f64)
        };
        let (a, b) = (q(lo), q(hi));
        if a < b {
            IntensityWindow::new(a, b)
        } else {
            IntensityWindow::new(a - 0.5, b + 0.5)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParzenMode {
    Cubic,
    Nearest,
}

/// What happens to intensities outside the window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowPolicy {
    Exclude,
    Clamp,
}

/// Which masks restrict the sample set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Reference mask only; floating-side exclusion comes from the outside marker.
    Reference,
    /// Additionally require the floating mask at the transformed position.
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimilarityConfig {
    pub bins: usize,
    pub parzen: ParzenMode,
    pub window_policy: WindowPolicy,
    pub min_samples: usize,
    pub mask_mode: MaskMode,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig {
            bins: 64,
            parzen: ParzenMode::Cubic,
            window_policy: WindowPolicy::Exclude,
            min_samples: 1000,
            mask_mode: MaskMode::Reference,
        }
    }
}

impl SimilarityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 8 {
            return Err(Error::Config(format!("bins must be >= 8, got {}", self.bins)));
        }
        if self.bins > u16::MAX as usize {
            return Err(Error::Config(format!("bins must be <= {}, got {}", u16::MAX, self.bins)));
        }
        Ok(())
    }
}

/// Joint histogram with reference bins on rows and floating bins on columns.
#[derive(Clone, Debug, PartialEq)]
pub struct JointHistogram {
    bins: usize,
    counts: Vec<f64>,
    marginal_r: Vec<f64>,
    marginal_f: Vec<f64>,
    total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NmiValue {
    pub value: f64,
    /// Set when the joint entropy is zero and the value is the limit 2.
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Entropies {
    pub reference: f64,
    pub floating: f64,
    pub joint: f64,
}

fn entropy(values: &[f64], total: f64) -> f64 {
    values
        .iter()
        .filter(|&&n| n > 0.0)
        .map(|&n| {
            let p = n / total;
            -p * p.ln()
        })
        .sum()
}

impl JointHistogram {
    fn zeros(bins: usize) -> Self {
        JointHistogram {
            bins,
            counts: vec![0.0; bins * bins],
            marginal_r: vec![0.0; bins],
            marginal_f: vec![0.0; bins],
            total: 0.0,
        }
    }

    /// Histogram from a row-major `bins × bins` count table.
    pub fn from_counts(bins: usize, counts: Vec<f64>) -> Result<Self> {
        if counts.len() != bins * bins {
            return Err(Error::InvalidInput(format!(
                "{} counts for a {bins}×{bins} histogram",
                counts.len()
            )));
        }
        if counts.iter().any(|&c| !(c >= 0.0 && c.is_finite())) {
            return Err(Error::InvalidInput("histogram counts must be finite and >= 0".into()));
        }
        let mut h = JointHistogram::zeros(bins);
        for r in 0..bins {
            for f in 0..bins {
                let c = counts[r * bins + f];
                h.marginal_r[r] += c;
                h.marginal_f[f] += c;
                h.total += c;
            }
        }
        h.counts = counts;
        Ok(h)
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn count(&self, r: usize, f: usize) -> f64 {
        self.counts[r * self.bins + f]
    }

    pub fn marginal_reference(&self) -> &[f64] {
        &self.marginal_r
    }

    pub fn marginal_floating(&self) -> &[f64] {
        &self.marginal_f
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn entropies(&self) -> Entropies {
        Entropies {
            reference: entropy(&self.marginal_r, self.total),
            floating: entropy(&self.marginal_f, self.total),
            joint: entropy(&self.counts, self.total),
        }
    }

    fn merge(&mut self, other: &JointHistogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.marginal_r.iter_mut().zip(&other.marginal_r) {
            *a += b;
        }
        for (a, b) in self.marginal_f.iter_mut().zip(&other.marginal_f) {
            *a += b;
        }
        self.total += other.total;
    }

    /// Comma-separated `bins × bins` table, one reference bin per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.bins {
            let row: Vec<String> = (0..self.bins).map(|f| self.count(r, f).to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// `∂NMI/∂count(r, f)` with the total held fixed, row-major.
    fn nmi_count_derivatives(&self) -> Option<Vec<f64>> {
        let e = self.entropies();
        if e.joint <= 0.0 || self.total <= 0.0 {
            return None;
        }
        let n = self.total;
        let d_entropy = |c: f64| if c > 0.0 { -((c / n).ln() + 1.0) / n } else { 0.0 };
        let d_hf: Vec<f64> = self.marginal_f.iter().map(|&c| d_entropy(c)).collect();
        let h_sum = e.reference + e.floating;
        let inv = 1.0 / (e.joint * e.joint);
        let mut out = vec![0.0; self.bins * self.bins];
        for r in 0..self.bins {
            for f in 0..self.bins {
                let idx = r * self.bins + f;
                out[idx] = (d_hf[f] * e.joint - h_sum * d_entropy(self.counts[idx])) * inv;
            }
        }
        Some(out)
    }
}

/// `(H(R) + H(F)) / H(R, F)` in nats. A zero joint entropy returns 2 with
/// the degeneracy flag set.
pub fn nmi(h: &JointHistogram) -> Result<NmiValue> {
    if !(h.total > 0.0) {
        return Err(Error::InvalidInput("histogram is empty".into()));
    }
    let e = h.entropies();
    if e.joint <= 0.0 {
        return Ok(NmiValue {
            value: 2.0,
            degenerate: true,
        });
    }
    Ok(NmiValue {
        value: (e.reference + e.floating) / e.joint,
        degenerate: false,
    })
}

#[derive(Clone, Copy, Debug)]
struct BinMap {
    min: f64,
    max: f64,
    scale: f64,
    policy: WindowPolicy,
}

impl BinMap {
    fn new(window: &IntensityWindow, bins: usize, policy: WindowPolicy) -> Self {
        BinMap {
            min: window.min,
            max: window.max,
            scale: (bins as f64 - 1.0 - 2.0 * BIN_PAD) / (window.max - window.min),
            policy,
        }
    }

    /// Continuous bin coordinate and `d coordinate / d intensity`, or `None`
    /// for an excluded intensity.
    #[inline]
    fn map(&self, v: f64) -> Option<(f64, f64)> {
        if v >= self.min && v <= self.max {
            Some((BIN_PAD + (v - self.min) * self.scale, self.scale))
        } else {
            match self.policy {
                WindowPolicy::Exclude => None,
                WindowPolicy::Clamp => {
                    let c = v.clamp(self.min, self.max);
                    Some((BIN_PAD + (c - self.min) * self.scale, 0.0))
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Sample {
    box_index: u32,
    mapped: Vec3,
    ref_bin: u16,
}

/// Precomputed sample set for repeated NMI evaluation between a fixed
/// reference (masked) and a floating image under a fixed affine plus a
/// variable displacement field given on the mask's bounding-box grid.
pub struct SimilarityTerm<'a> {
    floating: &'a Volume,
    floating_mask: Option<&'a BinaryMask>,
    grid: Grid,
    samples: Vec<Sample>,
    float_map: BinMap,
    cfg: SimilarityConfig,
}

impl<'a> SimilarityTerm<'a> {
    pub fn new(
        reference: &Volume,
        floating: &'a Volume,
        reference_mask: &BinaryMask,
        floating_mask: Option<&'a BinaryMask>,
        affine: &AffineTransform,
        windows: [IntensityWindow; 2],
        cfg: &SimilarityConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if reference_mask.dims() != reference.dims() {
            return Err(Error::InvalidInput(format!(
                "mask dims {:?} differ from reference dims {:?}",
                reference_mask.dims(),
                reference.dims()
            )));
        }
        if cfg.mask_mode == MaskMode::Both && floating_mask.is_none() {
            return Err(Error::InvalidInput("MaskMode::Both needs a floating mask".into()));
        }
        let (lo, hi) = reference_mask.bounding_box().ok_or(Error::EmptyMask)?;
        let grid = reference.grid().sub_grid(lo, hi);
        let ref_map = BinMap::new(&windows[0], cfg.bins, cfg.window_policy);
        let mut samples = Vec::new();
        for k in lo[2]..=hi[2] {
            for j in lo[1]..=hi[1] {
                for i in lo[0]..=hi[0] {
                    if !reference_mask.get(i, j, k) {
                        continue;
                    }
                    let Some((c, _)) = ref_map.map(reference.get(i, j, k)) else {
                        continue;
                    };
                    let box_index = grid.index(i - lo[0], j - lo[1], k - lo[2]);
                    samples.push(Sample {
                        box_index: box_index as u32,
                        mapped: affine.apply(&reference.grid().point(i, j, k)),
                        ref_bin: c.round() as u16,
                    });
                }
            }
        }
        Ok(SimilarityTerm {
            floating,
            floating_mask,
            grid,
            samples,
            float_map: BinMap::new(&windows[1], cfg.bins, cfg.window_policy),
            cfg: cfg.clone(),
        })
    }

    /// Grid of the mask bounding box on which displacement fields are given.
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    #[inline]
    fn position(&self, s: &Sample, displacement: Option<&[Vec3]>) -> Vec3 {
        match displacement {
            Some(d) => s.mapped + d[s.box_index as usize],
            None => s.mapped,
        }
    }

    #[inline]
    fn floating_allowed(&self, p: &Vec3) -> bool {
        match (self.cfg.mask_mode, self.floating_mask) {
            (MaskMode::Both, Some(m)) => m
                .grid()
                .nearest_voxel(p)
                .is_some_and(|[i, j, k]| m.get(i, j, k)),
            _ => true,
        }
    }

    fn check_len(&self, displacement: Option<&[Vec3]>) -> Result<()> {
        if let Some(d) = displacement {
            if d.len() != self.grid.len() {
                return Err(Error::InvalidInput(format!(
                    "displacement field has {} entries, sample grid has {}",
                    d.len(),
                    self.grid.len()
                )));
            }
        }
        Ok(())
    }

    /// Joint histogram under the current displacement field (`None` = zero).
    pub fn histogram(&self, displacement: Option<&[Vec3]>) -> Result<JointHistogram> {
        self.check_len(displacement)?;
        let bins = self.cfg.bins;
        let parts: Vec<JointHistogram> = self
            .samples
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut h = JointHistogram::zeros(bins);
                for s in chunk {
                    let p = self.position(s, displacement);
                    if !self.floating_allowed(&p) {
                        continue;
                    }
                    let Some(v) = self.floating.sample(&p) else { continue };
                    let Some((c, _)) = self.float_map.map(v) else { continue };
                    let r = s.ref_bin as usize;
                    h.marginal_r[r] += 1.0;
                    h.total += 1.0;
                    match self.cfg.parzen {
                        ParzenMode::Nearest => {
                            let f = c.round() as usize;
                            h.counts[r * bins + f] += 1.0;
                            h.marginal_f[f] += 1.0;
                        }
                        ParzenMode::Cubic => {
                            let base = c.floor();
                            let w = cubic_weights(c - base);
                            let first = base as usize - 1;
                            for (m, wm) in w.iter().enumerate() {
                                h.counts[r * bins + first + m] += wm;
                                h.marginal_f[first + m] += wm;
                            }
                        }
                    }
                }
                h
            })
            .collect();
        let mut h = JointHistogram::zeros(bins);
        for p in &parts {
            h.merge(p);
        }
        let contributing = h.total as usize;
        if contributing < self.cfg.min_samples {
            return Err(Error::UnusableOverlap {
                samples: contributing,
                required: self.cfg.min_samples,
            });
        }
        Ok(h)
    }

    pub fn nmi(&self, displacement: Option<&[Vec3]>) -> Result<NmiValue> {
        nmi(&self.histogram(displacement)?)
    }

    /// NMI and `∂NMI/∂T(x)` at every sample-grid point (zero where no sample
    /// contributes).
    pub fn nmi_and_force(&self, displacement: Option<&[Vec3]>) -> Result<(NmiValue, Vec<Vec3>)> {
        let h = self.histogram(displacement)?;
        let value = nmi(&h)?;
        let mut force = vec![Vec3::zeros(); self.grid.len()];
        let (Some(dn), ParzenMode::Cubic) = (h.nmi_count_derivatives(), self.cfg.parzen) else {
            return Ok((value, force));
        };
        let bins = self.cfg.bins;
        let per_sample: Vec<Vec<(u32, Vec3)>> = self
            .samples
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut out = Vec::with_capacity(chunk.len());
                for s in chunk {
                    let p = self.position(s, displacement);
                    if !self.floating_allowed(&p) {
                        continue;
                    }
                    let Some((v, grad)) = self.floating.sample_with_gradient(&p) else {
                        continue;
                    };
                    let Some((c, dc)) = self.float_map.map(v) else { continue };
                    if dc == 0.0 {
                        continue;
                    }
                    let base = c.floor();
                    let d = cubic_weights_d1(c - base);
                    let first = base as usize - 1;
                    let row = &dn[s.ref_bin as usize * bins..];
                    let mut ds_dc = 0.0;
                    for (m, dm) in d.iter().enumerate() {
                        ds_dc += row[first + m] * dm;
                    }
                    out.push((s.box_index, grad * (ds_dc * dc)));
                }
                out
            })
            .collect();
        for chunk in per_sample {
            for (idx, f) in chunk {
                force[idx as usize] = f;
            }
        }
        Ok((value, force))
    }
}

fn default_windows(
    reference: &Volume,
    floating: &Volume,
    mask: &BinaryMask,
) -> Result<[IntensityWindow; 2]> {
    Ok([
        IntensityWindow::from_percentiles(reference, Some(mask), 0.001, 0.999)?,
        IntensityWindow::from_percentiles(floating, None, 0.001, 0.999)?,
    ])
}

/// Joint histogram of masked reference voxels against the floating image
/// sampled at `deformation(x)`. Windows default to the 0.1–99.9 percentiles.
pub fn joint_histogram(
    reference: &Volume,
    floating: &Volume,
    deformation: &Deformation,
    mask: &BinaryMask,
    cfg: &SimilarityConfig,
    windows: Option<[IntensityWindow; 2]>,
) -> Result<JointHistogram> {
    let windows = match windows {
        Some(w) => w,
        None => default_windows(reference, floating, mask)?,
    };
    let term = SimilarityTerm::new(reference, floating, mask, None, &deformation.affine, windows, cfg)?;
    let field = match &deformation.lattice {
        Some(l) => Some(GridBasis::new(l, term.grid())?.displacement(l.coefficients())),
        None => None,
    };
    term.histogram(field.as_deref())
}

/// `∂NMI/∂φ` for every control point of the deformation's lattice.
pub fn nmi_gradient(
    reference: &Volume,
    floating: &Volume,
    deformation: &Deformation,
    mask: &BinaryMask,
    cfg: &SimilarityConfig,
    windows: Option<[IntensityWindow; 2]>,
) -> Result<Vec<Vec3>> {
    let lattice = deformation
        .lattice
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("nmi_gradient needs a control lattice".into()))?;
    let windows = match windows {
        Some(w) => w,
        None => default_windows(reference, floating, mask)?,
    };
    let term = SimilarityTerm::new(reference, floating, mask, None, &deformation.affine, windows, cfg)?;
    let basis = GridBasis::new(lattice, term.grid())?;
    let field = basis.displacement(lattice.coefficients());
    let (_, force) = term.nmi_and_force(Some(&field))?;
    let mut grad = vec![Vec3::zeros(); lattice.len()];
    basis.adjoint_add(&force, [crate::transform::Deriv::Value; 3], &mut grad);
    Ok(grad)
}
