//! Binary masks and the threshold/morphology pipeline that isolates lung tissue.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Grid, Volume};

/// Foreground indicator aligned with a volume grid, x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    grid: Grid,
    bits: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MorphOp {
    Erode,
    Dilate,
    Open,
    Close,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Six,
    TwentySix,
}

impl BinaryMask {
    pub fn new(grid: Grid, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != grid.len() {
            return Err(Error::InvalidInput(format!(
                "mask has {} voxels, grid expects {}",
                bits.len(),
                grid.len()
            )));
        }
        Ok(BinaryMask { grid, bits })
    }

    pub fn full(grid: Grid) -> Self {
        let n = grid.len();
        BinaryMask {
            grid,
            bits: vec![true; n],
        }
    }

    pub fn empty(grid: Grid) -> Self {
        let n = grid.len();
        BinaryMask {
            grid,
            bits: vec![false; n],
        }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(grid.len());
        for k in 0..grid.dims[2] {
            for j in 0..grid.dims[1] {
                for i in 0..grid.dims[0] {
                    bits.push(f(i, j, k));
                }
            }
        }
        BinaryMask { grid, bits }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.bits[self.grid.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, value: bool) {
        let idx = self.grid.index(i, j, k);
        self.bits[idx] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Foreground volume in mm³.
    pub fn physical_volume(&self) -> f64 {
        self.count() as f64 * self.grid.voxel_volume()
    }

    /// Inclusive voxel bounding box of the foreground, `None` when empty.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (idx, &b) in self.bits.iter().enumerate() {
            if b {
                any = true;
                let c = self.grid.coords(idx);
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a]);
                }
            }
        }
        any.then_some((lo, hi))
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same(other)?;
        Ok(BinaryMask {
            grid: self.grid.clone(),
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect(),
        })
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same(other)?;
        Ok(BinaryMask {
            grid: self.grid.clone(),
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect(),
        })
    }

    fn check_same(&self, other: &BinaryMask) -> Result<()> {
        if self.grid.dims != other.grid.dims {
            return Err(Error::InvalidInput(format!(
                "mask dims differ: {:?} vs {:?}",
                self.grid.dims, other.grid.dims
            )));
        }
        Ok(())
    }

    /// Nearest-neighbour resampling onto `target`; voxels mapping outside the
    /// source grid are background.
    pub fn resample_nearest(&self, target: &Grid) -> BinaryMask {
        if target.same_geometry(&self.grid) {
            return BinaryMask {
                grid: target.clone(),
                bits: self.bits.clone(),
            };
        }
        BinaryMask::from_fn(target.clone(), |i, j, k| {
            self.grid
                .nearest_voxel(&target.point(i, j, k))
                .is_some_and(|[a, b, c]| self.get(a, b, c))
        })
    }

    /// Converts to a {0, 1} volume.
    pub fn to_volume(&self) -> Volume {
        Volume::new(
            self.grid.clone(),
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask grid has matching length")
    }

    /// True when any foreground voxel lies on the outer face of the grid.
    pub fn touches_boundary(&self) -> bool {
        let d = self.grid.dims;
        self.bits.iter().enumerate().any(|(idx, &b)| {
            b && {
                let c = self.grid.coords(idx);
                (0..3).any(|a| c[a] == 0 || c[a] == d[a] - 1)
            }
        })
    }
}

/// Sets voxels with `lo <= value <= hi`.
pub fn threshold(v: &Volume, lo: f64, hi: f64) -> Result<BinaryMask> {
    if !(lo <= hi) {
        return Err(Error::InvalidInput(format!("threshold band [{lo}, {hi}] is empty")));
    }
    Ok(BinaryMask {
        grid: v.grid().clone(),
        bits: v.data().iter().map(|&x| lo <= x && x <= hi).collect(),
    })
}

/// Offsets of the discrete ball `i² + j² + k² <= r²`.
pub fn ball_offsets(radius: usize) -> Vec<[isize; 3]> {
    let r = radius as isize;
    let mut out = Vec::new();
    for k in -r..=r {
        for j in -r..=r {
            for i in -r..=r {
                if i * i + j * j + k * k <= r * r {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

/// Dilation treats out-of-grid voxels as background, erosion as foreground.
fn erode_dilate(m: &BinaryMask, offsets: &[[isize; 3]], erode: bool) -> BinaryMask {
    let d = m.grid.dims.map(|x| x as isize);
    let mut bits = vec![false; m.bits.len()];
    for k in 0..d[2] {
        for j in 0..d[1] {
            for i in 0..d[0] {
                let mut hit = erode;
                for o in offsets {
                    let (a, b, c) = (i + o[0], j + o[1], k + o[2]);
                    let inside = a >= 0 && b >= 0 && c >= 0 && a < d[0] && b < d[1] && c < d[2];
                    let v = if inside {
                        m.bits[(a + d[0] * (b + d[1] * c)) as usize]
                    } else {
                        erode
                    };
                    if erode && !v {
                        hit = false;
                        break;
                    }
                    if !erode && v {
                        hit = true;
                        break;
                    }
                }
                bits[(i + d[0] * (j + d[1] * k)) as usize] = hit;
            }
        }
    }
    BinaryMask {
        grid: m.grid.clone(),
        bits,
    }
}

/// Binary morphology with a ball structuring element of `radius` voxels.
/// Open is erode-then-dilate, close is dilate-then-erode.
pub fn morphology(m: &BinaryMask, op: MorphOp, radius: usize) -> Result<BinaryMask> {
    if radius == 0 {
        return Err(Error::InvalidInput("morphology radius must be >= 1".into()));
    }
    let se = ball_offsets(radius);
    Ok(match op {
        MorphOp::Erode => erode_dilate(m, &se, true),
        MorphOp::Dilate => erode_dilate(m, &se, false),
        MorphOp::Open => erode_dilate(&erode_dilate(m, &se, true), &se, false),
        MorphOp::Close => {
            // Pad so the dilation can grow past the border and the erosion
            // sees the true dilated set there.
            let padded = pad(m, radius);
            let closed = erode_dilate(&erode_dilate(&padded, &se, false), &se, true);
            unpad(&closed, m, radius)
        }
    })
}

fn pad(m: &BinaryMask, r: usize) -> BinaryMask {
    let d = m.grid.dims;
    let dims = d.map(|x| x + 2 * r);
    let mut bits = vec![false; dims.iter().product()];
    for k in 0..d[2] {
        for j in 0..d[1] {
            for i in 0..d[0] {
                bits[(i + r) + dims[0] * ((j + r) + dims[1] * (k + r))] = m.get(i, j, k);
            }
        }
    }
    let grid = Grid {
        dims,
        ..m.grid.clone()
    };
    BinaryMask { grid, bits }
}

fn unpad(padded: &BinaryMask, like: &BinaryMask, r: usize) -> BinaryMask {
    BinaryMask::from_fn(like.grid.clone(), |i, j, k| padded.get(i + r, j + r, k + r))
}

fn neighbour_offsets(conn: Connectivity) -> Vec<[isize; 3]> {
    let mut out = Vec::new();
    for k in -1isize..=1 {
        for j in -1isize..=1 {
            for i in -1isize..=1 {
                let manhattan = i.abs() + j.abs() + k.abs();
                let keep = match conn {
                    Connectivity::Six => manhattan == 1,
                    Connectivity::TwentySix => manhattan > 0,
                };
                if keep {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

/// Connected-component labels (0 = background, 1.. in scan order of seeds)
/// and the voxel count of each label.
pub fn label_components(m: &BinaryMask, conn: Connectivity) -> (Vec<u32>, Vec<usize>) {
    let d = m.grid.dims.map(|x| x as isize);
    let offsets = neighbour_offsets(conn);
    let mut labels = vec![0u32; m.bits.len()];
    let mut sizes = vec![0usize];
    let mut queue = VecDeque::new();
    for seed in 0..m.bits.len() {
        if !m.bits[seed] || labels[seed] != 0 {
            continue;
        }
        let label = sizes.len() as u32;
        let mut size = 0;
        labels[seed] = label;
        queue.push_back(seed);
        while let Some(idx) = queue.pop_front() {
            size += 1;
            let [i, j, k] = m.grid.coords(idx).map(|x| x as isize);
            for o in &offsets {
                let (a, b, c) = (i + o[0], j + o[1], k + o[2]);
                if a < 0 || b < 0 || c < 0 || a >= d[0] || b >= d[1] || c >= d[2] {
                    continue;
                }
                let n = (a + d[0] * (b + d[1] * c)) as usize;
                if m.bits[n] && labels[n] == 0 {
                    labels[n] = label;
                    queue.push_back(n);
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Keeps only the largest connected component; ties go to the component
/// whose first voxel comes earliest in scan order.
pub fn largest_component(m: &BinaryMask, conn: Connectivity) -> Result<BinaryMask> {
    let (labels, sizes) = label_components(m, conn);
    let best = (1..sizes.len())
        .max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)))
        .ok_or(Error::EmptyMask)?;
    Ok(BinaryMask {
        grid: m.grid.clone(),
        bits: labels.iter().map(|&l| l as usize == best).collect(),
    })
}

/// Parameters for [`lung_mask`]. Defaults are an air-to-parenchyma band in HU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LungMaskParams {
    pub lo: f64,
    pub hi: f64,
    pub close_radius: usize,
    pub min_volume_mm3: f64,
    pub connectivity: Connectivity,
}

impl Default for LungMaskParams {
    fn default() -> Self {
        LungMaskParams {
            lo: -1100.0,
            hi: -400.0,
            close_radius: 1,
            min_volume_mm3: 1.0,
            connectivity: Connectivity::Six,
        }
    }
}

/// Threshold, drop components touching the grid boundary, keep the largest,
/// then close. The result never touches the grid boundary.
pub fn lung_mask(v: &Volume, params: &LungMaskParams) -> Result<BinaryMask> {
    let band = threshold(v, params.lo, params.hi)?;
    if band.is_empty() {
        return Err(Error::SegmentationFailure(format!(
            "no voxels in band [{}, {}]",
            params.lo, params.hi
        )));
    }
    let (labels, sizes) = label_components(&band, params.connectivity);
    let d = band.grid.dims;
    let mut touching = vec![false; sizes.len()];
    for (idx, &l) in labels.iter().enumerate() {
        if l != 0 {
            let c = band.grid.coords(idx);
            if (0..3).any(|a| c[a] == 0 || c[a] == d[a] - 1) {
                touching[l as usize] = true;
            }
        }
    }
    let interior = BinaryMask {
        grid: band.grid.clone(),
        bits: labels.iter().map(|&l| l != 0 && !touching[l as usize]).collect(),
    };
    if interior.is_empty() {
        return Err(Error::SegmentationFailure(
            "every in-band component touches the volume boundary".into(),
        ));
    }
    let largest = largest_component(&interior, params.connectivity)?;
    let mut closed = if params.close_radius > 0 {
        morphology(&largest, MorphOp::Close, params.close_radius)?
    } else {
        largest
    };
    for idx in 0..closed.bits.len() {
        let c = closed.grid.coords(idx);
        if (0..3).any(|a| c[a] == 0 || c[a] == d[a] - 1) {
            closed.bits[idx] = false;
        }
    }
    let volume = closed.physical_volume();
    if volume < params.min_volume_mm3 {
        return Err(Error::SegmentationFailure(format!(
            "largest component is {volume:.3} mm³, below the {} mm³ minimum",
            params.min_volume_mm3
        )));
    }
    Ok(closed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Grid {
        Grid::new([n; 3], [1.0; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn threshold_predicate() {
        let g = Grid::new([3, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume::from_fn(g, |i, _, _| [-1000.0, -500.0, 0.0][i]).unwrap();
        let m = threshold(&v, -1100.0, -400.0).unwrap();
        assert_eq!(&m.bits()[..3], &[true, true, false]);
        let all = threshold(&v, f64::NEG_INFINITY, f64::INFINITY).unwrap();
        assert_eq!(all.count(), 12);
        assert!(threshold(&v, 1.0, 0.0).is_err());
    }

    #[test]
    fn dilate_single_voxel_gives_six_ball() {
        let mut m = BinaryMask::empty(grid(5));
        m.set(2, 2, 2, true);
        let d = morphology(&m, MorphOp::Dilate, 1).unwrap();
        assert_eq!(d.count(), 7);
        assert!(d.get(1, 2, 2) && d.get(2, 2, 3) && !d.get(1, 1, 2));
    }

    #[test]
    fn erode_full_mask_is_fixed_point() {
        let m = BinaryMask::full(grid(4));
        assert_eq!(morphology(&m, MorphOp::Erode, 2).unwrap(), m);
    }

    #[test]
    fn close_fills_isolated_hole() {
        let mut m = BinaryMask::empty(grid(7));
        for k in 1..6 {
            for j in 1..6 {
                for i in 1..6 {
                    m.set(i, j, k, true);
                }
            }
        }
        let mut holed = m.clone();
        holed.set(3, 3, 3, false);
        assert_eq!(morphology(&holed, MorphOp::Close, 1).unwrap(), m);
    }

    #[test]
    fn zero_radius_rejected() {
        assert!(morphology(&BinaryMask::full(grid(3)), MorphOp::Open, 0).is_err());
    }

    #[test]
    fn largest_component_keeps_bigger() {
        let mut m = BinaryMask::empty(grid(10));
        for i in 0..3 {
            m.set(i, 0, 0, true);
        }
        for i in 0..5 {
            m.set(i, 5, 5, true);
        }
        let l = largest_component(&m, Connectivity::Six).unwrap();
        assert_eq!(l.count(), 5);
        assert!(l.get(0, 5, 5) && !l.get(0, 0, 0));
        assert!(matches!(
            largest_component(&BinaryMask::empty(grid(3)), Connectivity::Six),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn largest_component_tie_prefers_first_seed() {
        let mut m = BinaryMask::empty(grid(6));
        m.set(4, 4, 4, true);
        m.set(0, 0, 0, true);
        let l = largest_component(&m, Connectivity::TwentySix).unwrap();
        assert!(l.get(0, 0, 0) && !l.get(4, 4, 4));
    }

    #[test]
    fn diagonal_neighbours_depend_on_connectivity() {
        let mut m = BinaryMask::empty(grid(4));
        m.set(1, 1, 1, true);
        m.set(2, 2, 2, true);
        assert_eq!(largest_component(&m, Connectivity::Six).unwrap().count(), 1);
        assert_eq!(largest_component(&m, Connectivity::TwentySix).unwrap().count(), 2);
    }

    #[test]
    fn lung_mask_rejects_empty_band() {
        let v = Volume::constant(grid(8), 0.0).unwrap();
        assert!(matches!(
            lung_mask(&v, &LungMaskParams::default()),
            Err(Error::SegmentationFailure(_))
        ));
    }

    #[test]
    fn lung_mask_drops_exterior_air() {
        // Air everywhere except a tissue shell enclosing an inner cavity.
        let v = Volume::from_fn(grid(12), |i, j, k| {
            let inside = |lo: usize, hi: usize| [i, j, k].iter().all(|&c| c >= lo && c <= hi);
            if inside(4, 7) {
                -900.0
            } else if inside(2, 9) {
                40.0
            } else {
                -1000.0
            }
        })
        .unwrap();
        let m = lung_mask(&v, &LungMaskParams::default()).unwrap();
        assert_eq!(m.count(), 64);
        assert!(!m.touches_boundary());
    }

    #[test]
    fn lung_mask_minimum_volume() {
        let v = Volume::from_fn(grid(8), |i, j, k| if (i, j, k) == (4, 4, 4) { -900.0 } else { 0.0 }).unwrap();
        let params = LungMaskParams {
            min_volume_mm3: 2.0,
            ..Default::default()
        };
        assert!(lung_mask(&v, &params).is_err());
    }
}
