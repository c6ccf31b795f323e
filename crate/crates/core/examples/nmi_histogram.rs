//! Parzen-window joint histogram and normalised mutual information of a
//! phantom against itself, a shifted copy and a contrast-inverted copy.
//!
//! cargo run --release --example nmi_histogram

use lungfuse::mask::BinaryMask;
use lungfuse::phantom::lung_phantom;
use lungfuse::similarity::{joint_histogram, nmi, IntensityWindow, SimilarityConfig};
use lungfuse::transform::{AffineTransform, Deformation};
use lungfuse::volume::Grid;
use lungfuse::Vec3;

fn main() -> lungfuse::Result<()> {
    let grid = Grid::new([40, 40, 40], [1.0; 3], [0.0; 3])?;
    let (reference, _) = lung_phantom(&grid, 3, 10.0)?;
    let inverted = reference.map(|v| -v);
    let (lo, hi) = reference.min_max();
    let windows = [IntensityWindow::new(lo, hi)?, IntensityWindow::new(lo, hi)?];
    let flipped = [windows[0], IntensityWindow::new(-hi, -lo)?];
    // Keep every sample inside the floating image when shifted.
    let mask = BinaryMask::from_fn(grid.clone(), |i, j, k| [i, j, k].iter().all(|&c| (4..36).contains(&c)));
    let cfg = SimilarityConfig { bins: 32, ..SimilarityConfig::default() };

    let cases = [
        ("identity", Deformation::identity(), &reference, windows),
        ("shift 2 mm", Deformation::affine(AffineTransform::from_translation(Vec3::new(2.0, 0.0, 0.0))), &reference, windows),
        ("inverted contrast", Deformation::identity(), &inverted, flipped),
    ];
    for (label, deformation, floating, w) in cases {
        let h = joint_histogram(&reference, floating, &deformation, &mask, &cfg, Some(w))?;
        let e = h.entropies();
        println!(
            "{label:>18}: NMI {:.4} (H_R {:.3}, H_F {:.3}, H_RF {:.3})",
            nmi(&h)?.value,
            e.reference,
            e.floating,
            e.joint
        );
    }
    Ok(())
}
