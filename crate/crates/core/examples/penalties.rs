//! Smoothness, volume-preservation and inverse-consistency penalties for a
//! few simple lattices, plus folding repair of a collapsed control point.
//!
//! cargo run --release --example penalties

use lungfuse::penalty::{bending_energy, correct_folding, inverse_consistency, min_determinant, volume_preservation};
use lungfuse::transform::{AffineTransform, ControlLattice, Deformation};
use lungfuse::volume::Grid;
use lungfuse::Vec3;

fn main() -> lungfuse::Result<()> {
    let domain = Grid::new([24, 24, 24], [1.0; 3], [0.0; 3])?;
    let base = ControlLattice::covering(&domain.extent(), [4.0; 3])?;
    let (d, s, o) = (base.dims(), base.spacing(), base.origin());

    let shift = ControlLattice::from_fn(d, s, o, |_| Vec3::new(1.5, 0.0, -0.5))?;
    let stretch = ControlLattice::from_fn(d, s, o, |p| Vec3::new(0.1 * p[0], 0.0, 0.0))?;
    let wave = ControlLattice::from_fn(d, s, o, |p| Vec3::new((p[1] / 4.0).sin(), 0.0, 0.0))?;
    for (label, l) in [("translation", &shift), ("10% stretch", &stretch), ("sine wave", &wave)] {
        println!(
            "{label:>12}: bending {:.3e}, volume {:.3e}",
            bending_energy(l, &domain)?.value,
            volume_preservation(l, &domain)?.value
        );
    }

    let forward = Deformation::affine(AffineTransform::from_translation(Vec3::new(0.5, 0.0, 0.0)));
    let ic = inverse_consistency(&forward, &Deformation::identity(), &domain, &domain)?;
    println!("inverse consistency of a 0.5 mm one-sided shift: {:.3} over {:?} samples", ic.value, ic.samples);

    let mut folded = base.clone();
    let [nx, ny, _] = folded.dims();
    folded.coefficients_mut()[3 + 3 * nx + 3 * nx * ny] = Vec3::repeat(-10.0);
    let before = min_determinant(&folded, &domain, 1)?;
    let (fixed, report) = correct_folding(&folded, &domain)?;
    println!(
        "folding: min det {before:.3} -> {:.3} after {} iterations ({} points corrected)",
        min_determinant(&fixed, &domain, 1)?,
        report.iterations,
        report.corrected_points.len()
    );
    Ok(())
}
