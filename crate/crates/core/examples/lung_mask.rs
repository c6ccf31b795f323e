//! Segments two air-filled lobes inside a soft-tissue body surrounded by
//! exterior air, and prints a mid-plane slice of the mask.
//!
//! cargo run --release --example lung_mask

use lungfuse::mask::{lung_mask, LungMaskParams};
use lungfuse::volume::{Grid, Volume};
use lungfuse::Vec3;
use rand::{Rng, SeedableRng};

fn main() -> lungfuse::Result<()> {
    let grid = Grid::new([48, 40, 24], [1.0; 3], [0.0; 3])?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let inside = |p: Vec3, c: Vec3, r: Vec3| (p - c).component_div(&r).norm() < 1.0;
    let scan = Volume::from_fn(grid.clone(), |i, j, k| {
        let p = grid.point(i, j, k);
        let lobe = |x: f64| inside(p, Vec3::new(x, 19.5, 11.5), Vec3::new(9.0, 14.0, 9.0));
        let vessel = (p[1] - 19.5).abs() < 1.0 && (p[2] - 11.5).abs() < 1.0;
        let base = if !inside(p, Vec3::new(23.5, 19.5, 11.5), Vec3::new(22.0, 18.0, 30.0)) {
            -1000.0
        } else if (lobe(12.5) || lobe(34.5)) && !vessel {
            -850.0
        } else {
            40.0
        };
        base + rng.gen_range(-30.0..30.0)
    })?;

    let mask = lung_mask(&scan, &LungMaskParams::default())?;
    // Exterior air touches the border; of the two equal lobes the first found is kept.
    println!("kept {} voxels ({:.0} mm³)", mask.count(), mask.physical_volume());
    let k = grid.dims[2] / 2;
    for j in (0..grid.dims[1]).step_by(2) {
        let row: String = (0..grid.dims[0]).map(|i| if mask.get(i, j, k) { '#' } else { '.' }).collect();
        println!("{row}");
    }
    Ok(())
}
