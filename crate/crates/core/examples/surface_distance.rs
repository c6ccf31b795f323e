//! Average minimum surface distance between a sphere and a smaller
//! concentric sphere, then a Wilcoxon signed-rank test on paired distances.
//!
//! cargo run --release --example surface_distance

use lungfuse::eval::{evaluate_masks, format_table_row};
use lungfuse::mask::BinaryMask;
use lungfuse::volume::Grid;
use lungfuse::Vec3;

fn sphere(grid: &Grid, radius: f64) -> BinaryMask {
    let c = Vec3::repeat(20.0);
    BinaryMask::from_fn(grid.clone(), |i, j, k| (grid.point(i, j, k) - c).norm() <= radius)
}

fn main() -> lungfuse::Result<()> {
    let grid = Grid::new([41, 41, 41], [1.0; 3], [0.0; 3])?;
    let reference = sphere(&grid, 14.0);
    let before = sphere(&grid, 10.0);
    let after = sphere(&grid, 13.0);

    let report = evaluate_masks(&reference, &before, &after)?;
    println!("{}", format_table_row("sphere", &report.before, &report.after));
    match report.p_value {
        Some(p) => println!("Wilcoxon p = {p:.3e} over {} paired points", report.before.n),
        None => println!("all paired differences are zero"),
    }
    Ok(())
}
