//! Recovers a known smooth warp of a 64³ lung phantom with the default
//! four-level configuration and reports the endpoint error.
//!
//! cargo run --release --example register_phantom [-- <dims> <amplitude_voxels> <levels>]

use std::time::Instant;

use lungfuse::optimizer::{register, ObjectiveConfig};
use lungfuse::phantom::{endpoint_error, warped_lung};
use lungfuse::transform::AffineTransform;

fn main() -> lungfuse::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(64);
    let amplitude: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8.0);

    let case = warped_lung([n; 3], amplitude, 2024)?;
    let truth = case.truth.clone().expect("warped phantom has a true lattice");
    let mut cfg = ObjectiveConfig::default();
    if let Some(levels) = args.get(3).and_then(|s| s.parse().ok()) {
        cfg.levels = levels;
    }

    let start = Instant::now();
    let result = register(
        &case.reference,
        &case.floating,
        &case.reference_mask,
        &case.floating_mask,
        &AffineTransform::identity(),
        &cfg,
    )?;
    println!("registration took {:.1} s", start.elapsed().as_secs_f64());

    for (level, trace) in result.objective_trace.iter().enumerate() {
        let first = trace.first().map_or(f64::NAN, |t| t.total);
        let last = trace.last().map_or(f64::NAN, |t| t.total);
        println!(
            "level {level}: {:?}, {} accepted steps, objective {first:.5} -> {last:.5}",
            result.level_status[level],
            trace.len().saturating_sub(1),
        );
    }

    let identity = lungfuse::transform::Deformation::identity();
    let (before_mean, before_max) = endpoint_error(&truth, &identity, &case.reference_mask)?;
    let (mean, max) = endpoint_error(&truth, &result.forward(), &case.reference_mask)?;
    println!("endpoint error before: mean {before_mean:.3} max {before_max:.3} voxels");
    println!("endpoint error after:  mean {mean:.3} max {max:.3} voxels");
    Ok(())
}
