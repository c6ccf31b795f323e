//! Builds a three-level pyramid for a clinical CT / micro-CT pair and shows
//! the factor-of-two spacing schedule.
//!
//! cargo run --release --example resample_pyramid

use lungfuse::mask::BinaryMask;
use lungfuse::phantom::lung_phantom;
use lungfuse::volume::{build_pyramid, downsample, upsample, Grid};

fn main() -> lungfuse::Result<()> {
    let clinical = Grid::new([48, 48, 40], [0.625, 0.625, 0.6], [0.0; 3])?;
    let specimen = Grid::new([96, 96, 80], [0.125; 3], [10.0, 10.0, 8.0])?;
    let (reference, _) = lung_phantom(&clinical, 1, 20.0)?;
    let (floating, _) = lung_phantom(&specimen, 2, 20.0)?;

    let half = downsample(&floating, 2)?;
    println!("specimen {:?} @ {:?} -> {:?} @ {:?}", floating.dims(), floating.spacing(), half.dims(), half.spacing());
    let fine = upsample(&reference, [0.3125, 0.3125, 0.3])?;
    println!("clinical {:?} -> {:?} after upsampling", reference.dims(), fine.dims());

    let pyramid = build_pyramid(
        &reference,
        &half,
        &BinaryMask::full(clinical),
        &BinaryMask::full(half.grid().clone()),
        3,
    )?;
    for (i, level) in pyramid.iter().enumerate() {
        println!(
            "level {i}: spacing {:.3} mm, reference {:?}, floating {:?}",
            level.target_spacing[0],
            level.reference.dims(),
            level.floating.dims()
        );
    }
    Ok(())
}
