//! Fits the initial alignment from landmark pairs, then shows the similarity
//! fallback when only three pairs are available.
//!
//! cargo run --release --example landmark_affine

use lungfuse::io::parse_landmarks;
use lungfuse::transform::fit_affine_landmarks;

const PAIRS: &str = "\
# reference (mm)        specimen (mm)
10.0  12.0  30.0        1.9   3.1   4.8
42.0  15.0  28.0        9.9   2.6   4.3
25.0  40.0  33.0        5.5  10.4   6.2
28.0  22.0  55.0        6.4   5.0  11.7
35.0  35.0  45.0        8.2   8.6   9.5
";

fn main() -> lungfuse::Result<()> {
    let set = parse_landmarks(PAIRS, "inline".as_ref())?;
    let fit = fit_affine_landmarks(&set)?;
    println!("{:?} fit, rms residual {:.3} mm", fit.mode, set.rms_error(&fit.transform));
    let m = fit.transform.matrix();
    for r in 0..3 {
        println!("  [{:8.4} {:8.4} {:8.4}]  + {:8.4}", m[(r, 0)], m[(r, 1)], m[(r, 2)], fit.transform.translation()[r]);
    }

    let three: String = PAIRS.lines().take(4).map(|l| format!("{l}\n")).collect();
    let set = parse_landmarks(&three, "inline".as_ref())?;
    let fit = fit_affine_landmarks(&set)?;
    println!("{:?} fit from three pairs, rms residual {:.3} mm", fit.mode, set.rms_error(&fit.transform));
    Ok(())
}
