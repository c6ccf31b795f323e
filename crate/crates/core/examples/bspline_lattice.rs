//! Evaluates a cubic B-spline displacement field, its Jacobian, and checks
//! that lattice refinement leaves the field unchanged.
//!
//! cargo run --release --example bspline_lattice

use lungfuse::penalty::jacobian_determinant;
use lungfuse::transform::ControlLattice;
use lungfuse::volume::Aabb;
use lungfuse::Vec3;

fn main() -> lungfuse::Result<()> {
    let extent = Aabb::new(Vec3::zeros(), Vec3::repeat(20.0));
    let lattice = ControlLattice::covering(&extent, [5.0; 3])?;
    let centre = Vec3::repeat(10.0);
    let coarse = ControlLattice::from_fn(lattice.dims(), lattice.spacing(), lattice.origin(), |p| {
        let r = p - centre;
        Vec3::new(-r[1], r[0], 0.0) * 0.05 * (-r.norm_squared() / 100.0).exp()
    })?;
    let fine = coarse.refine();
    println!("lattice {:?} -> refined {:?} at {:?} mm", coarse.dims(), fine.dims(), fine.spacing());

    for x in [Vec3::new(4.0, 10.0, 10.0), Vec3::new(10.0, 10.0, 10.0), Vec3::new(13.5, 6.2, 9.0)] {
        let d = coarse.displacement(&x)?;
        let drift = (fine.displacement(&x)? - d).norm();
        let det = jacobian_determinant(&coarse, &x)?;
        println!("x {:?}: u = {:.4?}, det J = {det:.5}, refinement drift {drift:.1e}", x.as_slice(), d.as_slice());
    }
    Ok(())
}
