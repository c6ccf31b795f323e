//! Writes a volume as MetaImage in each supported element type and reads it
//! back, then stores a control lattice with its JSON sidecar.
//!
//! cargo run --release --example metaimage_io

use lungfuse::io::{read_lattice, read_raw_metaimage, write_lattice, write_metaimage_as, ElementType};
use lungfuse::transform::ControlLattice;
use lungfuse::volume::{Grid, Volume};
use lungfuse::Vec3;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("lungfuse-metaimage-example");
    std::fs::create_dir_all(&dir)?;
    let grid = Grid::new([8, 6, 4], [0.5, 0.5, 1.25], [-2.0, 0.0, 10.0])?;
    let volume = Volume::from_fn(grid.clone(), |i, j, k| (i * 30 + j * 7 + k) as f64)?;

    for (ty, name) in [
        (ElementType::UChar, "uchar.mha"),
        (ElementType::Short, "short.mhd"),
        (ElementType::Float, "float.mha"),
        (ElementType::Double, "double.mhd"),
    ] {
        let path = dir.join(name);
        write_metaimage_as(&volume, &path, ty, false)?;
        let back = read_raw_metaimage(&path)?;
        let exact = back.values == volume.data();
        println!("{name:>11}: {:?}, {} bytes of voxels, exact {exact}", back.header.element_type, back.header.payload_len());
    }

    let cover = ControlLattice::covering(&grid.extent(), [2.0; 3])?;
    let lattice = ControlLattice::from_fn(cover.dims(), cover.spacing(), cover.origin(), |p| {
        Vec3::new(0.01 * p[2], 0.0, -0.02 * p[0])
    })?;
    let path = dir.join("lattice.mha");
    write_lattice(&lattice, &path)?;
    let back = read_lattice(&path)?;
    println!("lattice {:?} round trip exact: {}", back.dims(), back == lattice);
    println!("files in {}", dir.display());
    Ok(())
}
