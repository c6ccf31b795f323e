//! Command-line frontend. Exit codes: 0 success, 1 invalid input or
//! configuration, 2 failure while processing.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::eval::{evaluate_masks, format_table_row};
use crate::io::{
    read_config, read_lattice, read_landmarks, read_mask, read_metaimage, read_volume, write_json, write_lattice,
    write_mask, write_metaimage, write_result, Image,
};
use crate::mask::{lung_mask, BinaryMask, LungMaskParams};
use crate::optimizer::{register, ObjectiveConfig};
use crate::phantom::{sphere_pair, warped_lung, PhantomCase};
use crate::similarity::joint_histogram;
use crate::transform::{fit_affine_landmarks, fit_landmarks_with_mode, AffineTransform, Deformation, FitMode};
use crate::volume::{crop_range, Aabb, Grid, Volume};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "lungfuse", version, about = "Register specimen micro-CT to clinical CT")]
pub struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true, env = "LUNGFUSE_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment lung tissue from a CT volume.
    Mask(MaskArgs),
    /// Fit the initial affine from landmark pairs (reference point, specimen point).
    Init(InitArgs),
    /// Non-rigid registration of the specimen to the reference.
    Register(RegisterArgs),
    /// Warp the specimen (or a specimen mask) onto a reference grid.
    Resample(ResampleArgs),
    /// Surface distances before and after registration.
    Evaluate(EvaluateArgs),
    /// Write a synthetic test pair with known ground truth.
    Phantom(PhantomArgs),
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = -1100.0, allow_negative_numbers = true)]
    pub lo: f64,
    #[arg(long, default_value_t = -400.0, allow_negative_numbers = true)]
    pub hi: f64,
    #[arg(long, default_value_t = 1)]
    pub close_radius: usize,
    /// Minimum component volume in mm³.
    #[arg(long, default_value_t = 1.0)]
    pub min_volume: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Affine,
    Similarity,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long)]
    pub landmarks: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Default: full affine, or similarity for three or coplanar points.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long = "float")]
    pub floating: PathBuf,
    #[arg(long)]
    pub ref_mask: PathBuf,
    #[arg(long)]
    pub float_mask: PathBuf,
    /// Reference-to-specimen affine (default identity).
    #[arg(long)]
    pub affine: Option<PathBuf>,
    /// TOML or JSON objective configuration.
    #[arg(long, env = "LUNGFUSE_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, env = "LUNGFUSE_ALPHA")]
    pub alpha: Option<f64>,
    #[arg(long, env = "LUNGFUSE_BETA")]
    pub beta: Option<f64>,
    #[arg(long, env = "LUNGFUSE_GAMMA")]
    pub gamma: Option<f64>,
    #[arg(long, env = "LUNGFUSE_LEVELS")]
    pub levels: Option<usize>,
    #[arg(long, env = "LUNGFUSE_MAX_ITERS")]
    pub max_iters: Option<usize>,
    #[arg(long, env = "LUNGFUSE_BINS")]
    pub bins: Option<usize>,
    /// Also write the final joint histogram as CSV.
    #[arg(long)]
    pub histogram_csv: Option<PathBuf>,
    /// Voxels of margin kept around the mapped specimen extent.
    #[arg(long, default_value_t = 4)]
    pub crop_margin: usize,
}

#[derive(Debug, Args)]
pub struct ResampleArgs {
    #[arg(long = "float")]
    pub floating: PathBuf,
    #[arg(long)]
    pub affine: Option<PathBuf>,
    #[arg(long)]
    pub lattice: Option<PathBuf>,
    /// Grid (and, with --checkerboard, content) of the output.
    #[arg(long)]
    pub like: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Alternate blocks of this many voxels between reference and warped specimen.
    #[arg(long)]
    pub checkerboard: Option<usize>,
    #[arg(long, default_value_t = -1024.0, allow_negative_numbers = true)]
    pub background: f64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ref_mask: PathBuf,
    #[arg(long)]
    pub float_mask_before: PathBuf,
    #[arg(long)]
    pub float_mask_after: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    Sphere,
    WarpedLung,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long, value_enum)]
    pub preset: Preset,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 2024, env = "LUNGFUSE_SEED")]
    pub seed: u64,
    /// Edge length of the cubic grid in voxels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Warp amplitude (warped-lung) or shrink depth (sphere), in voxels.
    #[arg(long, default_value_t = 8.0)]
    pub amount: f64,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code. Diagnostics go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: could not size the thread pool: {e}");
        }
    }
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::Mask(a) => cmd_mask(a),
        Command::Init(a) => cmd_init(a),
        Command::Register(a) => cmd_register(a),
        Command::Resample(a) => cmd_resample(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Phantom(a) => cmd_phantom(a),
    }
}

fn cmd_mask(a: &MaskArgs) -> Result<()> {
    let v = read_volume(&a.input)?;
    let params = LungMaskParams {
        lo: a.lo,
        hi: a.hi,
        close_radius: a.close_radius,
        min_volume_mm3: a.min_volume,
        ..LungMaskParams::default()
    };
    let m = lung_mask(&v, &params)?;
    println!("{} voxels, {:.1} mm³", m.count(), m.physical_volume());
    write_mask(&m, &a.out)
}

fn cmd_init(a: &InitArgs) -> Result<()> {
    let lm = read_landmarks(&a.landmarks)?;
    let fit = match a.mode {
        None => fit_affine_landmarks(&lm)?,
        Some(ModeArg::Affine) => fit_landmarks_with_mode(&lm, FitMode::Affine)?,
        Some(ModeArg::Similarity) => fit_landmarks_with_mode(&lm, FitMode::Similarity)?,
    };
    println!(
        "{:?} fit from {} pairs, rms residual {:.4} mm",
        fit.mode,
        lm.len(),
        lm.rms_error(&fit.transform)
    );
    write_json(&a.out, &fit.transform)
}

fn read_affine(path: Option<&Path>) -> Result<AffineTransform> {
    let Some(path) = path else {
        return Ok(AffineTransform::identity());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Physical box in the reference frame covering the specimen grid mapped
/// back through `affine` (reference → specimen).
fn mapped_extent(floating: &Grid, affine: &AffineTransform) -> Aabb {
    let inv = affine.inverse();
    let corners: Vec<_> = floating.extent().corners().iter().map(|c| inv.apply(c)).collect();
    Aabb::from_points(&corners).expect("eight corners")
}

fn crop_mask(m: &BinaryMask, lo: [usize; 3], hi: [usize; 3]) -> BinaryMask {
    let grid = m.grid().sub_grid(lo, hi);
    BinaryMask::from_fn(grid, |i, j, k| m.get(lo[0] + i, lo[1] + j, lo[2] + k))
}

fn load_config(a: &RegisterArgs) -> Result<ObjectiveConfig> {
    let mut cfg = match &a.config {
        Some(p) => read_config(p)?,
        None => ObjectiveConfig::default(),
    };
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.beta {
        cfg.beta = v;
    }
    if let Some(v) = a.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = a.levels {
        cfg.levels = v;
    }
    if let Some(v) = a.max_iters {
        cfg.max_iters_per_level = v;
    }
    if let Some(v) = a.bins {
        cfg.bins = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_register(a: &RegisterArgs) -> Result<()> {
    let cfg = load_config(a)?;
    let affine = read_affine(a.affine.as_deref())?;
    let reference = read_volume(&a.reference)?;
    let floating = read_volume(&a.floating)?;
    let ref_mask = read_mask(&a.ref_mask)?;
    let float_mask = read_mask(&a.float_mask)?;
    if ref_mask.grid() != reference.grid() || float_mask.grid() != floating.grid() {
        return Err(Error::InvalidInput("each mask must share its volume's grid".into()));
    }

    let (lo, hi) = crop_range(reference.grid(), &mapped_extent(floating.grid(), &affine), a.crop_margin)?;
    let grid = reference.grid().sub_grid(lo, hi);
    let cropped = Volume::from_fn(grid, |i, j, k| reference.get(lo[0] + i, lo[1] + j, lo[2] + k))?;
    let cropped_mask = crop_mask(&ref_mask, lo, hi);
    println!("reference cropped to {:?} voxels at {:?}", cropped.dims(), lo);

    let result = match register(&cropped, &floating, &cropped_mask, &float_mask, &affine, &cfg) {
        Ok(r) => r,
        Err(Error::Registration { level, source, partial }) => {
            write_result(&partial, &a.out_dir, None)?;
            eprintln!("partial result up to level {level} written to {}", a.out_dir.display());
            return Err(Error::Registration { level, source, partial });
        }
        Err(e) => return Err(e),
    };
    write_result(&result, &a.out_dir, None)?;
    for (level, status) in result.level_status.iter().enumerate() {
        let last = result.objective_trace[level].last().map_or(f64::NAN, |t| t.total);
        println!("level {level}: {status:?}, objective {last:.6}");
    }
    if let Some(path) = &a.histogram_csv {
        let h = joint_histogram(
            &cropped,
            &floating,
            &result.forward(),
            &cropped_mask,
            &cfg.similarity_config(),
            None,
        )?;
        fs::write(path, h.to_csv()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn cmd_resample(a: &ResampleArgs) -> Result<()> {
    let input = read_metaimage(&a.floating)?;
    let like = read_volume(&a.like)?;
    let affine = read_affine(a.affine.as_deref())?;
    let deformation = match &a.lattice {
        Some(p) => Deformation::new(affine, read_lattice(p)?),
        None => Deformation::affine(affine),
    };
    let floating = match input {
        Image::Mask(m) => {
            // Masks stay masks: interpolate the indicator, re-binarise at 0.5.
            let warped = warp_onto(&m.to_volume(), &deformation, like.grid(), 0.0)?;
            let bits = warped.data().iter().map(|&v| v >= 0.5).collect();
            return write_mask(&BinaryMask::new(like.grid().clone(), bits)?, &a.out);
        }
        Image::Volume(v) => v,
    };
    let warped = warp_onto(&floating, &deformation, like.grid(), a.background)?;
    let out = match a.checkerboard {
        Some(0) => return Err(Error::InvalidInput("--checkerboard needs a block size ≥ 1".into())),
        Some(n) => checkerboard(&like, &warped, n)?,
        None => warped,
    };
    write_metaimage(&out, &a.out)
}

/// Like `resample_with_transform`, but voxels outside the lattice support
/// get `background` instead of failing.
fn warp_onto(floating: &Volume, d: &Deformation, target: &Grid, background: f64) -> Result<Volume> {
    Volume::from_fn(target.clone(), |i, j, k| {
        d.apply(&target.point(i, j, k))
            .and_then(|y| floating.sample(&y))
            .unwrap_or(background)
    })
}

/// Interleaves two volumes on the same grid in cubes of `n` voxels.
pub fn checkerboard(a: &Volume, b: &Volume, n: usize) -> Result<Volume> {
    if a.grid() != b.grid() {
        return Err(Error::InvalidInput("checkerboard inputs must share a grid".into()));
    }
    Volume::from_fn(a.grid().clone(), |i, j, k| {
        if (i / n + j / n + k / n) % 2 == 0 {
            a.get(i, j, k)
        } else {
            b.get(i, j, k)
        }
    })
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let reference = read_mask(&a.ref_mask)?;
    let before = read_mask(&a.float_mask_before)?;
    let after = read_mask(&a.float_mask_after)?;
    let report = evaluate_masks(&reference, &before, &after)?;
    println!("{}", format_table_row("specimen", &report.before, &report.after));
    match report.p_value {
        Some(p) => println!("Wilcoxon signed-rank p = {p:.3e}"),
        None => println!("Wilcoxon signed-rank: degenerate (all differences zero)"),
    }
    write_json(&a.out, &report)
}

fn cmd_phantom(a: &PhantomArgs) -> Result<()> {
    let dims = [a.size; 3];
    let case: PhantomCase = match a.preset {
        Preset::WarpedLung => warped_lung(dims, a.amount, a.seed)?,
        Preset::Sphere => sphere_pair(dims, a.size as f64 * 0.3, a.amount, a.seed)?,
    };
    let dir = &a.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_metaimage(&case.reference, dir.join("reference.mha"))?;
    write_metaimage(&case.floating, dir.join("floating.mha"))?;
    write_mask(&case.reference_mask, dir.join("reference_mask.mha"))?;
    write_mask(&case.floating_mask, dir.join("floating_mask.mha"))?;
    write_mask(&case.reference_object, dir.join("reference_object.mha"))?;
    write_mask(&case.floating_object, dir.join("floating_object.mha"))?;
    write_json(&dir.join("affine.json"), &AffineTransform::identity())?;
    if let Some(truth) = &case.truth {
        write_lattice(truth, dir.join("truth.mha"))?;
    }
    println!("wrote {:?} phantom to {}", a.preset, dir.display());
    Ok(())
}
