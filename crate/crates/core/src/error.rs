use std::path::PathBuf;

use thiserror::Error;

use crate::optimizer::RegistrationResult;

pub type Result<T> = std::result::Result<T, Error>;

/// Header-level MetaImage diagnostics. Each carries the offending key or line.
#[derive(Debug, Error)]
pub enum MetaImageError {
    #[error("line {line}: expected `Key = Value`, found {text:?}")]
    Malformed { line: usize, text: String },
    #[error("missing required key `{0}`")]
    MissingKey(&'static str),
    #[error("line {line}: NDims = {found}, only 3-D images are supported")]
    NotThreeDimensional { line: usize, found: String },
    #[error("line {line}: unknown ElementType `{found}`")]
    UnknownElementType { line: usize, found: String },
    #[error("line {line}: invalid value for `{key}`: {value:?}")]
    InvalidValue {
        line: usize,
        key: String,
        value: String,
    },
    #[error("payload length mismatch: expected {expected} bytes, found {actual}")]
    PayloadLength { expected: usize, actual: usize },
    #[error("compressed payloads are not supported")]
    Compressed,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("crop box does not intersect the volume extent")]
    DisjointExtents,
    #[error("point ({:.3}, {:.3}, {:.3}) lies outside the control lattice support", .0[0], .0[1], .0[2])]
    InsufficientLattice([f64; 3]),
    #[error("mask is empty")]
    EmptyMask,
    #[error("lung segmentation failed: {0}")]
    SegmentationFailure(String),
    #[error("unusable overlap: {samples} contributing voxels, at least {required} required")]
    UnusableOverlap { samples: usize, required: usize },
    #[error("{count} sample points have non-positive Jacobian determinant; run folding correction first")]
    NonPositiveJacobian { count: usize },
    #[error("folding correction did not converge after {iterations} iterations; {} points still folded", .locations.len())]
    FoldingNotRepaired {
        iterations: usize,
        locations: Vec<[f64; 3]>,
    },
    #[error("gross misalignment: {out_of_domain} of {total} round trips leave the lattice domain")]
    GrossMisalignment { out_of_domain: usize, total: usize },
    #[error("degenerate test: all paired differences are zero")]
    DegenerateTest,
    #[error("too few landmarks: {found} pairs, at least 3 required")]
    TooFewLandmarks { found: usize },
    #[error("duplicate landmark source point at index {index}")]
    DuplicateLandmark { index: usize },
    #[error("landmark configuration is rank deficient: {0}")]
    RankDeficient(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    MetaImage {
        path: PathBuf,
        #[source]
        source: MetaImageError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("registration aborted at level {level}: {source}")]
    Registration {
        level: usize,
        #[source]
        source: Box<Error>,
        partial: Box<RegistrationResult>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (files, flags, config)
    /// rather than by a numerical failure during processing.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::InvalidInput(_)
            | Error::Config(_)
            | Error::TooFewLandmarks { .. }
            | Error::DuplicateLandmark { .. }
            | Error::RankDeficient(_)
            | Error::Parse { .. }
            | Error::MetaImage { .. }
            | Error::DisjointExtents => true,
            Error::Registration { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
