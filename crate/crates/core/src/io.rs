//! File interchange: MetaImage volumes, masks and lattices, landmark lists,
//! configuration files and registration outputs.
//!
//! MetaImage headers are `Key = Value` lines with case-sensitive keys. A
//! `.mha` file carries the payload after the `ElementDataFile = LOCAL` line;
//! a `.mhd` header names a raw file next to it. Payloads default to
//! little-endian and honour `ElementByteOrderMSB`/`BinaryDataByteOrderMSB`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, MetaImageError, Result};
use crate::eval::EvaluationReport;
use crate::mask::BinaryMask;
use crate::optimizer::{ObjectiveConfig, RegistrationResult};
use crate::transform::{ControlLattice, LandmarkSet, LatticeGeometry};
use crate::volume::{Grid, Volume};
use crate::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementType {
    UChar,
    Short,
    Float,
    Double,
}

impl ElementType {
    pub fn size(self) -> usize {
        match self {
            ElementType::UChar => 1,
            ElementType::Short => 2,
            ElementType::Float => 4,
            ElementType::Double => 8,
        }
    }

    pub fn meta_name(self) -> &'static str {
        match self {
            ElementType::UChar => "MET_UCHAR",
            ElementType::Short => "MET_SHORT",
            ElementType::Float => "MET_FLOAT",
            ElementType::Double => "MET_DOUBLE",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "MET_UCHAR" => ElementType::UChar,
            "MET_SHORT" => ElementType::Short,
            "MET_FLOAT" => ElementType::Float,
            "MET_DOUBLE" => ElementType::Double,
            _ => return None,
        })
    }

    /// True if `v` survives a write/read cycle in this type unchanged.
    fn holds(self, v: f64) -> bool {
        match self {
            ElementType::UChar => v.fract() == 0.0 && (0.0..=255.0).contains(&v),
            ElementType::Short => v.fract() == 0.0 && (-32768.0..=32767.0).contains(&v),
            ElementType::Float => (v as f32) as f64 == v || v.is_nan(),
            ElementType::Double => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataFile {
    Local,
    External(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaImageHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub offset: [f64; 3],
    pub element_type: ElementType,
    pub channels: usize,
    pub msb: bool,
    pub data_file: DataFile,
}

impl MetaImageHeader {
    pub fn payload_len(&self) -> usize {
        self.dims.iter().product::<usize>() * self.channels * self.element_type.size()
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dims, self.spacing, self.offset)
    }

    fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        let mut s = String::new();
        s.push_str("ObjectType = Image\n");
        s.push_str("NDims = 3\n");
        s.push_str("BinaryData = True\n");
        s.push_str(&format!("BinaryDataByteOrderMSB = {}\n", if self.msb { "True" } else { "False" }));
        s.push_str("CompressedData = False\n");
        s.push_str("TransformMatrix = 1 0 0 0 1 0 0 0 1\n");
        s.push_str(&format!("Offset = {}\n", join(&self.offset)));
        s.push_str(&format!("ElementSpacing = {}\n", join(&self.spacing)));
        s.push_str(&format!(
            "DimSize = {} {} {}\n",
            self.dims[0], self.dims[1], self.dims[2]
        ));
        if self.channels != 1 {
            s.push_str(&format!("ElementNumberOfChannels = {}\n", self.channels));
        }
        s.push_str(&format!("ElementType = {}\n", self.element_type.meta_name()));
        match &self.data_file {
            DataFile::Local => s.push_str("ElementDataFile = LOCAL\n"),
            DataFile::External(p) => s.push_str(&format!("ElementDataFile = {}\n", p.display())),
        }
        s
    }
}

fn parse_bool(line: usize, key: &str, v: &str) -> std::result::Result<bool, MetaImageError> {
    match v {
        "True" | "true" | "1" => Ok(true),
        "False" | "false" | "0" => Ok(false),
        _ => Err(invalid(line, key, v)),
    }
}

fn invalid(line: usize, key: &str, value: &str) -> MetaImageError {
    MetaImageError::InvalidValue {
        line,
        key: key.to_string(),
        value: value.to_string(),
    }
}

fn parse_triple<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> std::result::Result<[T; 3], MetaImageError> {
    let parts: Vec<T> = v
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| invalid(line, key, v)))
        .collect::<std::result::Result<_, _>>()?;
    <[T; 3]>::try_from(parts).map_err(|_| invalid(line, key, v))
}

/// Parses header lines from the start of `bytes`. Returns the header and the
/// byte offset just past the `ElementDataFile` line.
pub fn parse_header(bytes: &[u8]) -> std::result::Result<(MetaImageHeader, usize), MetaImageError> {
    let mut ndims_seen = false;
    let mut dims = None;
    let mut spacing = [1.0; 3];
    let mut offset = [0.0; 3];
    let mut element_type = None;
    let mut channels = 1usize;
    let mut msb = false;
    let mut pos = 0usize;
    let mut line_no = 0usize;
    while pos < bytes.len() {
        line_no += 1;
        let end = bytes[pos..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |e| pos + e);
        let raw = String::from_utf8_lossy(&bytes[pos..end]);
        pos = (end + 1).min(bytes.len());
        let text = raw.trim();
        if text.is_empty() {
            continue;
        }
        let Some((key, value)) = text.split_once('=') else {
            return Err(MetaImageError::Malformed {
                line: line_no,
                text: text.to_string(),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "NDims" => {
                if value != "3" {
                    return Err(MetaImageError::NotThreeDimensional {
                        line: line_no,
                        found: value.to_string(),
                    });
                }
                ndims_seen = true;
            }
            "DimSize" => {
                let d: [usize; 3] = parse_triple(line_no, key, value)?;
                if d.contains(&0) {
                    return Err(invalid(line_no, key, value));
                }
                dims = Some(d);
            }
            "ElementSpacing" | "ElementSize" => {
                let s: [f64; 3] = parse_triple(line_no, key, value)?;
                if s.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                    return Err(invalid(line_no, key, value));
                }
                if key == "ElementSpacing" {
                    spacing = s;
                }
            }
            "Offset" | "Origin" | "Position" => offset = parse_triple(line_no, key, value)?,
            "TransformMatrix" | "Rotation" | "Orientation" => {
                let m: Vec<f64> = value
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| invalid(line_no, key, value)))
                    .collect::<std::result::Result<_, _>>()?;
                let identity = m.len() == 9
                    && m.iter().enumerate().all(|(i, x)| (x - if i % 4 == 0 { 1.0 } else { 0.0 }).abs() < 1e-9);
                if !identity {
                    return Err(invalid(line_no, key, value));
                }
            }
            "ElementType" => {
                element_type = Some(ElementType::parse(value).ok_or_else(|| MetaImageError::UnknownElementType {
                    line: line_no,
                    found: value.to_string(),
                })?);
            }
            "ElementNumberOfChannels" => {
                channels = value.parse().ok().filter(|c| *c >= 1).ok_or_else(|| invalid(line_no, key, value))?;
            }
            "ElementByteOrderMSB" | "BinaryDataByteOrderMSB" => msb = parse_bool(line_no, key, value)?,
            "CompressedData" => {
                if parse_bool(line_no, key, value)? {
                    return Err(MetaImageError::Compressed);
                }
            }
            "BinaryData" => {
                if !parse_bool(line_no, key, value)? {
                    return Err(invalid(line_no, key, value));
                }
            }
            "ElementDataFile" => {
                if !ndims_seen {
                    return Err(MetaImageError::MissingKey("NDims"));
                }
                let dims = dims.ok_or(MetaImageError::MissingKey("DimSize"))?;
                let element_type = element_type.ok_or(MetaImageError::MissingKey("ElementType"))?;
                let data_file = if value == "LOCAL" {
                    DataFile::Local
                } else if value.is_empty() || value.contains('%') || value.starts_with("LIST") {
                    return Err(invalid(line_no, key, value));
                } else {
                    DataFile::External(PathBuf::from(value))
                };
                let header = MetaImageHeader {
                    dims,
                    spacing,
                    offset,
                    element_type,
                    channels,
                    msb,
                    data_file,
                };
                return Ok((header, pos));
            }
            _ => {}
        }
    }
    Err(MetaImageError::MissingKey("ElementDataFile"))
}

fn decode(header: &MetaImageHeader, payload: &[u8]) -> std::result::Result<Vec<f64>, MetaImageError> {
    let expected = header.payload_len();
    if payload.len() != expected {
        return Err(MetaImageError::PayloadLength {
            expected,
            actual: payload.len(),
        });
    }
    let size = header.element_type.size();
    let msb = header.msb;
    let values = payload
        .chunks_exact(size)
        .map(|c| match header.element_type {
            ElementType::UChar => c[0] as f64,
            ElementType::Short => {
                let b = [c[0], c[1]];
                (if msb { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) }) as f64
            }
            ElementType::Float => {
                let b = [c[0], c[1], c[2], c[3]];
                (if msb { f32::from_be_bytes(b) } else { f32::from_le_bytes(b) }) as f64
            }
            ElementType::Double => {
                let b: [u8; 8] = c.try_into().expect("chunk of 8");
                if msb {
                    f64::from_be_bytes(b)
                } else {
                    f64::from_le_bytes(b)
                }
            }
        })
        .collect();
    Ok(values)
}

fn encode(values: &[f64], ty: ElementType, msb: bool) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * ty.size());
    for &v in values {
        match ty {
            ElementType::UChar => out.push(v as u8),
            ElementType::Short => {
                let x = v as i16;
                out.extend_from_slice(&if msb { x.to_be_bytes() } else { x.to_le_bytes() });
            }
            ElementType::Float => {
                let x = v as f32;
                out.extend_from_slice(&if msb { x.to_be_bytes() } else { x.to_le_bytes() });
            }
            ElementType::Double => out.extend_from_slice(&if msb { v.to_be_bytes() } else { v.to_le_bytes() }),
        }
    }
    out
}

/// Header and interleaved voxel values as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pub header: MetaImageHeader,
    pub values: Vec<f64>,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn meta_err(path: &Path, source: MetaImageError) -> Error {
    Error::MetaImage {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_raw_metaimage(path: &Path) -> Result<RawImage> {
    let bytes = read_bytes(path)?;
    let (header, body) = parse_header(&bytes).map_err(|e| meta_err(path, e))?;
    let values = match &header.data_file {
        DataFile::Local => decode(&header, &bytes[body..]),
        DataFile::External(name) => {
            let raw_path = path.parent().unwrap_or(Path::new(".")).join(name);
            decode(&header, &read_bytes(&raw_path)?)
        }
    }
    .map_err(|e| meta_err(path, e))?;
    Ok(RawImage { header, values })
}

/// A MetaImage read as either an intensity volume or, for 8-bit images whose
/// values are all 0 or 1, a binary mask.
#[derive(Clone, Debug, PartialEq)]
pub enum Image {
    Volume(Volume),
    Mask(BinaryMask),
}

pub fn read_metaimage(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let raw = read_raw_metaimage(path)?;
    if raw.header.channels != 1 {
        return Err(Error::InvalidInput(format!(
            "{}: expected a scalar image, found {} channels",
            path.display(),
            raw.header.channels
        )));
    }
    let grid = raw.header.grid()?;
    if raw.header.element_type == ElementType::UChar && raw.values.iter().all(|&v| v == 0.0 || v == 1.0) {
        let bits = raw.values.iter().map(|&v| v == 1.0).collect();
        return Ok(Image::Mask(BinaryMask::new(grid, bits)?));
    }
    Ok(Image::Volume(Volume::new(grid, raw.values)?))
}

/// Reads any scalar MetaImage as intensities; masks come back as 0/1.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    Ok(match read_metaimage(path)? {
        Image::Volume(v) => v,
        Image::Mask(m) => m.to_volume(),
    })
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    match read_metaimage(path)? {
        Image::Mask(m) => Ok(m),
        Image::Volume(_) => Err(Error::InvalidInput(format!(
            "{}: not a mask (expected MET_UCHAR with values 0 and 1)",
            path.display()
        ))),
    }
}

fn write_raw(path: &Path, mut header: MetaImageHeader, values: &[f64]) -> Result<()> {
    let payload = encode(values, header.element_type, header.msb);
    let mhd = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("mhd"));
    if mhd {
        let raw_name = PathBuf::from(path.file_stem().unwrap_or_default()).with_extension("raw");
        let raw_path = path.with_file_name(&raw_name);
        header.data_file = DataFile::External(raw_name);
        fs::write(&raw_path, &payload).map_err(|e| Error::io(&raw_path, e))?;
        fs::write(path, header.to_text()).map_err(|e| Error::io(path, e))
    } else {
        header.data_file = DataFile::Local;
        let mut bytes = header.to_text().into_bytes();
        bytes.extend_from_slice(&payload);
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Narrowest element type that stores every value exactly.
pub fn native_element_type(values: &[f64]) -> ElementType {
    [ElementType::Short, ElementType::Float]
        .into_iter()
        .find(|t| values.iter().all(|&v| t.holds(v)))
        .unwrap_or(ElementType::Double)
}

/// Writes `v` in the narrowest type that keeps every voxel bit-exact.
pub fn write_metaimage(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_metaimage_as(v, path, native_element_type(v.data()), false)
}

/// Writes `v` with an explicit element type and byte order. Values outside
/// the type's range are rejected rather than wrapped.
pub fn write_metaimage_as(v: &Volume, path: impl AsRef<Path>, ty: ElementType, msb: bool) -> Result<()> {
    let path = path.as_ref();
    let fits = |x: f64| match ty {
        ElementType::UChar => (0.0..=255.0).contains(&x.round()),
        ElementType::Short => (-32768.0..=32767.0).contains(&x.round()),
        _ => true,
    };
    if let Some(bad) = v.data().iter().find(|x| !fits(**x)) {
        return Err(Error::InvalidInput(format!("value {bad} does not fit {}", ty.meta_name())));
    }
    let values: Vec<f64> = match ty {
        ElementType::UChar | ElementType::Short => v.data().iter().map(|x| x.round()).collect(),
        _ => v.data().to_vec(),
    };
    let header = MetaImageHeader {
        dims: v.dims(),
        spacing: v.spacing(),
        offset: v.origin(),
        element_type: ty,
        channels: 1,
        msb,
        data_file: DataFile::Local,
    };
    write_raw(path, header, &values)
}

pub fn write_mask(m: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    write_metaimage_as(&m.to_volume(), path, ElementType::UChar, false)
}

/// Sidecar describing a stored lattice.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct LatticeSidecar {
    pub kind: String,
    pub geometry: LatticeGeometry,
    pub units: String,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes control-point displacements as a 3-channel `MET_DOUBLE` image
/// whose grid is the lattice, plus a JSON sidecar with the geometry.
pub fn write_lattice(l: &ControlLattice, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let values: Vec<f64> = l.coefficients().iter().flat_map(|c| [c[0], c[1], c[2]]).collect();
    let header = MetaImageHeader {
        dims: l.dims(),
        spacing: l.spacing(),
        offset: l.origin(),
        element_type: ElementType::Double,
        channels: 3,
        msb: false,
        data_file: DataFile::Local,
    };
    write_raw(path, header, &values)?;
    let sidecar = LatticeSidecar {
        kind: "cubic-bspline-displacement".into(),
        geometry: l.geometry(),
        units: "mm".into(),
    };
    write_json(&sidecar_path(path), &sidecar)
}

pub fn read_lattice(path: impl AsRef<Path>) -> Result<ControlLattice> {
    let path = path.as_ref();
    let raw = read_raw_metaimage(path)?;
    if raw.header.channels != 3 {
        return Err(Error::InvalidInput(format!(
            "{}: a lattice needs 3 channels, found {}",
            path.display(),
            raw.header.channels
        )));
    }
    let side = sidecar_path(path);
    if side.exists() {
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sc: LatticeSidecar = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: side.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let g = &sc.geometry;
        if g.grid_dims != raw.header.dims || g.spacing != raw.header.spacing || g.origin != raw.header.offset {
            return Err(Error::InvalidInput(format!(
                "{}: sidecar geometry disagrees with the image header",
                side.display()
            )));
        }
    }
    let coeffs = raw.values.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
    ControlLattice::new(raw.header.dims, raw.header.spacing, raw.header.offset, coeffs)
}

/// Reads `sx sy sz dx dy dz` lines (mm). Blank lines and `#` comments are
/// skipped, including trailing comments.
pub fn read_landmarks(path: impl AsRef<Path>) -> Result<LandmarkSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_landmarks(&text, path)
}

pub fn parse_landmarks(text: &str, path: &Path) -> Result<LandmarkSet> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let data = line.split('#').next().unwrap_or("").trim();
        if data.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let tokens: Vec<&str> = data.split_whitespace().collect();
        if tokens.len() != 6 {
            return Err(err(format!("expected 6 numbers, found {}", tokens.len())));
        }
        let mut v = [0.0; 6];
        for (slot, t) in v.iter_mut().zip(&tokens) {
            *slot = t
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| err(format!("`{t}` is not a finite number")))?;
        }
        pairs.push((Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5])));
    }
    LandmarkSet::new(pairs)
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Reads an objective configuration from TOML (default) or JSON (`.json`)
/// and validates it. Unknown keys are rejected.
pub fn read_config(path: impl AsRef<Path>) -> Result<ObjectiveConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let cfg: ObjectiveConfig = if json {
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?
    } else {
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map_or(0, |s| line_of_offset(&text, s.start)),
            message: e.message().to_string(),
        })?
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidInput(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Objective trace as CSV, one row per accepted iterate.
pub fn trace_csv(r: &RegistrationResult) -> String {
    let mut s = String::from("level,iteration,similarity_forward,similarity_backward,bending,volpres,inconsistency,total\n");
    for (level, trace) in r.objective_trace.iter().enumerate() {
        for t in trace {
            s.push_str(&format!(
                "{level},{},{:e},{:e},{:e},{:e},{:e},{:e}\n",
                t.iteration, t.similarity_forward, t.similarity_backward, t.bending, t.volpres, t.inconsistency, t.total
            ));
        }
    }
    s
}

/// Persists a registration into `dir`: per-level forward/backward lattices,
/// the finest ones again as `forward.mha`/`backward.mha`, `affine.json`, `trace.csv`, `result.json` and, if given,
/// `evaluation.json`. Returns the written paths.
pub fn write_result(r: &RegistrationResult, dir: impl AsRef<Path>, evaluation: Option<&EvaluationReport>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (name, lattices) in [("forward", &r.forward_lattices), ("backward", &r.backward_lattices)] {
        for (level, l) in lattices.iter().enumerate() {
            let p = dir.join(format!("{name}_level{level}.mha"));
            write_lattice(l, &p)?;
            written.push(sidecar_path(&p));
            written.push(p);
        }
    }
    for (name, l) in [("forward", r.forward_lattices.last()), ("backward", r.backward_lattices.last())] {
        if let Some(l) = l {
            let p = dir.join(format!("{name}.mha"));
            write_lattice(l, &p)?;
            written.push(sidecar_path(&p));
            written.push(p);
        }
    }
    let affine = dir.join("affine.json");
    write_json(&affine, &r.affine)?;
    written.push(affine);
    let trace = dir.join("trace.csv");
    fs::write(&trace, trace_csv(r)).map_err(|e| Error::io(&trace, e))?;
    written.push(trace);
    let summary = dir.join("result.json");
    write_json(&summary, r)?;
    written.push(summary);
    if let Some(ev) = evaluation {
        let p = dir.join("evaluation.json");
        write_json(&p, ev)?;
        written.push(p);
    }
    Ok(written)
}
