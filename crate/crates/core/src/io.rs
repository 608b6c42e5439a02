//! The `.vol` container: a short text header followed by raw little-endian
//! voxel data, x-fastest.
//!
//! ```text
//! DIMS nx ny nz
//! SPACING sx sy sz
//! ORIGIN ox oy oz
//! DTYPE float32-le | uint8
//! COMPONENTS 3            (vector fields only)
//!
//! <raw data>
//! ```
//!
//! Vector fields are component-interleaved. In-memory fields and Jacobian
//! maps are double precision and are narrowed to `float32` on write.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{GridGeometry, Mask, VectorField, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    Float32Le,
    Uint8,
}

impl DType {
    fn as_str(self) -> &'static str {
        match self {
            DType::Float32Le => "float32-le",
            DType::Uint8 => "uint8",
        }
    }
}

/// Decoded contents of a `.vol` file.
#[derive(Clone, Debug, PartialEq)]
pub enum VolData {
    Float(Vec<f32>),
    Uint8(Vec<u8>),
    Vector(Vec<[f32; 3]>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolFile {
    pub geometry: GridGeometry,
    pub data: VolData,
}

fn fmt3<T: std::fmt::Display>(v: [T; 3]) -> String {
    format!("{} {} {}", v[0], v[1], v[2])
}

impl VolFile {
    pub fn encode(&self) -> Vec<u8> {
        let g = &self.geometry;
        let (dtype, components) = match self.data {
            VolData::Float(_) => (DType::Float32Le, 1),
            VolData::Uint8(_) => (DType::Uint8, 1),
            VolData::Vector(_) => (DType::Float32Le, 3),
        };
        let mut header = format!(
            "DIMS {}\nSPACING {}\nORIGIN {}\nDTYPE {}\n",
            fmt3(g.dims()),
            fmt3(g.spacing()),
            fmt3(g.origin()),
            dtype.as_str()
        );
        if components == 3 {
            header.push_str("COMPONENTS 3\n");
        }
        header.push('\n');
        let mut out = header.into_bytes();
        match &self.data {
            VolData::Float(v) => v.iter().for_each(|x| out.extend(x.to_le_bytes())),
            VolData::Uint8(v) => out.extend_from_slice(v),
            VolData::Vector(v) => v.iter().flatten().for_each(|x| out.extend(x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: String| Error::malformed(path, m);
        let mut dims = None;
        let mut spacing = None;
        let mut origin = None;
        let mut dtype = None;
        let mut components = 1usize;
        let mut pos = 0usize;
        loop {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("header is not terminated by a blank line".into()))?;
            let line = std::str::from_utf8(&rest[..end])
                .map_err(|_| bad("header is not valid UTF-8".into()))?;
            pos += end + 1;
            if line.is_empty() {
                break;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or_default();
            let vals: Vec<&str> = parts.collect();
            match key {
                "DIMS" => {
                    dims = Some(parse3::<usize>(&vals).map_err(|m| bad(format!("DIMS: {m}")))?)
                }
                "SPACING" => {
                    spacing = Some(parse3::<f64>(&vals).map_err(|m| bad(format!("SPACING: {m}")))?)
                }
                "ORIGIN" => {
                    origin = Some(parse3::<f64>(&vals).map_err(|m| bad(format!("ORIGIN: {m}")))?)
                }
                "DTYPE" => {
                    dtype = Some(match vals.as_slice() {
                        ["float32-le"] => DType::Float32Le,
                        ["uint8"] => DType::Uint8,
                        other => return Err(bad(format!("unsupported DTYPE {other:?}"))),
                    })
                }
                "COMPONENTS" => {
                    components = match vals.as_slice() {
                        ["1"] => 1,
                        ["3"] => 3,
                        other => return Err(bad(format!("unsupported COMPONENTS {other:?}"))),
                    }
                }
                other => return Err(bad(format!("unknown header key {other:?}"))),
            }
        }
        let dims = dims.ok_or_else(|| bad("missing DIMS".into()))?;
        let spacing = spacing.ok_or_else(|| bad("missing SPACING".into()))?;
        let origin = origin.ok_or_else(|| bad("missing ORIGIN".into()))?;
        let dtype = dtype.ok_or_else(|| bad("missing DTYPE".into()))?;
        let geometry = GridGeometry::new(dims, spacing, origin).map_err(|e| bad(e.to_string()))?;
        let payload = &bytes[pos..];
        let n = geometry.len();
        let data = match (dtype, components) {
            (DType::Uint8, 1) => {
                expect_len(payload.len(), n, path)?;
                VolData::Uint8(payload.to_vec())
            }
            (DType::Float32Le, 1) => {
                expect_len(payload.len(), 4 * n, path)?;
                VolData::Float(read_f32(payload))
            }
            (DType::Float32Le, 3) => {
                expect_len(payload.len(), 12 * n, path)?;
                let flat = read_f32(payload);
                VolData::Vector(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
            }
            (DType::Uint8, _) => return Err(bad("uint8 data cannot have 3 components".into())),
            (_, c) => return Err(bad(format!("unsupported component count {c}"))),
        };
        Ok(VolFile { geometry, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

fn parse3<T: std::str::FromStr>(vals: &[&str]) -> std::result::Result<[T; 3], String> {
    if vals.len() != 3 {
        return Err(format!("expected 3 values, got {}", vals.len()));
    }
    let p = |s: &str| s.parse::<T>().map_err(|_| format!("cannot parse {s:?}"));
    Ok([p(vals[0])?, p(vals[1])?, p(vals[2])?])
}

fn expect_len(actual: usize, expected: usize, path: &Path) -> Result<()> {
    if actual != expected {
        return Err(Error::malformed(
            path,
            format!("payload has {actual} bytes, header implies {expected}"),
        ));
    }
    Ok(())
}

fn read_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn write_volume(path: impl AsRef<Path>, vol: &Volume) -> Result<()> {
    VolFile {
        geometry: *vol.geometry(),
        data: VolData::Float(vol.data().to_vec()),
    }
    .write(path)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    match VolFile::read(path)? {
        VolFile {
            geometry,
            data: VolData::Float(v),
        } => Volume::new(geometry, v).map_err(|e| Error::malformed(path, e.to_string())),
        _ => Err(Error::malformed(path, "expected a scalar float32 volume")),
    }
}

pub fn write_mask(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    VolFile {
        geometry: *mask.geometry(),
        data: VolData::Uint8(mask.data().to_vec()),
    }
    .write(path)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    match VolFile::read(path)? {
        VolFile {
            geometry,
            data: VolData::Uint8(v),
        } => Mask::new(geometry, v).map_err(|e| Error::malformed(path, e.to_string())),
        _ => Err(Error::malformed(path, "expected a uint8 mask")),
    }
}

pub fn write_field(path: impl AsRef<Path>, field: &VectorField) -> Result<()> {
    VolFile {
        geometry: *field.geometry(),
        data: VolData::Vector(field.data().iter().map(|v| v.map(|c| c as f32)).collect()),
    }
    .write(path)
}

pub fn read_field(path: impl AsRef<Path>) -> Result<VectorField> {
    let path = path.as_ref();
    match VolFile::read(path)? {
        VolFile {
            geometry,
            data: VolData::Vector(v),
        } => VectorField::new(geometry, v.into_iter().map(|c| c.map(f64::from)).collect())
            .map_err(|e| Error::malformed(path, e.to_string())),
        _ => Err(Error::malformed(
            path,
            "expected a 3-component float32 field",
        )),
    }
}

/// Writes a double-precision scalar map narrowed to float32.
pub(crate) fn write_scalar_f64(
    path: impl AsRef<Path>,
    geometry: GridGeometry,
    data: &[f64],
) -> Result<()> {
    VolFile {
        geometry,
        data: VolData::Float(data.iter().map(|&v| v as f32).collect()),
    }
    .write(path)
}

pub(crate) fn read_scalar_f64(path: impl AsRef<Path>) -> Result<(GridGeometry, Vec<f64>)> {
    let path = path.as_ref();
    match VolFile::read(path)? {
        VolFile {
            geometry,
            data: VolData::Float(v),
        } => Ok((geometry, v.into_iter().map(f64::from).collect())),
        _ => Err(Error::malformed(path, "expected a scalar float32 map")),
    }
}
