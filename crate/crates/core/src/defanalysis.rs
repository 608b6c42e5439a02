//! Jacobian-determinant maps and the unchanged / reduced / grown / non-tumor
//! partition of two consecutive delineations.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_scalar_f64, write_scalar_f64, VolData, VolFile};
use crate::volume::{GridGeometry, Mask, VectorField};

#[derive(Clone, Debug, PartialEq)]
pub struct JacobianMap {
    geometry: GridGeometry,
    data: Vec<f64>,
}

impl JacobianMap {
    pub fn new(geometry: GridGeometry, data: Vec<f64>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::LengthMismatch {
                expected: geometry.len(),
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("jacobian map"));
        }
        Ok(Self { geometry, data })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.geometry.index(x, y, z)]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Smallest value over voxels at least `margin` away from every face.
    pub fn interior_min(&self, margin: usize) -> f64 {
        (0..self.data.len())
            .filter(|&i| self.geometry.is_interior(self.geometry.coords(i), margin))
            .map(|i| self.data[i])
            .fold(f64::INFINITY, f64::min)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_scalar_f64(path, self.geometry, &self.data)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (g, d) = read_scalar_f64(path)?;
        Self::new(g, d).map_err(|e| Error::malformed(path, e.to_string()))
    }
}

/// Determinant of the spatial derivative of `z -> z - g(z)`, with central
/// differences inside and one-sided differences on faces.
pub fn jacobian_map(disp: &VectorField) -> Result<JacobianMap> {
    if !disp.is_finite() {
        return Err(Error::NonFinite("displacement field"));
    }
    let geom = *disp.geometry();
    let dims = geom.dims();
    if dims.iter().any(|&n| n < 3) {
        return Err(Error::InvalidGeometry(format!(
            "jacobian needs at least 3 voxels per axis, got {dims:?}"
        )));
    }
    let d = disp.data();
    let data = (0..geom.len())
        .into_par_iter()
        .map(|i| {
            let c = geom.coords(i);
            // m[k][l] = d g_k / d z_l
            let mut m = [[0.0f64; 3]; 3];
            for l in 0..3 {
                let (lo, hi, h) = stencil(c, l, dims[l]);
                let a = d[geom.index(lo[0], lo[1], lo[2])];
                let b = d[geom.index(hi[0], hi[1], hi[2])];
                for k in 0..3 {
                    m[k][l] = (b[k] - a[k]) / h;
                }
            }
            let j = |k: usize, l: usize| if k == l { 1.0 } else { 0.0 } - m[k][l];
            j(0, 0) * (j(1, 1) * j(2, 2) - j(1, 2) * j(2, 1))
                - j(0, 1) * (j(1, 0) * j(2, 2) - j(1, 2) * j(2, 0))
                + j(0, 2) * (j(1, 0) * j(2, 1) - j(1, 1) * j(2, 0))
        })
        .collect();
    JacobianMap::new(geom, data)
}

fn stencil(c: [usize; 3], axis: usize, n: usize) -> ([usize; 3], [usize; 3], f64) {
    let mut lo = c;
    let mut hi = c;
    let p = c[axis];
    if p == 0 {
        hi[axis] = 1;
        (lo, hi, 1.0)
    } else if p == n - 1 {
        lo[axis] = n - 2;
        (lo, hi, 1.0)
    } else {
        lo[axis] = p - 1;
        hi[axis] = p + 1;
        (lo, hi, 2.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RegionLabel {
    N = 0,
    U = 1,
    R = 2,
    G = 3,
}

impl RegionLabel {
    pub const ALL: [RegionLabel; 4] = [
        RegionLabel::N,
        RegionLabel::U,
        RegionLabel::R,
        RegionLabel::G,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RegionLabel::N => "N",
            RegionLabel::U => "U",
            RegionLabel::R => "R",
            RegionLabel::G => "G",
        }
    }
}

impl fmt::Display for RegionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegionLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "N" => Ok(RegionLabel::N),
            "U" => Ok(RegionLabel::U),
            "R" => Ok(RegionLabel::R),
            "G" => Ok(RegionLabel::G),
            other => Err(format!("unknown region label {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionPartition {
    geometry: GridGeometry,
    labels: Vec<RegionLabel>,
    /// Index of the earlier week of the pair.
    pub week_index: usize,
}

impl RegionPartition {
    pub fn new(
        geometry: GridGeometry,
        labels: Vec<RegionLabel>,
        week_index: usize,
    ) -> Result<Self> {
        if labels.len() != geometry.len() {
            return Err(Error::LengthMismatch {
                expected: geometry.len(),
                actual: labels.len(),
            });
        }
        Ok(Self {
            geometry,
            labels,
            week_index,
        })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn labels(&self) -> &[RegionLabel] {
        &self.labels
    }

    pub fn count(&self, label: RegionLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Voxels carrying any of `labels`, as a mask.
    pub fn mask_of(&self, labels: &[RegionLabel]) -> Mask {
        Mask::from_fn(self.geometry, |[x, y, z]| {
            labels.contains(&self.labels[self.geometry.index(x, y, z)])
        })
    }

    /// Written as a `uint8` volume of label codes. The week index is not part
    /// of the file.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        VolFile {
            geometry: self.geometry,
            data: VolData::Uint8(self.labels.iter().map(|l| l.code()).collect()),
        }
        .write(path)
    }

    pub fn read(path: impl AsRef<Path>, week_index: usize) -> Result<Self> {
        let path = path.as_ref();
        match VolFile::read(path)? {
            VolFile {
                geometry,
                data: VolData::Uint8(v),
            } => {
                let labels = v
                    .into_iter()
                    .map(|c| {
                        RegionLabel::from_code(c).ok_or_else(|| {
                            Error::malformed(path, format!("invalid label code {c}"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Self::new(geometry, labels, week_index)
            }
            _ => Err(Error::malformed(path, "expected a uint8 label volume")),
        }
    }
}

/// Splits the grid by set algebra on the warped earlier delineation and the
/// later delineation, both in the later week's frame.
pub fn partition_regions(tumor_warped: &Mask, tumor_next: &Mask) -> Result<RegionPartition> {
    tumor_warped
        .geometry()
        .ensure_same(tumor_next.geometry(), "partition_regions: masks")?;
    let labels = tumor_warped
        .data()
        .iter()
        .zip(tumor_next.data())
        .map(|(&w, &n)| match (w != 0, n != 0) {
            (true, true) => RegionLabel::U,
            (true, false) => RegionLabel::R,
            (false, true) => RegionLabel::G,
            (false, false) => RegionLabel::N,
        })
        .collect();
    RegionPartition::new(*tumor_warped.geometry(), labels, 0)
}

/// Jacobian values grouped by region label.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegionSamples {
    values: [Vec<f64>; 4],
}

impl RegionSamples {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, label: RegionLabel, j: f64) -> Result<()> {
        if !(j.is_finite() && j > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "jacobian samples must be positive, got {j} in {label}"
            )));
        }
        self.values[label as usize].push(j);
        Ok(())
    }

    pub fn samples(&self, label: RegionLabel) -> &[f64] {
        &self.values[label as usize]
    }

    pub fn count(&self, label: RegionLabel) -> usize {
        self.values[label as usize].len()
    }

    pub fn is_empty(&self, label: RegionLabel) -> bool {
        self.values[label as usize].is_empty()
    }

    /// Labels that received no samples.
    pub fn empty_labels(&self) -> Vec<RegionLabel> {
        RegionLabel::ALL
            .into_iter()
            .filter(|&l| self.is_empty(l))
            .collect()
    }

    pub fn mean(&self, label: RegionLabel) -> Option<f64> {
        let v = self.samples(label);
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn total(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    /// One `label,j_value` row per sample, labels in N, U, R, G order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,j_value\n");
        for l in RegionLabel::ALL {
            for v in self.samples(l) {
                out.push_str(&format!("{l},{v}\n"));
            }
        }
        out
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| Error::malformed(path, e.to_string()))?;
        if headers.iter().collect::<Vec<_>>() != ["label", "j_value"] {
            return Err(Error::malformed(path, "expected header label,j_value"));
        }
        let mut out = Self::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::malformed(path, e.to_string()))?;
            let row = i + 2;
            if rec.len() != 2 {
                return Err(Error::malformed(
                    path,
                    format!("line {row}: expected 2 fields"),
                ));
            }
            let label: RegionLabel = rec[0]
                .parse()
                .map_err(|m| Error::malformed(path, format!("line {row}: {m}")))?;
            let j: f64 = rec[1].parse().map_err(|_| {
                Error::malformed(path, format!("line {row}: bad number {:?}", &rec[1]))
            })?;
            out.push(label, j)
                .map_err(|e| Error::malformed(path, format!("line {row}: {e}")))?;
        }
        Ok(out)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, path)
    }
}

/// Groups Jacobian values by label. Face voxels are skipped because their
/// one-sided stencils are biased.
pub fn collect_samples(jmap: &JacobianMap, part: &RegionPartition) -> Result<RegionSamples> {
    jmap.geometry()
        .ensure_same(part.geometry(), "collect_samples: jacobian and partition")?;
    let g = jmap.geometry();
    let mut out = RegionSamples::new();
    for (i, (&j, &l)) in jmap.data().iter().zip(part.labels()).enumerate() {
        if g.is_interior(g.coords(i), 1) {
            out.push(l, j)?;
        }
    }
    Ok(out)
}

/// Per-label concatenation.
pub fn pool(samples: &[RegionSamples]) -> Result<RegionSamples> {
    if samples.is_empty() {
        return Err(Error::Empty("sample list"));
    }
    let mut out = RegionSamples::new();
    for s in samples {
        for l in RegionLabel::ALL {
            out.values[l as usize].extend_from_slice(s.samples(l));
        }
    }
    Ok(out)
}
