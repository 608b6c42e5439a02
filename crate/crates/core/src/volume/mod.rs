//! Voxel-grid containers and the resampling, smoothing and differentiation
//! primitives shared by registration and analysis.
//!
//! All grids are stored x-fastest, then y, then z. Displacements are kept in
//! voxel (index) units, so every stencil works in index space.

mod filter;
mod pyramid;
mod sample;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use filter::{gradient_central, GaussianSmooth};
pub use pyramid::{downsample2, upsample_field};
pub use sample::{trilinear_sample, warp_mask, warp_volume};

pub(crate) use filter::{gradient_scalar, smooth_field_with, smooth_scalar, Boundary};
pub(crate) use sample::{sample_field, warp_scalar};

/// Shape, spacing (mm per voxel) and origin (mm) of a voxel grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
}

impl GridGeometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&n| n < 2) {
            return Err(Error::InvalidGeometry(format!(
                "every dimension needs at least 2 voxels, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidGeometry(format!(
                "spacings must be positive, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "origin must be finite, got {origin:?}"
            )));
        }
        dims.iter()
            .try_fold(1usize, |acc, &n| acc.checked_mul(n))
            .ok_or_else(|| Error::InvalidGeometry("voxel count overflows".into()))?;
        Ok(Self {
            dims,
            spacing,
            origin,
        })
    }

    /// Unit spacing, zero origin.
    pub fn cube(n: usize) -> Result<Self> {
        Self::new([n; 3], [1.0; 3], [0.0; 3])
    }

    pub fn with_dims(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3], [0.0; 3])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Index-space center of the grid.
    pub fn center(&self) -> [f64; 3] {
        self.dims.map(|n| (n as f64 - 1.0) / 2.0)
    }

    /// True when the voxel is at least `margin` voxels away from every face.
    pub fn is_interior(&self, c: [usize; 3], margin: usize) -> bool {
        (0..3).all(|k| c[k] >= margin && c[k] + margin < self.dims[k])
    }

    pub(crate) fn ensure_same(&self, other: &GridGeometry, what: &'static str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(what))
        }
    }
}

/// Scalar intensity image.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    geometry: GridGeometry,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(geometry: GridGeometry, data: Vec<f32>) -> Result<Self> {
        check_len(&geometry, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume intensities"));
        }
        Ok(Self { geometry, data })
    }

    pub fn filled(geometry: GridGeometry, value: f32) -> Self {
        Self {
            geometry,
            data: vec![value; geometry.len()],
        }
    }

    /// Builds a volume by evaluating `f` at every voxel index. Non-finite
    /// results are rejected.
    pub fn from_fn(geometry: GridGeometry, f: impl Fn([usize; 3]) -> f64) -> Result<Self> {
        let data = (0..geometry.len())
            .map(|i| f(geometry.coords(i)) as f32)
            .collect();
        Self::new(geometry, data)
    }

    pub(crate) fn from_f64(geometry: GridGeometry, data: &[f64]) -> Result<Self> {
        Self::new(geometry, data.iter().map(|&v| v as f32).collect())
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.geometry.index(x, y, z)]
    }

    pub(crate) fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Population variance of the intensities.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data
            .iter()
            .map(|&v| (v as f64 - m).powi(2))
            .sum::<f64>()
            / self.data.len() as f64
    }
}

/// Binary label image (0 = background, 1 = foreground).
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    geometry: GridGeometry,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(geometry: GridGeometry, data: Vec<u8>) -> Result<Self> {
        check_len(&geometry, data.len())?;
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidParameter("mask values must be 0 or 1".into()));
        }
        Ok(Self { geometry, data })
    }

    pub fn empty(geometry: GridGeometry) -> Self {
        Self {
            geometry,
            data: vec![0; geometry.len()],
        }
    }

    pub fn from_fn(geometry: GridGeometry, f: impl Fn([usize; 3]) -> bool) -> Self {
        let data = (0..geometry.len())
            .map(|i| f(geometry.coords(i)) as u8)
            .collect();
        Self { geometry, data }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn contains(&self, idx: usize) -> bool {
        self.data[idx] != 0
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.contains(self.geometry.index(x, y, z))
    }

    /// Number of foreground voxels.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

/// Three-component displacement per voxel, in voxel units.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    geometry: GridGeometry,
    data: Vec<[f64; 3]>,
}

impl VectorField {
    pub fn new(geometry: GridGeometry, data: Vec<[f64; 3]>) -> Result<Self> {
        check_len(&geometry, data.len())?;
        if data.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector field"));
        }
        Ok(Self { geometry, data })
    }

    pub fn zeros(geometry: GridGeometry) -> Self {
        Self {
            geometry,
            data: vec![[0.0; 3]; geometry.len()],
        }
    }

    pub fn uniform(geometry: GridGeometry, v: [f64; 3]) -> Self {
        Self {
            geometry,
            data: vec![v; geometry.len()],
        }
    }

    pub fn from_fn(geometry: GridGeometry, f: impl Fn([usize; 3]) -> [f64; 3]) -> Result<Self> {
        let data = (0..geometry.len()).map(|i| f(geometry.coords(i))).collect();
        Self::new(geometry, data)
    }

    /// Skips the finiteness scan; callers guarantee finite input.
    pub(crate) fn from_raw(geometry: GridGeometry, data: Vec<[f64; 3]>) -> Self {
        debug_assert_eq!(data.len(), geometry.len());
        Self { geometry, data }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn data(&self) -> &[[f64; 3]] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        self.data[self.geometry.index(x, y, z)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|v| v.is_finite())
    }

    pub fn norms(&self) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().map(|v| norm(*v))
    }

    pub fn max_norm(&self) -> f64 {
        self.norms().fold(0.0, f64::max)
    }

    pub fn mean_norm(&self) -> f64 {
        self.norms().sum::<f64>() / self.data.len() as f64
    }

    pub fn scaled(&self, s: f64) -> VectorField {
        self.map(|v| v.map(|c| c * s))
    }

    pub fn map(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> VectorField {
        VectorField::from_raw(self.geometry, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn add(&self, other: &VectorField) -> Result<VectorField> {
        self.geometry
            .ensure_same(&other.geometry, "vector field addition")?;
        Ok(VectorField::from_raw(
            self.geometry,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| [a[0] + b[0], a[1] + b[1], a[2] + b[2]])
                .collect(),
        ))
    }

    pub(crate) fn component(&self, k: usize) -> Vec<f64> {
        self.data.iter().map(|v| v[k]).collect()
    }

    pub(crate) fn from_components(geometry: GridGeometry, c: [Vec<f64>; 3]) -> VectorField {
        let data = (0..geometry.len())
            .map(|i| [c[0][i], c[1][i], c[2][i]])
            .collect();
        VectorField::from_raw(geometry, data)
    }
}

#[inline]
pub(crate) fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn check_len(geometry: &GridGeometry, actual: usize) -> Result<()> {
    let expected = geometry.len();
    if actual != expected {
        return Err(Error::LengthMismatch { expected, actual });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_rejects_thin_or_bad_spacing() {
        assert!(GridGeometry::new([1, 4, 4], [1.0; 3], [0.0; 3]).is_err());
        assert!(GridGeometry::new([4, 4, 4], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(GridGeometry::new([4, 4, 4], [1.0; 3], [f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn index_coords_roundtrip() {
        let g = GridGeometry::with_dims([3, 4, 5]).unwrap();
        for i in 0..g.len() {
            let [x, y, z] = g.coords(i);
            assert_eq!(g.index(x, y, z), i);
        }
        assert_eq!(g.index(1, 0, 0), 1);
        assert_eq!(g.index(0, 1, 0), 3);
        assert_eq!(g.index(0, 0, 1), 12);
    }

    #[test]
    fn containers_validate_contents() {
        let g = GridGeometry::cube(2).unwrap();
        assert!(Volume::new(g, vec![0.0; 7]).is_err());
        assert!(Volume::new(g, vec![f32::INFINITY; 8]).is_err());
        assert!(Mask::new(g, vec![2; 8]).is_err());
        assert!(VectorField::new(g, vec![[0.0, f64::NAN, 0.0]; 8]).is_err());
        assert_eq!(
            Mask::new(g, vec![1, 0, 1, 0, 0, 0, 0, 1]).unwrap().count(),
            3
        );
    }
}
