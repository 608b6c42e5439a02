use rayon::prelude::*;

use super::filter::{smooth_scalar, Boundary};
use super::sample::sample_field;
use super::{GridGeometry, VectorField, Volume};
use crate::error::{Error, Result};

/// Halves every dimension: Gaussian pre-smoothing (sigma = 1 voxel) followed
/// by 2x2x2 block means. Odd trailing planes are dropped.
pub fn downsample2(vol: &Volume) -> Result<Volume> {
    let geom = vol.geometry();
    let dims = geom.dims();
    if dims.iter().any(|&n| n < 4) {
        return Err(Error::InvalidGeometry(format!(
            "downsampling needs at least 4 voxels per axis, got {dims:?}"
        )));
    }
    let coarse_dims = dims.map(|n| n / 2);
    let spacing = geom.spacing();
    let origin = geom.origin();
    let coarse = GridGeometry::new(
        coarse_dims,
        spacing.map(|s| 2.0 * s),
        [0, 1, 2].map(|k| origin[k] + 0.5 * spacing[k]),
    )?;
    let smooth = smooth_scalar(geom, &vol.to_f64(), 1.0, Boundary::Antisymmetric);
    let data: Vec<f64> = (0..coarse.len())
        .into_par_iter()
        .map(|i| {
            let [cx, cy, cz] = coarse.coords(i);
            let mut acc = 0.0;
            for dz in 0..2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        acc += smooth[geom.index(2 * cx + dx, 2 * cy + dy, 2 * cz + dz)];
                    }
                }
            }
            acc / 8.0
        })
        .collect();
    Volume::from_f64(coarse, &data)
}

/// Trilinear upsampling of a displacement field onto a finer grid. Fine
/// voxel centers map into coarse index space by the per-axis size ratio, and
/// each component is multiplied by that ratio because displacements are in
/// voxel units.
pub fn upsample_field(field: &VectorField, target: &GridGeometry) -> Result<VectorField> {
    let cdims = field.geometry().dims();
    let fdims = target.dims();
    let ratio = [0, 1, 2].map(|k| fdims[k] as f64 / cdims[k] as f64);
    let data: Vec<[f64; 3]> = (0..target.len())
        .into_par_iter()
        .map(|i| {
            let c = target.coords(i);
            let p = [0, 1, 2].map(|k| (c[k] as f64 + 0.5) / ratio[k] - 0.5);
            let v = sample_field(field, p);
            [v[0] * ratio[0], v[1] * ratio[1], v[2] * ratio[2]]
        })
        .collect();
    VectorField::new(*target, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_volume_halves() {
        let g = GridGeometry::new([8, 6, 10], [1.0, 2.0, 0.5], [0.0; 3]).unwrap();
        let d = downsample2(&Volume::filled(g, 3.0)).unwrap();
        assert_eq!(d.geometry().dims(), [4, 3, 5]);
        assert_eq!(d.geometry().spacing(), [2.0, 4.0, 1.0]);
        assert!(d.data().iter().all(|&v| (v - 3.0).abs() < 1e-6));
    }

    #[test]
    fn ramp_becomes_block_means() {
        let g = GridGeometry::cube(8).unwrap();
        let v = Volume::from_fn(g, |[x, y, z]| (x + 2 * y + 3 * z) as f64).unwrap();
        let d = downsample2(&v).unwrap();
        // Oracle: plain mean over each 2x2x2 block of the original ramp.
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    let mut m = 0.0;
                    for (dx, dy, dz) in itertools_cube() {
                        m += v.get(2 * x + dx, 2 * y + dy, 2 * z + dz) as f64;
                    }
                    m /= 8.0;
                    assert!((d.get(x, y, z) as f64 - m).abs() < 1e-4, "{x} {y} {z}");
                }
            }
        }
    }

    fn itertools_cube() -> impl Iterator<Item = (usize, usize, usize)> {
        (0..8).map(|c| (c & 1, (c >> 1) & 1, (c >> 2) & 1))
    }

    #[test]
    fn too_small_is_rejected() {
        let g = GridGeometry::with_dims([3, 8, 8]).unwrap();
        assert!(downsample2(&Volume::filled(g, 0.0)).is_err());
    }

    #[test]
    fn uniform_field_doubles() {
        let coarse = GridGeometry::cube(4).unwrap();
        let fine = GridGeometry::cube(8).unwrap();
        let up = upsample_field(&VectorField::uniform(coarse, [1.0, 1.0, 1.0]), &fine).unwrap();
        assert!(up.data().iter().all(|v| *v == [2.0, 2.0, 2.0]));
    }
}
