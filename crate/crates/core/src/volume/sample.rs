use rayon::prelude::*;

use super::{GridGeometry, Mask, VectorField, Volume};
use crate::error::Result;

/// Corner indices and weights of the trilinear stencil around `p`.
/// Coordinates outside the grid are clamped onto the boundary.
#[inline]
fn stencil(geom: &GridGeometry, p: [f64; 3]) -> ([usize; 8], [f64; 8]) {
    let dims = geom.dims();
    let mut lo = [0usize; 3];
    let mut t = [0.0f64; 3];
    for k in 0..3 {
        let max = (dims[k] - 1) as f64;
        let c = if p[k].is_nan() {
            0.0
        } else {
            p[k].clamp(0.0, max)
        };
        let i0 = (c.floor() as usize).min(dims[k] - 2);
        lo[k] = i0;
        t[k] = c - i0 as f64;
    }
    let mut idx = [0usize; 8];
    let mut w = [0.0f64; 8];
    for corner in 0..8 {
        let dx = corner & 1;
        let dy = (corner >> 1) & 1;
        let dz = (corner >> 2) & 1;
        idx[corner] = geom.index(lo[0] + dx, lo[1] + dy, lo[2] + dz);
        let wx = if dx == 1 { t[0] } else { 1.0 - t[0] };
        let wy = if dy == 1 { t[1] } else { 1.0 - t[1] };
        let wz = if dz == 1 { t[2] } else { 1.0 - t[2] };
        w[corner] = wx * wy * wz;
    }
    (idx, w)
}

#[inline]
pub(crate) fn sample_scalar(geom: &GridGeometry, data: &[f64], p: [f64; 3]) -> f64 {
    let (idx, w) = stencil(geom, p);
    let mut acc = 0.0;
    for c in 0..8 {
        if w[c] != 0.0 {
            acc += w[c] * data[idx[c]];
        }
    }
    acc
}

#[inline]
pub(crate) fn sample_field(field: &VectorField, p: [f64; 3]) -> [f64; 3] {
    let (idx, w) = stencil(field.geometry(), p);
    let data = field.data();
    let mut acc = [0.0; 3];
    for c in 0..8 {
        if w[c] != 0.0 {
            let v = data[idx[c]];
            acc[0] += w[c] * v[0];
            acc[1] += w[c] * v[1];
            acc[2] += w[c] * v[2];
        }
    }
    acc
}

/// Trilinear interpolation at a continuous index coordinate. Exact at
/// integer coordinates; out-of-range coordinates clamp to the boundary.
pub fn trilinear_sample(vol: &Volume, p: [f64; 3]) -> f64 {
    let (idx, w) = stencil(vol.geometry(), p);
    let data = vol.data();
    let mut acc = 0.0;
    for c in 0..8 {
        if w[c] != 0.0 {
            acc += w[c] * data[idx[c]] as f64;
        }
    }
    acc
}

#[inline]
pub(crate) fn source_point(c: [usize; 3], g: [f64; 3]) -> [f64; 3] {
    [c[0] as f64 - g[0], c[1] as f64 - g[1], c[2] as f64 - g[2]]
}

/// Pulls `vol` through the mapping `z - g(z)`: the output at `z` is the
/// input sampled at `z - g(z)`.
pub fn warp_volume(vol: &Volume, disp: &VectorField) -> Result<Volume> {
    vol.geometry()
        .ensure_same(disp.geometry(), "warp_volume: volume and field")?;
    let geom = *vol.geometry();
    let field = disp.data();
    let data: Vec<f32> = (0..geom.len())
        .into_par_iter()
        .map(|i| {
            let g = field[i];
            if g == [0.0; 3] {
                vol.data()[i]
            } else {
                trilinear_sample(vol, source_point(geom.coords(i), g)) as f32
            }
        })
        .collect();
    Ok(Volume::new(geom, data).expect("convex combination of finite values"))
}

pub(crate) fn warp_scalar(geom: &GridGeometry, data: &[f64], disp: &VectorField) -> Vec<f64> {
    let field = disp.data();
    (0..geom.len())
        .into_par_iter()
        .map(|i| sample_scalar(geom, data, source_point(geom.coords(i), field[i])))
        .collect()
}

/// Nearest-neighbour resampling of a binary mask through the same mapping as
/// [`warp_volume`]; the result stays binary.
pub fn warp_mask(mask: &Mask, disp: &VectorField) -> Result<Mask> {
    mask.geometry()
        .ensure_same(disp.geometry(), "warp_mask: mask and field")?;
    let geom = *mask.geometry();
    let dims = geom.dims();
    let field = disp.data();
    let data: Vec<u8> = (0..geom.len())
        .into_par_iter()
        .map(|i| {
            let p = source_point(geom.coords(i), field[i]);
            let mut c = [0usize; 3];
            for k in 0..3 {
                let max = (dims[k] - 1) as f64;
                let r = if p[k].is_nan() {
                    0.0
                } else {
                    p[k].round().clamp(0.0, max)
                };
                c[k] = r as usize;
            }
            mask.data()[geom.index(c[0], c[1], c[2])]
        })
        .collect();
    Mask::new(geom, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(n: usize) -> GridGeometry {
        GridGeometry::cube(n).unwrap()
    }

    #[test]
    fn constant_volume_samples_constant() {
        let v = Volume::filled(geom(4), 5.0);
        for p in [[0.0, 0.0, 0.0], [1.3, 2.7, 0.2], [-4.0, 9.0, 1.5]] {
            assert_eq!(trilinear_sample(&v, p), 5.0);
        }
    }

    #[test]
    fn linear_in_x_on_two_cube() {
        let v = Volume::from_fn(geom(2), |[x, _, _]| x as f64).unwrap();
        assert!((trilinear_sample(&v, [0.5, 0.0, 0.0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn affine_function_reproduced() {
        // Oracle: direct evaluation of f(x,y,z) = x + 2y + 3z.
        let v = Volume::from_fn(geom(8), |[x, y, z]| (x + 2 * y + 3 * z) as f64).unwrap();
        let p = [1.25, 2.5, 0.75];
        let expected = p[0] + 2.0 * p[1] + 3.0 * p[2];
        assert_eq!(expected, 8.5);
        assert!((trilinear_sample(&v, p) - expected).abs() < 1e-5);
    }

    #[test]
    fn out_of_range_clamps() {
        let v = Volume::from_fn(geom(4), |[x, _, _]| x as f64).unwrap();
        assert_eq!(trilinear_sample(&v, [-2.0, 1.0, 1.0]), 0.0);
        assert_eq!(trilinear_sample(&v, [10.0, 1.0, 1.0]), 3.0);
    }

    #[test]
    fn zero_field_is_identity() {
        let g = geom(5);
        let v = Volume::from_fn(g, |[x, y, z]| ((x * 7 + y * 3 + z) % 5) as f64 * 0.37).unwrap();
        let out = warp_volume(&v, &VectorField::zeros(g)).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn uniform_shift_of_ramp() {
        let g = geom(8);
        let v = Volume::from_fn(g, |[x, _, _]| x as f64).unwrap();
        let out = warp_volume(&v, &VectorField::uniform(g, [1.0, 0.0, 0.0])).unwrap();
        for z in 0..8 {
            for x in 0..8 {
                let expected = (x as f64 - 1.0).max(0.0);
                assert_eq!(out.get(x, 3, z) as f64, expected);
            }
        }
    }

    #[test]
    fn constant_survives_any_field() {
        let g = geom(6);
        let v = Volume::filled(g, 2.5);
        let f = VectorField::from_fn(g, |[x, y, z]| {
            [
                (x as f64 * 0.3).sin(),
                (y as f64).cos() * 0.7,
                z as f64 * 0.1,
            ]
        })
        .unwrap();
        assert_eq!(warp_volume(&v, &f).unwrap(), v);
    }

    #[test]
    fn mask_single_voxel_follows_pull_mapping() {
        let g = geom(10);
        let m = Mask::from_fn(g, |c| c == [5, 5, 5]);
        let out = warp_mask(&m, &VectorField::uniform(g, [1.0, 0.0, 0.0])).unwrap();
        assert_eq!(out.count(), 1);
        // out(z) = in(z - g): the voxel shows up one step along +x.
        assert!(out.get(6, 5, 5));
    }

    #[test]
    fn mask_zero_and_empty_cases() {
        let g = geom(6);
        let m = Mask::from_fn(g, |[x, y, z]| x + y + z < 5);
        assert_eq!(warp_mask(&m, &VectorField::zeros(g)).unwrap(), m);
        let f = VectorField::uniform(g, [0.4, -2.2, 1.7]);
        assert_eq!(warp_mask(&Mask::empty(g), &f).unwrap().count(), 0);
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let v = Volume::filled(geom(4), 1.0);
        assert!(warp_volume(&v, &VectorField::zeros(geom(5))).is_err());
        assert!(warp_mask(&Mask::empty(geom(4)), &VectorField::zeros(geom(5))).is_err());
    }
}
