use rayon::prelude::*;

use super::{GridGeometry, VectorField, Volume};
use crate::error::{Error, Result};

/// How a line is extended past the grid faces during convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Boundary {
    /// Repeat the face voxel.
    Replicate,
    /// Point reflection through the face voxel, `f(-k) = 2 f(0) - f(k)`.
    /// Affine profiles pass through a symmetric kernel unchanged.
    Antisymmetric,
}

/// Normalized Gaussian taps over offsets `-r..=r`, `r = ceil(3 sigma)`.
pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= s);
    k
}

fn smooth_axis(
    dims: [usize; 3],
    data: &[f64],
    axis: usize,
    kernel: &[f64],
    boundary: Boundary,
) -> Vec<f64> {
    let [nx, ny, _] = dims;
    let n = dims[axis];
    let stride = [1, nx, nx * ny][axis];
    let r = (kernel.len() - 1) / 2;
    let mut out = vec![0.0; data.len()];
    out.par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(z, slab)| {
            for y in 0..ny {
                for x in 0..nx {
                    let idx = x + nx * (y + ny * z);
                    let i = [x, y, z][axis];
                    let base = idx - i * stride;
                    let acc = if i >= r && i + r < n {
                        let start = base + (i - r) * stride;
                        kernel
                            .iter()
                            .enumerate()
                            .map(|(k, w)| w * data[start + k * stride])
                            .sum()
                    } else {
                        let at = |j: usize| data[base + j * stride];
                        let last = n - 1;
                        kernel
                            .iter()
                            .enumerate()
                            .map(|(k, w)| {
                                let j = i as i64 + k as i64 - r as i64;
                                let v = if j < 0 {
                                    match boundary {
                                        Boundary::Replicate => at(0),
                                        Boundary::Antisymmetric => {
                                            2.0 * at(0) - at(((-j) as usize).min(last))
                                        }
                                    }
                                } else if j as usize > last {
                                    match boundary {
                                        Boundary::Replicate => at(last),
                                        Boundary::Antisymmetric => {
                                            let m = (2 * last as i64 - j).max(0) as usize;
                                            2.0 * at(last) - at(m)
                                        }
                                    }
                                } else {
                                    at(j as usize)
                                };
                                w * v
                            })
                            .sum()
                    };
                    slab[x + nx * y] = acc;
                }
            }
        });
    out
}

/// Separable Gaussian convolution of a scalar grid.
pub(crate) fn smooth_scalar(
    geom: &GridGeometry,
    data: &[f64],
    sigma: f64,
    boundary: Boundary,
) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    if kernel.len() == 1 {
        return data.to_vec();
    }
    let dims = geom.dims();
    let a = smooth_axis(dims, data, 0, &kernel, boundary);
    let b = smooth_axis(dims, &a, 1, &kernel, boundary);
    smooth_axis(dims, &b, 2, &kernel, boundary)
}

pub(crate) fn smooth_field_with(
    field: &VectorField,
    sigma: f64,
    boundary: Boundary,
) -> VectorField {
    if sigma <= 0.0 {
        return field.clone();
    }
    let g = *field.geometry();
    let comps = [0, 1, 2].map(|k| smooth_scalar(&g, &field.component(k), sigma, boundary));
    VectorField::from_components(g, comps)
}

/// Separable Gaussian smoothing with a kernel truncated at `ceil(3 sigma)`
/// and renormalized to unit sum. Faces use point reflection, so constant and
/// affine inputs are reproduced exactly. `sigma = 0` returns the input.
pub trait GaussianSmooth: Sized {
    fn gaussian_smooth(&self, sigma: f64) -> Result<Self>;
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "smoothing sigma must be >= 0, got {sigma}"
        )));
    }
    Ok(())
}

impl GaussianSmooth for Volume {
    fn gaussian_smooth(&self, sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        if sigma == 0.0 {
            return Ok(self.clone());
        }
        let out = smooth_scalar(
            self.geometry(),
            &self.to_f64(),
            sigma,
            Boundary::Antisymmetric,
        );
        Volume::from_f64(*self.geometry(), &out)
    }
}

impl GaussianSmooth for VectorField {
    fn gaussian_smooth(&self, sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        Ok(smooth_field_with(self, sigma, Boundary::Antisymmetric))
    }
}

pub(crate) fn gradient_scalar(geom: &GridGeometry, data: &[f64]) -> Vec<[f64; 3]> {
    let dims = geom.dims();
    let strides = [1, dims[0], dims[0] * dims[1]];
    (0..geom.len())
        .into_par_iter()
        .map(|idx| {
            let c = geom.coords(idx);
            let mut g = [0.0; 3];
            for k in 0..3 {
                let s = strides[k];
                g[k] = if c[k] == 0 {
                    data[idx + s] - data[idx]
                } else if c[k] == dims[k] - 1 {
                    data[idx] - data[idx - s]
                } else {
                    0.5 * (data[idx + s] - data[idx - s])
                };
            }
            g
        })
        .collect()
}

/// Central differences inside, one-sided differences on the faces, in index
/// units.
pub fn gradient_central(vol: &Volume) -> VectorField {
    let g = *vol.geometry();
    VectorField::from_raw(g, gradient_scalar(&g, &vol.to_f64()))
}
