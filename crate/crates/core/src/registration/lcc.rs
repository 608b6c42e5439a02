//! Local correlation coefficient with Gaussian windows, and the demons-style
//! update derived from its analytic gradient.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{gradient_scalar, smooth_scalar, Boundary, GridGeometry, Volume};

/// Relative floor on local variance, as a fraction of the image's global
/// variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;

const SUM_CHUNK: usize = 4096;

pub(crate) fn global_variance(data: &[f64]) -> f64 {
    let n = data.len() as f64;
    let m = data.iter().sum::<f64>() / n;
    data.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n
}

/// Window statistics of the image that stays fixed during an iteration.
pub(crate) struct FixedStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl FixedStats {
    pub fn new(geom: &GridGeometry, fixed: &[f64], sigma: f64) -> Self {
        let mean = smooth_scalar(geom, fixed, sigma, Boundary::Replicate);
        let sq: Vec<f64> = fixed.iter().map(|v| v * v).collect();
        let sq = smooth_scalar(geom, &sq, sigma, Boundary::Replicate);
        let var = sq.iter().zip(&mean).map(|(s, m)| s - m * m).collect();
        Self {
            mean,
            var,
            eps: VARIANCE_FLOOR * global_variance(fixed),
        }
    }
}

/// Window statistics of a (fixed, moving) pair.
pub(crate) struct PairStats {
    pub moving_mean: Vec<f64>,
    pub moving_var: Vec<f64>,
    pub cov: Vec<f64>,
    pub moving_eps: f64,
}

impl PairStats {
    pub fn new(
        geom: &GridGeometry,
        fixed: &[f64],
        moving: &[f64],
        sigma: f64,
        fx: &FixedStats,
    ) -> Self {
        let mean = smooth_scalar(geom, moving, sigma, Boundary::Replicate);
        let sq: Vec<f64> = moving.iter().map(|v| v * v).collect();
        let sq = smooth_scalar(geom, &sq, sigma, Boundary::Replicate);
        let cross: Vec<f64> = fixed.iter().zip(moving).map(|(a, b)| a * b).collect();
        let cross = smooth_scalar(geom, &cross, sigma, Boundary::Replicate);
        let moving_var = sq.iter().zip(&mean).map(|(s, m)| s - m * m).collect();
        let cov = cross
            .iter()
            .zip(fx.mean.iter().zip(&mean))
            .map(|(c, (mf, mm))| c - mf * mm)
            .collect();
        Self {
            moving_mean: mean,
            moving_var,
            cov,
            moving_eps: VARIANCE_FLOOR * global_variance(moving),
        }
    }

    #[inline]
    fn valid(&self, fx: &FixedStats, i: usize) -> bool {
        fx.var[i] > fx.eps
            && self.moving_var[i] > self.moving_eps
            && fx.eps > 0.0
            && self.moving_eps > 0.0
    }

    /// Mean of the squared local correlation; voxels under the variance
    /// floor count as zero.
    pub fn similarity(&self, fx: &FixedStats) -> f64 {
        let n = self.cov.len();
        // Fixed chunks summed in order keep the result independent of
        // thread scheduling.
        let partial: Vec<f64> = (0..n.div_ceil(SUM_CHUNK))
            .into_par_iter()
            .map(|c| {
                (c * SUM_CHUNK..((c + 1) * SUM_CHUNK).min(n))
                    .map(|i| {
                        if self.valid(fx, i) {
                            let v = self.cov[i];
                            (v * v / (fx.var[i] * self.moving_var[i])).clamp(0.0, 1.0)
                        } else {
                            0.0
                        }
                    })
                    .sum::<f64>()
            })
            .collect();
        let total: f64 = partial.iter().sum();
        total / n as f64
    }

    /// Derivative of the summed squared local correlation with respect to
    /// each moving-image intensity.
    pub fn intensity_gradient(
        &self,
        geom: &GridGeometry,
        fixed: &[f64],
        moving: &[f64],
        sigma: f64,
        fx: &FixedStats,
    ) -> Vec<f64> {
        let n = self.cov.len();
        let mut alpha = vec![0.0; n];
        let mut beta = vec![0.0; n];
        for i in 0..n {
            if self.valid(fx, i) {
                let a = self.cov[i];
                let bc = fx.var[i] * self.moving_var[i];
                alpha[i] = a / bc;
                beta[i] = a * a / (bc * self.moving_var[i]);
            }
        }
        let alpha_fm: Vec<f64> = alpha.iter().zip(&fx.mean).map(|(a, m)| a * m).collect();
        let beta_mm: Vec<f64> = beta
            .iter()
            .zip(&self.moving_mean)
            .map(|(b, m)| b * m)
            .collect();
        let s_alpha = smooth_scalar(geom, &alpha, sigma, Boundary::Replicate);
        let s_alpha_fm = smooth_scalar(geom, &alpha_fm, sigma, Boundary::Replicate);
        let s_beta = smooth_scalar(geom, &beta, sigma, Boundary::Replicate);
        let s_beta_mm = smooth_scalar(geom, &beta_mm, sigma, Boundary::Replicate);
        (0..n)
            .map(|i| {
                2.0 * (fixed[i] * s_alpha[i] - s_alpha_fm[i] - moving[i] * s_beta[i] + s_beta_mm[i])
            })
            .collect()
    }

    /// Demons update for the displacement `g` in `moving(z) = source(z - g(z))`.
    /// The correlation gradient is turned into an intensity residual by the
    /// local moving variance, then normalized per voxel so that no update
    /// exceeds half a voxel.
    pub fn demons_update(
        &self,
        geom: &GridGeometry,
        fixed: &[f64],
        moving: &[f64],
        sigma: f64,
        fx: &FixedStats,
    ) -> Vec<[f64; 3]> {
        let d = self.intensity_gradient(geom, fixed, moving, sigma, fx);
        let grad = gradient_scalar(geom, moving);
        (0..d.len())
            .into_par_iter()
            .map(|i| {
                if self.moving_var[i] <= self.moving_eps {
                    return [0.0; 3];
                }
                let r = 0.5 * d[i] * self.moving_var[i];
                let g = grad[i];
                let g2 = g[0] * g[0] + g[1] * g[1] + g[2] * g[2];
                let denom = g2 + r * r;
                if denom < 1e-18 {
                    return [0.0; 3];
                }
                let s = -r / denom;
                [s * g[0], s * g[1], s * g[2]]
            })
            .collect()
    }
}

/// Mean squared local correlation between two volumes, in `[0, 1]`.
/// Invariant to positive or negative affine intensity rescaling of either
/// input.
pub fn lcc_similarity(a: &Volume, b: &Volume, lcc_sigma: f64) -> Result<f64> {
    a.geometry().ensure_same(b.geometry(), "lcc_similarity")?;
    if !(lcc_sigma.is_finite() && lcc_sigma > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "lcc_sigma must be > 0, got {lcc_sigma}"
        )));
    }
    let geom = a.geometry();
    let fa = a.to_f64();
    let fb = b.to_f64();
    let fx = FixedStats::new(geom, &fa, lcc_sigma);
    Ok(PairStats::new(geom, &fa, &fb, lcc_sigma, &fx).similarity(&fx))
}
