//! Synthetic courses with analytic ground truth.
//!
//! A course is built from a base image (Gaussian blobs plus a textured
//! tumor) and a chain of weekly motions. Each weekly motion `psi` is a
//! uniform background scaling about the grid center, a radial Gaussian
//! field centered on the tumor and a small radial field at the site where
//! new tumor is delineated. Week `k` shows the base image pushed through all
//! motions so far, so its intensity at `z` is the base image at
//! `psi_1^-1(... psi_k^-1(z))`. Inverses of the radial maps use bisection.
//!
//! Delineations follow the same motion by nearest-neighbour resampling
//! through the exact inverse. In shrink mode they additionally drop a cap of
//! the tumor (regression) each week; shrink and grow modes both gain a cap
//! next to the tumor (new growth).

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{manifest_csv, PatientRecord, RecistLabel, Scan};
use crate::defanalysis::JacobianMap;
use crate::error::{Error, Result};
use crate::io::{write_field, write_mask, write_volume};
use crate::volume::{warp_mask, GridGeometry, Mask, VectorField, Volume};

/// Width of the tumor radial field relative to the tumor radius.
const CORE_WIDTH_RATIO: f64 = 1.0 / 1.8;

/// Width of the new-growth site field relative to the cap radius.
const GROWTH_WIDTH_RATIO: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GrowthMode {
    Shrink,
    Grow,
    Stable,
}

impl std::str::FromStr for GrowthMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "shrink" => Ok(GrowthMode::Shrink),
            "grow" => Ok(GrowthMode::Grow),
            "stable" => Ok(GrowthMode::Stable),
            other => Err(format!("unknown growth mode {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    /// Tumor center in voxels; `None` uses the grid center.
    pub tumor_center: Option<[f64; 3]>,
    pub tumor_radius: f64,
    pub mode: GrowthMode,
    /// Peak radial displacement of the weekly tumor motion, in voxels.
    pub amplitude: f64,
    /// Weekly volumetric strain of the background, as a fraction.
    pub background_strain: f64,
    /// Peak radial displacement at the new-growth site, in voxels.
    pub growth_site_amplitude: f64,
    /// Depth of the weekly regression cap, as a fraction of the radius.
    pub regression_depth: f64,
    /// Radius of the weekly new-growth cap, as a fraction of the radius.
    pub growth_cap_radius: f64,
    pub noise_sd: f64,
    pub weeks: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [48, 48, 48],
            tumor_center: None,
            tumor_radius: 9.0,
            mode: GrowthMode::Shrink,
            amplitude: 0.6,
            background_strain: 0.06,
            growth_site_amplitude: 0.2,
            regression_depth: 0.15,
            growth_cap_radius: 0.35,
            noise_sd: 0.02,
            weeks: 4,
            seed: 1,
        }
    }
}

impl PhantomSpec {
    pub fn geometry(&self) -> Result<GridGeometry> {
        GridGeometry::with_dims(self.dims)
    }

    pub fn center(&self) -> Result<[f64; 3]> {
        Ok(self.tumor_center.unwrap_or(self.geometry()?.center()))
    }

    fn core_sigma(&self) -> f64 {
        self.tumor_radius * CORE_WIDTH_RATIO
    }

    /// Relative radial amplitude of the tumor motion, signed by mode.
    pub fn core_relative_amplitude(&self) -> f64 {
        let rel = self.amplitude * 0.5f64.exp() / self.core_sigma();
        match self.mode {
            GrowthMode::Shrink => -rel,
            GrowthMode::Grow => rel,
            GrowthMode::Stable => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        let g = self.geometry()?;
        let min_dim = *self.dims.iter().min().unwrap() as f64;
        if !(self.tumor_radius > 0.0 && self.tumor_radius < min_dim / 3.0) {
            return bad(format!(
                "tumor radius must lie in (0, {:.3}), got {}",
                min_dim / 3.0,
                self.tumor_radius
            ));
        }
        let c = self.center()?;
        let dims = g.dims();
        for k in 0..3 {
            let r = 1.5 * self.tumor_radius;
            if c[k] - r < 0.0 || c[k] + r > (dims[k] - 1) as f64 {
                return bad("tumor (with margin) must lie inside the grid".into());
            }
        }
        if self.weeks < 2 {
            return bad(format!("weeks must be >= 2, got {}", self.weeks));
        }
        for (name, v) in [
            ("amplitude", self.amplitude),
            ("growth_site_amplitude", self.growth_site_amplitude),
            ("noise_sd", self.noise_sd),
            ("regression_depth", self.regression_depth),
            ("growth_cap_radius", self.growth_cap_radius),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if self.regression_depth >= 1.0 || self.growth_cap_radius >= 1.0 {
            return bad("cap sizes must be below 1".into());
        }
        if !(self.background_strain.is_finite()
            && self.background_strain > -0.5
            && self.background_strain < 0.5)
        {
            return bad(format!(
                "background_strain must lie in (-0.5, 0.5), got {}",
                self.background_strain
            ));
        }
        check_radial_amplitude(self.core_relative_amplitude())?;
        check_radial_amplitude(-self.growth_site_amplitude * 0.5f64.exp() / self.growth_sigma())?;
        Ok(())
    }

    fn growth_sigma(&self) -> f64 {
        (GROWTH_WIDTH_RATIO * self.growth_cap_radius * self.tumor_radius).max(1.0)
    }
}

/// The radial map `r -> r (1 + a exp(-r^2 / 2 sigma^2))` is monotone with a
/// positive Jacobian exactly when `-1 < a < e^1.5 / 2`.
pub fn radial_amplitude_bounds() -> (f64, f64) {
    (-1.0, 1.5f64.exp() / 2.0)
}

fn check_radial_amplitude(a: f64) -> Result<()> {
    let (lo, hi) = radial_amplitude_bounds();
    if !(a.is_finite() && a > lo && a < hi) {
        return Err(Error::InvalidParameter(format!(
            "radial amplitude {a} leaves ({lo}, {hi:.4}); the map would fold"
        )));
    }
    Ok(())
}

/// Field with mapping `z -> A (z - c) + c + b`, `c` the grid center, and
/// its constant determinant.
pub fn affine_field(
    a: [[f64; 3]; 3],
    b: [f64; 3],
    grid: GridGeometry,
) -> Result<(VectorField, f64)> {
    let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    if !(det.is_finite() && det > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "affine matrix must have a positive determinant, got {det}"
        )));
    }
    let c = grid.center();
    let field = VectorField::from_fn(grid, |p| {
        let z = [0, 1, 2].map(|k| p[k] as f64);
        let d = [0, 1, 2].map(|k| z[k] - c[k]);
        let mut g = [0.0; 3];
        for k in 0..3 {
            let phi = a[k][0] * d[0] + a[k][1] * d[1] + a[k][2] * d[2] + c[k] + b[k];
            g[k] = z[k] - phi;
        }
        g
    })?;
    Ok((field, det))
}

/// Radial Gaussian motion `u(r) = a r exp(-r^2 / 2 sigma^2)` about `center`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadialMap {
    pub center: [f64; 3],
    pub a: f64,
    pub sigma: f64,
}

impl RadialMap {
    pub fn new(center: [f64; 3], a: f64, sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma must be > 0, got {sigma}"
            )));
        }
        check_radial_amplitude(a)?;
        Ok(Self { center, a, sigma })
    }

    fn f(&self, r: f64) -> f64 {
        self.a * (-r * r / (2.0 * self.sigma * self.sigma)).exp()
    }

    /// Determinant of the map at distance `r` from the center.
    pub fn jacobian_at(&self, r: f64) -> f64 {
        let f = self.f(r);
        let rfp = -f * r * r / (self.sigma * self.sigma);
        (1.0 + f).powi(2) * (1.0 + f + rfp)
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [0, 1, 2].map(|k| p[k] - self.center[k]);
        let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let s = 1.0 + self.f(r);
        [0, 1, 2].map(|k| self.center[k] + s * d[k])
    }

    /// Inverse by bisection on the monotone radial profile.
    pub fn invert(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [0, 1, 2].map(|k| p[k] - self.center[k]);
        let rp = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if rp == 0.0 || self.a == 0.0 {
            return p;
        }
        let mut lo = rp / (1.0 + self.a.max(0.0));
        let mut hi = rp / (1.0 + self.a.min(0.0));
        while hi - lo > 1e-9 {
            let mid = 0.5 * (lo + hi);
            if mid * (1.0 + self.f(mid)) < rp {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let r = 0.5 * (lo + hi);
        [0, 1, 2].map(|k| self.center[k] + d[k] * r / rp)
    }
}

/// Field whose mapping `z - g(z)` is the radial map, with the analytic
/// determinant per voxel. Positive `a` expands the neighbourhood of the
/// center, negative `a` contracts it.
pub fn radial_gaussian_field(
    center: [f64; 3],
    a: f64,
    sigma: f64,
    grid: GridGeometry,
) -> Result<(VectorField, JacobianMap)> {
    let m = RadialMap::new(center, a, sigma)?;
    let field = VectorField::from_fn(grid, |p| {
        let z = p.map(|v| v as f64);
        let phi = m.apply(z);
        [z[0] - phi[0], z[1] - phi[1], z[2] - phi[2]]
    })?;
    let jac = (0..grid.len())
        .map(|i| {
            let c = grid.coords(i);
            let r = (0..3)
                .map(|k| (c[k] as f64 - center[k]).powi(2))
                .sum::<f64>()
                .sqrt();
            m.jacobian_at(r)
        })
        .collect();
    Ok((field, JacobianMap::new(grid, jac)?))
}

/// One weekly motion: radial fields first, then the background scaling.
#[derive(Clone, Debug)]
struct WeeklyMotion {
    core: RadialMap,
    site: Option<RadialMap>,
    scale_center: [f64; 3],
    scale: f64,
}

impl WeeklyMotion {
    fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let mut q = self.core.apply(p);
        if let Some(s) = &self.site {
            q = s.apply(q);
        }
        [0, 1, 2].map(|k| self.scale_center[k] + self.scale * (q[k] - self.scale_center[k]))
    }

    fn invert(&self, p: [f64; 3]) -> [f64; 3] {
        let q =
            [0, 1, 2].map(|k| self.scale_center[k] + (p[k] - self.scale_center[k]) / self.scale);
        let q = match &self.site {
            Some(s) => s.invert(q),
            None => q,
        };
        self.core.invert(q)
    }
}

/// Half-space cap `{(z - c) . dir >= offset}`.
#[derive(Clone, Copy, Debug)]
struct PlaneCap {
    center: [f64; 3],
    dir: [f64; 3],
    offset: f64,
}

impl PlaneCap {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|k| (p[k] - self.center[k]) * self.dir[k])
            .sum::<f64>()
            >= self.offset
    }
}

#[derive(Clone, Copy, Debug)]
struct BallCap {
    center: [f64; 3],
    radius: f64,
}

impl BallCap {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|k| (p[k] - self.center[k]).powi(2)).sum::<f64>() <= self.radius * self.radius
    }
}

/// Base image: background blobs plus a brighter textured tumor.
struct BaseImage {
    blobs: Vec<([f64; 3], f64, f64)>,
    tumor_center: [f64; 3],
    tumor_radius: f64,
}

impl BaseImage {
    fn new(spec: &PhantomSpec, grid: &GridGeometry, rng: &mut ChaCha8Rng) -> Result<Self> {
        let dims = grid.dims();
        let tumor_center = spec.center()?;
        let volume = dims.iter().product::<usize>() as f64;
        let count = (volume / 150.0).ceil() as usize;
        let mut blobs = Vec::with_capacity(count + 40);
        for _ in 0..count {
            let c = [0, 1, 2].map(|k| rng.random_range(-3.0..dims[k] as f64 + 2.0));
            let amp = rng.random_range(0.3..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let width = rng.random_range(1.8..3.5);
            blobs.push((c, amp, width));
        }
        // Finer texture inside the tumor so its interior can be tracked.
        let inner = (spec.tumor_radius.powi(3) / 12.0).ceil() as usize;
        for _ in 0..inner {
            let dir: [f64; 3] = loop {
                let d = [0; 3].map(|_| rng.random_range(-1.0..1.0));
                let n: f64 = d.iter().map(|v: &f64| v * v).sum();
                if n <= 1.0 {
                    break d;
                }
            };
            let c = [0, 1, 2].map(|k| tumor_center[k] + spec.tumor_radius * dir[k]);
            let amp = rng.random_range(0.3..0.8) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            blobs.push((c, amp, rng.random_range(1.5..2.5)));
        }
        Ok(Self {
            blobs,
            tumor_center,
            tumor_radius: spec.tumor_radius,
        })
    }

    fn eval(&self, p: [f64; 3]) -> f64 {
        let mut v = 0.0;
        for (c, amp, w) in &self.blobs {
            let d2 = (0..3).map(|k| (p[k] - c[k]).powi(2)).sum::<f64>();
            let s = d2 / (2.0 * w * w);
            if s < 12.0 {
                v += amp * (-s).exp();
            }
        }
        let r = (0..3)
            .map(|k| (p[k] - self.tumor_center[k]).powi(2))
            .sum::<f64>()
            .sqrt();
        v + 1.5 / (1.0 + ((r - self.tumor_radius) / 0.8).exp())
    }
}

/// A generated course: one volume and mask per week plus, per consecutive
/// pair, the exact forward displacement mapping week `i` onto week `i + 1`.
#[derive(Clone, Debug)]
pub struct SyntheticCourse {
    pub spec: PhantomSpec,
    pub volumes: Vec<Volume>,
    pub masks: Vec<Mask>,
    pub forward_fields: Vec<VectorField>,
}

impl SyntheticCourse {
    pub fn recist(&self) -> RecistLabel {
        match self.spec.mode {
            GrowthMode::Shrink => RecistLabel::PR,
            GrowthMode::Grow => RecistLabel::PD,
            GrowthMode::Stable => RecistLabel::SD,
        }
    }

    /// Writes `week<k>.vol`, `week<k>_mask.vol` and `truth_<k>_<k+1>.vol`
    /// into `dir` and returns the matching record with paths relative to
    /// `base`.
    pub fn write(&self, dir: &Path, base: &Path, patient_id: &str) -> Result<PatientRecord> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let rel = |p: PathBuf| p.strip_prefix(base).map(Path::to_path_buf).unwrap_or(p);
        let mut scans = Vec::with_capacity(self.volumes.len());
        for (k, (v, m)) in self.volumes.iter().zip(&self.masks).enumerate() {
            let vp = dir.join(format!("week{k}.vol"));
            let mp = dir.join(format!("week{k}_mask.vol"));
            write_volume(&vp, v)?;
            write_mask(&mp, m)?;
            scans.push(Scan {
                week: k as u32,
                volume_path: rel(vp),
                mask_path: rel(mp),
            });
        }
        for (k, f) in self.forward_fields.iter().enumerate() {
            write_field(dir.join(format!("truth_{}_{}.vol", k, k + 1)), f)?;
        }
        Ok(PatientRecord {
            patient_id: patient_id.to_string(),
            scans,
            recist: self.recist(),
        })
    }
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|c| c / n)
}

fn random_direction(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let d = [0; 3].map(|_| rng.random_range(-1.0..1.0));
        let n: f64 = d.iter().map(|v: &f64| v * v).sum();
        if n > 0.05 && n <= 1.0 {
            return unit(d);
        }
    }
}

/// Random positive Gaussian blobs kept `margin` voxels away from the faces,
/// plus the blob support: voxels within two widths of some blob center.
pub fn blob_volume(
    grid: GridGeometry,
    count: usize,
    margin: f64,
    seed: u64,
) -> Result<(Volume, Mask)> {
    let dims = grid.dims();
    if count == 0 || dims.iter().any(|&n| n as f64 <= 2.0 * margin) {
        return Err(Error::InvalidParameter(format!(
            "blob_volume: need count >= 1 and every dim > 2 * margin ({margin})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs: Vec<([f64; 3], f64, f64)> = (0..count)
        .map(|_| {
            let c = [0, 1, 2].map(|k| rng.random_range(margin..dims[k] as f64 - 1.0 - margin));
            (c, rng.random_range(0.4..1.0), rng.random_range(2.0..3.5))
        })
        .collect();
    let eval = |p: [f64; 3]| -> (f64, bool) {
        let mut v = 0.0;
        let mut inside = false;
        for (c, amp, w) in &blobs {
            let d2 = (0..3).map(|k| (p[k] - c[k]).powi(2)).sum::<f64>();
            inside |= d2 <= 4.0 * w * w;
            v += amp * (-d2 / (2.0 * w * w)).exp();
        }
        (v, inside)
    };
    let vals: Vec<(f64, bool)> = (0..grid.len())
        .into_par_iter()
        .map(|i| eval(grid.coords(i).map(|v| v as f64)))
        .collect();
    let vol = Volume::from_fn(grid, |c| vals[grid.index(c[0], c[1], c[2])].0)?;
    let support = Mask::from_fn(grid, |c| vals[grid.index(c[0], c[1], c[2])].1);
    Ok((vol, support))
}

/// Generates a course. The same spec always yields the same course.
pub fn synth_course(spec: &PhantomSpec) -> Result<SyntheticCourse> {
    spec.validate()?;
    let grid = spec.geometry()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let base = BaseImage::new(spec, &grid, &mut rng)?;

    let scale = (1.0 + spec.background_strain).cbrt();
    let grid_center = grid.center();
    let core_a = spec.core_relative_amplitude();
    let core_sigma = spec.core_sigma();
    let site_sigma = spec.growth_sigma();
    let site_a = -spec.growth_site_amplitude * 0.5f64.exp() / site_sigma;

    // Motions, caps and nominal tumor geometry per week, in that week's frame.
    let mut motions: Vec<WeeklyMotion> = Vec::new();
    let mut removed: Vec<Option<PlaneCap>> = vec![None];
    let mut added: Vec<Option<BallCap>> = vec![None];
    let mut center = spec.center()?;
    let mut radius = spec.tumor_radius;
    for _week in 1..spec.weeks {
        let r_dir = random_direction(&mut rng);
        let g_dir = loop {
            let d = random_direction(&mut rng);
            if (0..3).map(|k| d[k] * r_dir[k]).sum::<f64>() < -0.3 {
                break d;
            }
        };
        let cap_r = spec.growth_cap_radius * radius;
        let site_prev = [0, 1, 2].map(|k| center[k] + (radius + 0.3 * cap_r) * g_dir[k]);
        let (site, add) = match spec.mode {
            GrowthMode::Stable => (None, false),
            _ => (
                (spec.growth_site_amplitude > 0.0)
                    .then(|| RadialMap::new(site_prev, site_a, site_sigma))
                    .transpose()?,
                cap_r > 0.0,
            ),
        };
        let motion = WeeklyMotion {
            core: RadialMap::new(center, core_a, core_sigma)?,
            site,
            scale_center: grid_center,
            scale: if spec.mode == GrowthMode::Stable {
                1.0
            } else {
                scale
            },
        };
        // Nominal tumor geometry after the motion.
        let edge = [0, 1, 2].map(|k| center[k] + radius * r_dir[k]);
        let new_center = motion.apply(center);
        let new_edge = motion.apply(edge);
        radius = (0..3)
            .map(|k| (new_edge[k] - new_center[k]).powi(2))
            .sum::<f64>()
            .sqrt();
        center = new_center;
        let site_next = motion.apply(site_prev);
        motions.push(motion);
        removed.push(
            (spec.mode == GrowthMode::Shrink && spec.regression_depth > 0.0).then_some(PlaneCap {
                center,
                dir: r_dir,
                offset: (1.0 - spec.regression_depth) * radius,
            }),
        );
        added.push(add.then_some(BallCap {
            center: site_next,
            radius: cap_r,
        }));
    }

    let forward_fields = motions
        .iter()
        .map(|m| {
            VectorField::from_fn(grid, |c| {
                let z = c.map(|v| v as f64);
                let q = m.invert(z);
                [z[0] - q[0], z[1] - q[1], z[2] - q[2]]
            })
        })
        .collect::<Result<Vec<_>>>()?;

    // Each delineation is the previous one carried by the exact motion
    // (nearest neighbour), minus the regression cap, plus the growth cap.
    let tumor0 = BallCap {
        center: spec.center()?,
        radius: spec.tumor_radius,
    };
    let mut masks = vec![Mask::from_fn(grid, |c| {
        tumor0.contains(c.map(|v| v as f64))
    })];
    for k in 1..spec.weeks {
        let carried = warp_mask(&masks[k - 1], &forward_fields[k - 1])?;
        masks.push(Mask::from_fn(grid, |c| {
            let p = c.map(|v| v as f64);
            let mut inside = carried.get(c[0], c[1], c[2]);
            if let Some(cap) = &removed[k] {
                inside &= !cap.contains(p);
            }
            if let Some(cap) = &added[k] {
                inside |= cap.contains(p);
            }
            inside
        }));
    }

    let noise = Normal::new(0.0, spec.noise_sd.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut volumes = Vec::with_capacity(spec.weeks);
    for week in 0..spec.weeks {
        let clean: Vec<f64> = (0..grid.len())
            .into_par_iter()
            .map(|i| {
                let mut q = grid.coords(i).map(|v| v as f64);
                for k in (0..week).rev() {
                    q = motions[k].invert(q);
                }
                base.eval(q)
            })
            .collect();
        let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
        noise_rng.set_stream(1 + week as u64);
        let data: Vec<f64> = clean
            .iter()
            .map(|v| {
                if spec.noise_sd > 0.0 {
                    v + noise.sample(&mut noise_rng)
                } else {
                    *v
                }
            })
            .collect();
        volumes.push(Volume::from_fn(grid, |c| {
            data[grid.index(c[0], c[1], c[2])]
        })?);
    }

    Ok(SyntheticCourse {
        spec: spec.clone(),
        volumes,
        masks,
        forward_fields,
    })
}

/// Writes `patients` courses (seeds `seed`, `seed + 1`, ...) into `dir`
/// together with `manifest.csv`, and returns the manifest path.
pub fn write_cohort(spec: &PhantomSpec, patients: usize, dir: &Path) -> Result<PathBuf> {
    if patients == 0 {
        return Err(Error::InvalidParameter("patients must be >= 1".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(patients);
    for p in 0..patients {
        let s = PhantomSpec {
            seed: spec.seed + p as u64,
            ..spec.clone()
        };
        let course = synth_course(&s)?;
        let id = format!("p{:03}", p + 1);
        records.push(course.write(&dir.join(&id), dir, &id)?);
    }
    let spec_path = dir.join("phantom.json");
    fs::write(&spec_path, serde_json::to_string_pretty(spec)? + "\n")
        .map_err(|e| Error::io(&spec_path, e))?;
    let path = dir.join("manifest.csv");
    fs::write(&path, manifest_csv(&records, Path::new(""))).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defanalysis::jacobian_map;

    #[test]
    fn affine_examples() {
        let g = GridGeometry::cube(8).unwrap();
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let (f, j) = affine_field(id, [0.0; 3], g).unwrap();
        assert_eq!(j, 1.0);
        assert!(f.data().iter().all(|v| *v == [0.0; 3]));
        let (_, j) = affine_field(
            [[1.2, 0.0, 0.0], [0.0, 1.2, 0.0], [0.0, 0.0, 1.2]],
            [0.0; 3],
            g,
        )
        .unwrap();
        assert!((j - 1.728).abs() < 1e-12);
        let (_, j) = affine_field(
            [[1.1, 0.0, 0.0], [0.0, 0.9, 0.0], [0.0, 0.0, 1.0]],
            [0.0; 3],
            g,
        )
        .unwrap();
        assert!((j - 0.99).abs() < 1e-12);
        assert!(affine_field(
            [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0; 3],
            g
        )
        .is_err());
    }

    #[test]
    fn radial_closed_form_limits() {
        let g = GridGeometry::cube(9).unwrap();
        let (f, j) = radial_gaussian_field(g.center(), 0.0, 2.0, g).unwrap();
        assert!(f.data().iter().all(|v| *v == [0.0; 3]));
        assert!(j.data().iter().all(|&v| v == 1.0));
        let m = RadialMap::new([0.0; 3], 0.1, 3.0).unwrap();
        assert!((m.jacobian_at(0.0) - 1.331).abs() < 1e-12);
        assert!((m.jacobian_at(30.0) - 1.0).abs() < 1e-4);
        assert!(RadialMap::new([0.0; 3], -1.0, 3.0).is_err());
        assert!(RadialMap::new([0.0; 3], 2.3, 3.0).is_err());
        assert!(RadialMap::new([0.0; 3], 2.2, 3.0).is_ok());
    }

    #[test]
    fn radial_inverse_round_trips() {
        for a in [-0.6, -0.1, 0.3, 2.0] {
            let m = RadialMap::new([1.0, 2.0, 3.0], a, 2.5).unwrap();
            for p in [[1.0, 2.0, 3.0], [4.0, 2.5, 1.0], [9.0, -3.0, 3.2]] {
                let back = m.apply(m.invert(p));
                for k in 0..3 {
                    assert!((back[k] - p[k]).abs() < 1e-6, "a {a}: {back:?} vs {p:?}");
                }
            }
        }
    }

    #[test]
    fn radial_field_matches_numeric_jacobian() {
        let g = GridGeometry::cube(32).unwrap();
        let (f, truth) = radial_gaussian_field(g.center(), -0.1, 5.0, g).unwrap();
        let j = jacobian_map(&f).unwrap();
        for i in 0..g.len() {
            if g.is_interior(g.coords(i), 1) {
                let rel = (j.data()[i] - truth.data()[i]).abs() / truth.data()[i];
                assert!(rel < 0.02, "{rel}");
            }
        }
    }

    fn small(mode: GrowthMode) -> PhantomSpec {
        PhantomSpec {
            dims: [32, 32, 32],
            tumor_radius: 7.0,
            mode,
            weeks: 3,
            ..Default::default()
        }
    }

    #[test]
    fn stable_course_has_identical_masks() {
        let c = synth_course(&small(GrowthMode::Stable)).unwrap();
        assert_eq!(c.masks[0], c.masks[1]);
        assert_eq!(c.masks[1], c.masks[2]);
        assert!(c.forward_fields[0].max_norm() == 0.0);
    }

    fn regressed(c: &SyntheticCourse, k: usize) -> usize {
        let carried = warp_mask(&c.masks[k], &c.forward_fields[k]).unwrap();
        let next = &c.masks[k + 1];
        (0..carried.data().len())
            .filter(|&i| carried.data()[i] != 0 && next.data()[i] == 0)
            .count()
    }

    #[test]
    fn only_shrink_courses_regress() {
        let s = synth_course(&small(GrowthMode::Shrink)).unwrap();
        let g = synth_course(&small(GrowthMode::Grow)).unwrap();
        for k in 0..2 {
            assert!(regressed(&s, k) > 0);
            assert_eq!(regressed(&g, k), 0);
        }
    }

    #[test]
    fn pure_radial_shrink_loses_volume() {
        // No background strain, no caps. Nearest-neighbour propagation only
        // sees motion beyond half a voxel, so the edge must move that far.
        let spec = PhantomSpec {
            amplitude: 1.5,
            background_strain: 0.0,
            growth_site_amplitude: 0.0,
            growth_cap_radius: 0.0,
            regression_depth: 0.0,
            weeks: 4,
            ..small(GrowthMode::Shrink)
        };
        let edge = RadialMap::new([0.0; 3], spec.core_relative_amplitude(), spec.core_sigma())
            .unwrap()
            .apply([spec.tumor_radius, 0.0, 0.0])[0];
        assert!(spec.tumor_radius - edge > 0.5);
        let c = synth_course(&spec).unwrap();
        let counts: Vec<usize> = c.masks.iter().map(Mask::count).collect();
        assert!(counts.windows(2).all(|w| w[1] < w[0]), "{counts:?}");
    }

    #[test]
    fn courses_are_reproducible() {
        let a = synth_course(&small(GrowthMode::Shrink)).unwrap();
        let b = synth_course(&small(GrowthMode::Shrink)).unwrap();
        assert_eq!(a.volumes, b.volumes);
        assert_eq!(a.masks, b.masks);
        assert_eq!(a.forward_fields, b.forward_fields);
    }

    #[test]
    fn invalid_specs_rejected() {
        let s = PhantomSpec {
            tumor_radius: 20.0,
            ..small(GrowthMode::Shrink)
        };
        assert!(synth_course(&s).is_err());
        let s = PhantomSpec {
            weeks: 1,
            ..small(GrowthMode::Shrink)
        };
        assert!(synth_course(&s).is_err());
        let s = PhantomSpec {
            amplitude: 5.0,
            ..small(GrowthMode::Shrink)
        };
        assert!(synth_course(&s).is_err());
    }
}
