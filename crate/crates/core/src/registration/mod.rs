//! Symmetric log-domain diffeomorphic demons driven by local correlation.
//!
//! A stationary velocity field `v` parameterizes the transform; the forward
//! displacement is `exp(v)` and the backward displacement `exp(-v)`, so the
//! inverse is available without any extra solve.

mod demons;
mod exp;
mod lcc;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_field, write_field};
use crate::volume::VectorField;

pub use demons::register;
pub use exp::{auto_exp_steps, compose, exp_velocity};
pub use lcc::{lcc_similarity, VARIANCE_FLOOR};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationParams {
    pub pyramid_levels: usize,
    pub iterations_per_level: usize,
    /// Gaussian window of the local correlation, in voxels of each level.
    pub lcc_sigma: f64,
    /// Smoothing of each update field.
    pub fluid_sigma: f64,
    /// Smoothing of the accumulated velocity.
    pub diffusion_sigma: f64,
    /// Squarings for the exponential; `None` picks them from the velocity.
    pub exp_steps: Option<u32>,
    pub step_scale: f64,
    /// Relative energy gain under which a level is considered converged.
    pub convergence_tol: f64,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        Self {
            pyramid_levels: 3,
            iterations_per_level: 50,
            lcc_sigma: 3.0,
            fluid_sigma: 2.0,
            diffusion_sigma: 1.5,
            exp_steps: None,
            step_scale: 1.0,
            convergence_tol: 1e-4,
        }
    }
}

impl RegistrationParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.pyramid_levels < 1 {
            return bad("pyramid_levels must be >= 1".into());
        }
        if self.iterations_per_level < 1 {
            return bad("iterations_per_level must be >= 1".into());
        }
        for (name, s) in [
            ("lcc_sigma", self.lcc_sigma),
            ("fluid_sigma", self.fluid_sigma),
            ("diffusion_sigma", self.diffusion_sigma),
        ] {
            if !(s.is_finite() && s >= 0.0) {
                return bad(format!("{name} must be >= 0, got {s}"));
            }
        }
        if self.lcc_sigma == 0.0 {
            return bad("lcc_sigma must be > 0".into());
        }
        if self.exp_steps == Some(0) {
            return bad("exp_steps must be >= 1".into());
        }
        if !(self.step_scale > 0.0 && self.step_scale <= 2.0) {
            return bad(format!(
                "step_scale must lie in (0, 2], got {}",
                self.step_scale
            ));
        }
        if !(self.convergence_tol.is_finite() && self.convergence_tol >= 0.0) {
            return bad(format!(
                "convergence_tol must be >= 0, got {}",
                self.convergence_tol
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub level: usize,
    pub iteration: usize,
    /// Symmetric similarity of the current (accepted) state.
    pub energy: f64,
    pub update_max_norm: f64,
    pub step_scale: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub entries: Vec<TraceEntry>,
}

impl ConvergenceTrace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn level(&self, level: usize) -> impl Iterator<Item = &TraceEntry> {
        self.entries.iter().filter(move |e| e.level == level)
    }

    pub fn final_energy(&self) -> Option<f64> {
        self.entries.last().map(|e| e.energy)
    }
}

/// Velocity plus the forward and backward displacements it generates.
/// `forward` pulls the source onto the target frame; `backward` pulls the
/// target onto the source frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetricTransform {
    pub velocity: VectorField,
    pub forward: VectorField,
    pub backward: VectorField,
}

const VELOCITY_FILE: &str = "velocity.vol";
const FORWARD_FILE: &str = "forward.vol";
const BACKWARD_FILE: &str = "backward.vol";
const SIDECAR_FILE: &str = "transform.json";

#[derive(Serialize, Deserialize)]
struct Sidecar {
    params: RegistrationParams,
    trace: ConvergenceTrace,
}

impl SymmetricTransform {
    pub fn from_velocity(velocity: VectorField, exp_steps: Option<u32>) -> Result<Self> {
        let steps = exp_steps.unwrap_or_else(|| auto_exp_steps(&velocity));
        let forward = exp_velocity(&velocity, steps)?;
        let backward = exp_velocity(&velocity.scaled(-1.0), steps)?;
        Ok(Self {
            velocity,
            forward,
            backward,
        })
    }

    pub fn identity(geometry: crate::volume::GridGeometry) -> Self {
        Self {
            velocity: VectorField::zeros(geometry),
            forward: VectorField::zeros(geometry),
            backward: VectorField::zeros(geometry),
        }
    }

    /// Mean and max norm of `forward` composed with `backward`; both are zero
    /// for an exact inverse pair.
    pub fn inverse_residual(&self) -> Result<(f64, f64)> {
        let r = compose(&self.forward, &self.backward)?;
        Ok((r.mean_norm(), r.max_norm()))
    }

    /// Writes the three fields plus a JSON sidecar into `dir`.
    pub fn write_dir(
        &self,
        dir: impl AsRef<Path>,
        params: &RegistrationParams,
        trace: &ConvergenceTrace,
    ) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_field(dir.join(VELOCITY_FILE), &self.velocity)?;
        write_field(dir.join(FORWARD_FILE), &self.forward)?;
        write_field(dir.join(BACKWARD_FILE), &self.backward)?;
        let sidecar = serde_json::to_string_pretty(&Sidecar {
            params: params.clone(),
            trace: trace.clone(),
        })?;
        let p = dir.join(SIDECAR_FILE);
        fs::write(&p, sidecar + "\n").map_err(|e| Error::io(p, e))
    }

    pub fn read_dir(
        dir: impl AsRef<Path>,
    ) -> Result<(SymmetricTransform, RegistrationParams, ConvergenceTrace)> {
        let dir = dir.as_ref();
        let velocity = read_field(dir.join(VELOCITY_FILE))?;
        let forward = read_field(dir.join(FORWARD_FILE))?;
        let backward = read_field(dir.join(BACKWARD_FILE))?;
        velocity
            .geometry()
            .ensure_same(forward.geometry(), "transform fields")?;
        velocity
            .geometry()
            .ensure_same(backward.geometry(), "transform fields")?;
        let p = dir.join(SIDECAR_FILE);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let sidecar: Sidecar =
            serde_json::from_str(&text).map_err(|e| Error::malformed(&p, e.to_string()))?;
        Ok((
            SymmetricTransform {
                velocity,
                forward,
                backward,
            },
            sidecar.params,
            sidecar.trace,
        ))
    }
}

/// Swaps the directions and negates the velocity. Applying it twice returns
/// the original transform bit for bit.
pub fn invert(t: &SymmetricTransform) -> SymmetricTransform {
    SymmetricTransform {
        velocity: t.velocity.scaled(-1.0),
        forward: t.backward.clone(),
        backward: t.forward.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::GridGeometry;

    #[test]
    fn default_params_are_valid() {
        RegistrationParams::default().validate().unwrap();
    }

    #[test]
    fn invalid_params_rejected() {
        let base = RegistrationParams::default();
        let cases = [
            RegistrationParams {
                pyramid_levels: 0,
                ..base.clone()
            },
            RegistrationParams {
                exp_steps: Some(0),
                ..base.clone()
            },
            RegistrationParams {
                step_scale: 0.0,
                ..base.clone()
            },
            RegistrationParams {
                step_scale: 2.5,
                ..base.clone()
            },
            RegistrationParams {
                fluid_sigma: -1.0,
                ..base.clone()
            },
            RegistrationParams {
                lcc_sigma: 0.0,
                ..base.clone()
            },
        ];
        for c in cases {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn inversion_is_an_involution() {
        let g = GridGeometry::cube(8).unwrap();
        let v = VectorField::from_fn(g, |[x, y, z]| {
            [
                0.3 * (x as f64 * 0.4).sin(),
                0.2 * (y as f64 * 0.3).cos(),
                -0.1 * z as f64 / 8.0,
            ]
        })
        .unwrap();
        let t = SymmetricTransform::from_velocity(v, None).unwrap();
        assert_eq!(invert(&invert(&t)), t);
        let zero = SymmetricTransform::identity(g);
        let inv = invert(&zero);
        assert!(inv.velocity.data().iter().flatten().all(|c| *c == 0.0));
        assert_eq!(inv.forward, zero.forward);
    }

    #[test]
    fn uniform_velocity_inverse() {
        let g = GridGeometry::cube(6).unwrap();
        let t = SymmetricTransform::from_velocity(VectorField::uniform(g, [2.0, 0.0, 0.0]), None)
            .unwrap();
        let inv = invert(&t);
        assert!(inv.velocity.data().iter().all(|v| *v == [-2.0, 0.0, 0.0]));
    }
}
