use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{sample_field, VectorField};

/// Largest per-voxel velocity magnitude allowed after the scaling step when
/// the number of squarings is picked automatically.
const AUTO_SCALED_MAX: f64 = 0.25;

/// Composition of displacement fields: the returned `h` satisfies
/// `z - h(z) = z' - f(z')` with `z' = z - g(z)`, i.e. the mapping of `g`
/// followed by the mapping of `f`. `f` is sampled trilinearly.
pub fn compose(f: &VectorField, g: &VectorField) -> Result<VectorField> {
    f.geometry().ensure_same(g.geometry(), "compose")?;
    let geom = *g.geometry();
    let gd = g.data();
    let data: Vec<[f64; 3]> = (0..geom.len())
        .into_par_iter()
        .map(|i| {
            let c = geom.coords(i);
            let gi = gd[i];
            let p = [
                c[0] as f64 - gi[0],
                c[1] as f64 - gi[1],
                c[2] as f64 - gi[2],
            ];
            let fv = sample_field(f, p);
            [gi[0] + fv[0], gi[1] + fv[1], gi[2] + fv[2]]
        })
        .collect();
    Ok(VectorField::from_raw(geom, data))
}

/// Smallest squaring count that brings the scaled velocity under a quarter
/// voxel.
pub fn auto_exp_steps(v: &VectorField) -> u32 {
    let max = v.max_norm();
    let mut n = 1u32;
    while max / 2f64.powi(n as i32) >= AUTO_SCALED_MAX && n < 30 {
        n += 1;
    }
    n
}

/// Exponential of a stationary velocity field by scaling and squaring:
/// scale by `2^-exp_steps`, then self-compose `exp_steps` times.
pub fn exp_velocity(v: &VectorField, exp_steps: u32) -> Result<VectorField> {
    if !v.is_finite() {
        return Err(Error::NonFinite("velocity field"));
    }
    if exp_steps == 0 {
        return Err(Error::InvalidParameter("exp_steps must be >= 1".into()));
    }
    let mut d = v.scaled(0.5f64.powi(exp_steps as i32));
    for _ in 0..exp_steps {
        d = compose(&d, &d)?;
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::GridGeometry;

    #[test]
    fn zero_velocity_gives_zero_displacement() {
        let g = GridGeometry::cube(6).unwrap();
        let d = exp_velocity(&VectorField::zeros(g), 4).unwrap();
        assert!(d.data().iter().all(|v| *v == [0.0; 3]));
    }

    #[test]
    fn uniform_velocity_is_reproduced() {
        let g = GridGeometry::cube(6).unwrap();
        let d = exp_velocity(&VectorField::uniform(g, [1.5, 0.0, 0.0]), 5).unwrap();
        assert!(d
            .data()
            .iter()
            .all(|v| (v[0] - 1.5).abs() < 1e-12 && v[1] == 0.0));
    }

    #[test]
    fn composition_identities() {
        let g = GridGeometry::cube(8).unwrap();
        let f =
            VectorField::from_fn(g, |[x, y, _]| [0.1 * y as f64, -0.05 * x as f64, 0.3]).unwrap();
        let z = VectorField::zeros(g);
        assert_eq!(compose(&z, &f).unwrap(), f);
        let back = compose(&f, &z).unwrap();
        for (a, b) in f.data().iter().zip(back.data()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
        let a = VectorField::uniform(g, [1.0, 0.0, 0.0]);
        let b = VectorField::uniform(g, [2.0, 0.0, 0.0]);
        assert!(compose(&a, &b)
            .unwrap()
            .data()
            .iter()
            .all(|v| *v == [3.0, 0.0, 0.0]));
    }

    /// With the mapping `z - g(z)` the flow of `v = a z` is `z e^-a`, so the
    /// displacement is `(1 - e^-a) z`.
    #[test]
    fn linear_velocity_matches_closed_form() {
        let g = GridGeometry::cube(24).unwrap();
        let c = g.center();
        for a in [-0.2, -0.1, 0.05, 0.2] {
            let v =
                VectorField::from_fn(g, |p| [0, 1, 2].map(|k| a * (p[k] as f64 - c[k]))).unwrap();
            let d = exp_velocity(&v, auto_exp_steps(&v) + 2).unwrap();
            let k = 1.0 - (-a as f64).exp();
            for i in 0..g.len() {
                let p = g.coords(i);
                if !g.is_interior(p, 4) {
                    continue;
                }
                for ax in 0..3 {
                    let want = k * (p[ax] as f64 - c[ax]);
                    assert!(
                        (d.data()[i][ax] - want).abs() <= 0.01 * want.abs() + 1e-9,
                        "a={a} {p:?}: {} vs {want}",
                        d.data()[i][ax]
                    );
                }
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        let g = GridGeometry::cube(4).unwrap();
        assert!(exp_velocity(&VectorField::zeros(g), 0).is_err());
        assert!(compose(
            &VectorField::zeros(g),
            &VectorField::zeros(GridGeometry::cube(5).unwrap())
        )
        .is_err());
    }

    #[test]
    fn auto_steps_meet_precondition() {
        let g = GridGeometry::cube(4).unwrap();
        let v = VectorField::uniform(g, [6.0, 0.0, 0.0]);
        let n = auto_exp_steps(&v);
        assert!(6.0 / 2f64.powi(n as i32) < 0.5);
    }
}
