use super::exp::{auto_exp_steps, exp_velocity};
use super::lcc::{FixedStats, PairStats};
use super::{ConvergenceTrace, RegistrationParams, SymmetricTransform, TraceEntry};
use crate::error::{Error, Result};
use crate::volume::{
    downsample2, smooth_field_with, upsample_field, warp_scalar, Boundary, GridGeometry,
    VectorField, Volume,
};

/// Smallest grid edge a pyramid level may have.
const MIN_LEVEL_EDGE: usize = 4;

struct Level {
    geom: GridGeometry,
    source: Vec<f64>,
    target: Vec<f64>,
    /// Window statistics of the target (fixed for the forward direction).
    target_stats: FixedStats,
    /// Window statistics of the source (fixed for the backward direction).
    source_stats: FixedStats,
}

/// Everything derived from one velocity field at one level.
struct State {
    velocity: VectorField,
    forward: VectorField,
    backward: VectorField,
    warped_source: Vec<f64>,
    warped_target: Vec<f64>,
    fwd_stats: PairStats,
    bwd_stats: PairStats,
    energy: f64,
}

fn evaluate(level: &Level, velocity: VectorField, params: &RegistrationParams) -> Result<State> {
    let steps = params
        .exp_steps
        .unwrap_or_else(|| auto_exp_steps(&velocity));
    let forward = exp_velocity(&velocity, steps)?;
    let backward = exp_velocity(&velocity.scaled(-1.0), steps)?;
    let warped_source = warp_scalar(&level.geom, &level.source, &forward);
    let warped_target = warp_scalar(&level.geom, &level.target, &backward);
    let s = params.lcc_sigma;
    let fwd_stats = PairStats::new(
        &level.geom,
        &level.target,
        &warped_source,
        s,
        &level.target_stats,
    );
    let bwd_stats = PairStats::new(
        &level.geom,
        &level.source,
        &warped_target,
        s,
        &level.source_stats,
    );
    let energy = 0.5
        * (fwd_stats.similarity(&level.target_stats) + bwd_stats.similarity(&level.source_stats));
    Ok(State {
        velocity,
        forward,
        backward,
        warped_source,
        warped_target,
        fwd_stats,
        bwd_stats,
        energy,
    })
}

/// Symmetric force: the forward update drives `exp(v)`, the backward update
/// drives `exp(-v)`, so the velocity moves along their half difference.
fn symmetric_update(level: &Level, st: &State, params: &RegistrationParams) -> VectorField {
    let s = params.lcc_sigma;
    let uf = st.fwd_stats.demons_update(
        &level.geom,
        &level.target,
        &st.warped_source,
        s,
        &level.target_stats,
    );
    let ub = st.bwd_stats.demons_update(
        &level.geom,
        &level.source,
        &st.warped_target,
        s,
        &level.source_stats,
    );
    let data = uf
        .iter()
        .zip(&ub)
        .map(|(f, b)| {
            [
                0.5 * (f[0] - b[0]),
                0.5 * (f[1] - b[1]),
                0.5 * (f[2] - b[2]),
            ]
        })
        .collect();
    smooth_field_with(
        &VectorField::from_raw(level.geom, data),
        params.fluid_sigma,
        Boundary::Replicate,
    )
}

fn build_pyramid(source: &Volume, target: &Volume, levels: usize) -> Result<Vec<(Volume, Volume)>> {
    let mut out = vec![(source.clone(), target.clone())];
    while out.len() < levels {
        let (s, t) = out.last().unwrap();
        if s.geometry().dims().iter().any(|&n| n / 2 < MIN_LEVEL_EDGE) {
            break;
        }
        let next = (downsample2(s)?, downsample2(t)?);
        out.push(next);
    }
    out.reverse();
    Ok(out)
}

/// Registers `source` onto `target`. Levels run coarse to fine and are
/// numbered from 0 at the coarsest grid actually used; a level is skipped
/// when halving would leave fewer than four voxels along an axis.
///
/// Each iteration proposes `v + step * u`, smoothed by `diffusion_sigma`,
/// and keeps it only if the symmetric similarity does not drop. A rejected
/// proposal halves the step; a level ends when the relative gain falls
/// under `convergence_tol`, the step collapses, or the budget runs out.
pub fn register(
    source: &Volume,
    target: &Volume,
    params: &RegistrationParams,
) -> Result<(SymmetricTransform, ConvergenceTrace)> {
    params.validate()?;
    source
        .geometry()
        .ensure_same(target.geometry(), "register: source and target")?;
    for (name, v) in [("source", source), ("target", target)] {
        if v.variance() <= 0.0 {
            return Err(Error::Degenerate(format!(
                "{name} volume is constant; local correlation is undefined"
            )));
        }
    }

    let pyramid = build_pyramid(source, target, params.pyramid_levels)?;
    let mut trace = ConvergenceTrace::default();
    let mut velocity = VectorField::zeros(*pyramid[0].0.geometry());
    let mut finest: Option<State> = None;

    for (li, (s, t)) in pyramid.iter().enumerate() {
        let geom = *s.geometry();
        if velocity.geometry().dims() != geom.dims() {
            velocity = upsample_field(&velocity, &geom)?;
        }
        let sd = s.to_f64();
        let td = t.to_f64();
        let level = Level {
            geom,
            target_stats: FixedStats::new(&geom, &td, params.lcc_sigma),
            source_stats: FixedStats::new(&geom, &sd, params.lcc_sigma),
            source: sd,
            target: td,
        };
        let mut state = evaluate(&level, velocity, params)?;
        let mut step = params.step_scale;
        for it in 0..params.iterations_per_level {
            let u = symmetric_update(&level, &state, params);
            let update_max_norm = step * u.max_norm();
            let proposal = state
                .velocity
                .data()
                .iter()
                .zip(u.data())
                .map(|(v, d)| [v[0] + step * d[0], v[1] + step * d[1], v[2] + step * d[2]])
                .collect();
            let proposal = smooth_field_with(
                &VectorField::from_raw(geom, proposal),
                params.diffusion_sigma,
                Boundary::Replicate,
            );
            if !proposal.is_finite() {
                return Err(Error::NonFinite("velocity update"));
            }
            let candidate = evaluate(&level, proposal, params)?;
            let accepted = candidate.energy >= state.energy;
            let done = if accepted {
                let gain = (candidate.energy - state.energy) / state.energy.abs().max(1e-12);
                state = candidate;
                gain < params.convergence_tol
            } else {
                step *= 0.5;
                step < 1e-3 * params.step_scale
            };
            trace.entries.push(TraceEntry {
                level: li,
                iteration: it,
                energy: state.energy,
                update_max_norm,
                step_scale: step,
                accepted,
            });
            if done {
                break;
            }
        }
        velocity = state.velocity.clone();
        finest = Some(state);
    }

    let st = finest.expect("pyramid has at least one level");
    Ok((
        SymmetricTransform {
            velocity: st.velocity,
            forward: st.forward,
            backward: st.backward,
        },
        trace,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registration::lcc_similarity;
    use crate::volume::warp_volume;

    fn blobs(g: GridGeometry, shift: f64) -> Volume {
        Volume::from_fn(g, |[x, y, z]| {
            let (x, y, z) = (x as f64 - shift, y as f64, z as f64);
            let b = |cx: f64, cy: f64, cz: f64, s: f64| {
                (-((x - cx).powi(2) + (y - cy).powi(2) + (z - cz).powi(2)) / (2.0 * s * s)).exp()
            };
            b(10.0, 12.0, 11.0, 3.0) + 0.7 * b(15.0, 8.0, 13.0, 2.5) + 0.5 * b(7.0, 15.0, 8.0, 2.0)
        })
        .unwrap()
    }

    fn quick() -> RegistrationParams {
        RegistrationParams {
            pyramid_levels: 2,
            iterations_per_level: 15,
            ..Default::default()
        }
    }

    #[test]
    fn identical_inputs_stay_put() {
        let g = GridGeometry::cube(20).unwrap();
        let a = blobs(g, 0.0);
        let (t, trace) = register(&a, &a, &quick()).unwrap();
        assert!(t.forward.mean_norm() < 0.05);
        assert!(trace.len() <= 2 * 15);
    }

    #[test]
    fn shift_improves_similarity_and_trace_is_monotone() {
        let g = GridGeometry::cube(22).unwrap();
        let s = blobs(g, 0.0);
        let t = blobs(g, 1.5);
        let p = quick();
        let (tr, trace) = register(&s, &t, &p).unwrap();
        let before = lcc_similarity(&s, &t, p.lcc_sigma).unwrap();
        let after =
            lcc_similarity(&warp_volume(&s, &tr.forward).unwrap(), &t, p.lcc_sigma).unwrap();
        assert!(after >= before, "{after} < {before}");
        for lvl in 0..2 {
            let e: Vec<f64> = trace.level(lvl).map(|e| e.energy).collect();
            assert!(e.windows(2).all(|w| w[1] >= w[0]));
        }
        assert!(trace.entries.iter().all(|e| e.energy.is_finite()));
    }

    #[test]
    fn constant_input_is_degenerate() {
        let g = GridGeometry::cube(8).unwrap();
        let err = register(&Volume::filled(g, 1.0), &blobs(g, 0.0), &quick()).unwrap_err();
        assert_eq!(err.code(), "degenerate_input");
    }
}
