//! Feasibility-capped minimum-snap reference generation.

use std::collections::BTreeSet;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::minsnap::{solve_min_snap, EndDerivatives, PolySpline};
use super::reference::{RefSample, ReferenceTrajectory, DEFAULT_TWR, REFERENCE_DT};
use super::waypoints::{place_waypoints, Waypoint};
use super::TrajectoryError;
use crate::geom::{gravity, wrap_angle, yaw_of, GRAVITY};
use crate::vision::GateMap;

/// Distance from the start position to gate 1, m.
pub const START_BEFORE_GATE: f64 = 0.5;
const MIN_SPACING: f64 = 0.01;
const PEAK_SAMPLES: usize = 64;
const ENTRY_STRETCH_RATIO: f64 = 1.1;
const ENTRY_STRETCH_STEPS: usize = 25;
/// Heading is steered only while the thrust axis is within ~72° of vertical.
const UPRIGHT_COS: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub twr: f64,
    /// Fraction of the thrust cap that the peak is scaled to.
    pub margin: f64,
    /// Relative tolerance on hitting the scaled peak.
    pub tolerance: f64,
    /// s
    pub dt: f64,
    /// Rounds of per-segment time rebalancing before global scaling.
    pub refine_iters: usize,
    /// rad/s
    pub yaw_rate_limit: f64,
    /// Below this horizontal speed the heading is held, m/s.
    pub yaw_hold_speed: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            twr: DEFAULT_TWR,
            margin: 0.95,
            tolerance: 0.01,
            dt: REFERENCE_DT,
            refine_iters: 6,
            yaw_rate_limit: 6.0,
            yaw_hold_speed: 0.5,
        }
    }
}

impl GenConfig {
    fn target(&self) -> f64 {
        self.margin * self.twr * GRAVITY
    }
}

fn check_spacing(points: &[Vector3<f64>], closed: bool) -> Result<Vec<f64>, TrajectoryError> {
    let n = if closed {
        points.len()
    } else {
        points.len() - 1
    };
    (0..n)
        .map(|i| {
            let d = (points[(i + 1) % points.len()] - points[i]).norm();
            if d < MIN_SPACING {
                Err(TrajectoryError::Infeasible(format!(
                    "waypoints {i} and {} are {d:.4} m apart",
                    (i + 1) % points.len()
                )))
            } else {
                Ok(d)
            }
        })
        .collect()
}

/// Finds the smallest scale `s` in `[lo, hi]` with `peak(s) ≤ target`, to the
/// requested tolerance, by bisection.
fn bisect_scale(
    mut lo: f64,
    mut hi: f64,
    target: f64,
    tol: f64,
    mut peak: impl FnMut(f64) -> Result<f64, TrajectoryError>,
) -> Result<f64, TrajectoryError> {
    if peak(hi)? > target {
        return Err(TrajectoryError::NoConvergence(format!(
            "peak thrust above {target:.2} m/s² even at time scale {hi}"
        )));
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        let p = peak(mid)?;
        if p > target {
            lo = mid;
        } else {
            hi = mid;
            if p >= target * (1.0 - tol) {
                return Ok(mid);
            }
        }
        if hi / lo < 1.0 + 1e-12 {
            break;
        }
    }
    let p = peak(hi)?;
    if p >= target * (1.0 - tol) && p <= target {
        Ok(hi)
    } else {
        Err(TrajectoryError::NoConvergence(format!(
            "time-scale bisection stalled at peak {p:.3} m/s²"
        )))
    }
}

/// Closed minimum-snap loop through `points` whose peak thrust acceleration
/// sits at `margin · twr · g`.
pub fn closed_loop_spline(
    points: &[Vector3<f64>],
    cfg: &GenConfig,
) -> Result<PolySpline, TrajectoryError> {
    if points.len() < 2 {
        return Err(TrajectoryError::Infeasible(
            "need at least two waypoints".into(),
        ));
    }
    let dist = check_spacing(points, true)?;
    let target = cfg.target();
    if target <= GRAVITY {
        return Err(TrajectoryError::Infeasible(
            "thrust cap does not exceed gravity".into(),
        ));
    }
    let fit = |times: &[f64]| -> Result<Vec<f64>, TrajectoryError> {
        let scale = bisect_scale(1e-3, 1e3, target, cfg.tolerance, |s| {
            let scaled: Vec<f64> = times.iter().map(|t| t * s).collect();
            Ok(solve_min_snap(points, &scaled, true, None, None)?.peak_thrust(PEAK_SAMPLES))
        })?;
        Ok(times.iter().map(|t| t * scale).collect())
    };
    // The rebalancing is a heuristic and does not improve monotonically, so
    // the fastest feasible allocation seen is kept.
    let mut times: Vec<f64> = dist.iter().map(|d| d / 5.0).collect();
    let mut best = fit(&times)?;
    for _ in 0..cfg.refine_iters {
        let spline = solve_min_snap(points, &times, true, None, None)?;
        let peaks: Vec<f64> = spline
            .segment_peak_thrust(PEAK_SAMPLES)
            .iter()
            .map(|p| (p - GRAVITY).max(1e-3))
            .collect();
        let top = peaks.iter().cloned().fold(0.0, f64::max);
        for (t, p) in times.iter_mut().zip(&peaks) {
            *t *= (p / top).powf(0.25).clamp(0.7, 1.0);
        }
        if let Ok(scaled) = fit(&times) {
            if scaled.iter().sum::<f64>() < best.iter().sum::<f64>() {
                best = scaled;
            }
        }
    }
    let scaled = best;
    solve_min_snap(points, &scaled, true, None, None)
}

/// Attitude whose body z axis is along `thrust` and whose heading is `yaw`.
pub fn attitude_from_thrust(thrust: &Vector3<f64>, yaw: f64) -> Option<UnitQuaternion<f64>> {
    let z = thrust.try_normalize(1e-9)?;
    let heading = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
    let y = z.cross(&heading).try_normalize(1e-6)?;
    let x = y.cross(&z);
    Some(UnitQuaternion::from_rotation_matrix(
        &Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z])),
    ))
}

/// Samples `f(t) = (p, v, a)` at `dt`. The body z axis follows the thrust
/// direction by minimal rotation from the previous sample; while roughly
/// upright, the heading turns toward the velocity tangent at a bounded rate.
fn sample_with_attitude(
    duration: f64,
    initial_yaw: f64,
    cfg: &GenConfig,
    f: impl Fn(f64) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>),
) -> Vec<RefSample> {
    let n = (duration / cfg.dt).floor() as usize + 1;
    let max_step = cfg.yaw_rate_limit * cfg.dt;
    let mut q_prev: Option<UnitQuaternion<f64>> = None;
    (0..n)
        .map(|k| {
            let t = k as f64 * cfg.dt;
            let (p, v, a) = f(t);
            let thrust = a - gravity();
            let z = thrust.try_normalize(1e-9).unwrap_or_else(Vector3::z);
            let mut q = match q_prev {
                None => attitude_from_thrust(&thrust, initial_yaw)
                    .unwrap_or_else(UnitQuaternion::identity),
                Some(prev) => {
                    let tilt = UnitQuaternion::rotation_between(&(prev * Vector3::z()), &z)
                        .unwrap_or_else(UnitQuaternion::identity);
                    tilt * prev
                }
            };
            if z.z > UPRIGHT_COS && v.xy().norm() > cfg.yaw_hold_speed {
                let err = wrap_angle(v.y.atan2(v.x) - yaw_of(&q));
                q = UnitQuaternion::from_axis_angle(
                    &nalgebra::Unit::new_unchecked(z),
                    err.clamp(-max_step, max_step),
                ) * q;
            }
            q.renormalize();
            q_prev = Some(q);
            RefSample { t, q, p, v }
        })
        .collect()
}

/// One closed lap through `waypoints` at the thrust cap, sampled over `[0, T]`.
pub fn generate_surrogate(
    waypoints: &[Waypoint],
    twr: f64,
    dt: f64,
) -> Result<ReferenceTrajectory, TrajectoryError> {
    let cfg = GenConfig {
        twr,
        dt,
        ..Default::default()
    };
    let points: Vec<Vector3<f64>> = waypoints.iter().map(|w| w.position).collect();
    let spline = closed_loop_spline(&points, &cfg)?;
    let v0 = spline.eval(0.0, 1);
    let samples = sample_with_attitude(spline.duration(), v0.y.atan2(v0.x), &cfg, |t| {
        (spline.eval(t, 0), spline.eval(t, 1), spline.eval(t, 2))
    });
    Ok(ReferenceTrajectory::from_samples(samples, twr)?.with_lap_time(spline.duration()))
}

/// Multi-lap race reference from a standstill before gate 1.
#[derive(Clone, Debug)]
pub struct RaceReference {
    pub trajectory: ReferenceTrajectory,
    /// Entry from the start through one untimed lap, s.
    pub entry_duration: f64,
    /// Period of the repeating lap, s.
    pub lap_duration: f64,
    pub start: Vector3<f64>,
    pub start_yaw: f64,
    pub waypoints: Vec<Waypoint>,
}

/// Standstill start, one entry lap that merges smoothly into the periodic
/// lap at gate 1's exit waypoint, then `laps + 1` periodic laps.
pub fn generate_race(
    map: &GateMap,
    split_s_ids: &BTreeSet<u32>,
    laps: usize,
    cfg: &GenConfig,
) -> Result<RaceReference, TrajectoryError> {
    let waypoints = place_waypoints(map, split_s_ids);
    if waypoints.len() < 2 {
        return Err(TrajectoryError::Infeasible("empty gate map".into()));
    }
    // Periodic lap starts at gate 1's exit and closes through its entry.
    let mut lap_pts: Vec<Vector3<f64>> = waypoints[1..].iter().map(|w| w.position).collect();
    lap_pts.push(waypoints[0].position);
    let lap = closed_loop_spline(&lap_pts, cfg)?;

    let g1 = &map.gates[0];
    let start = g1.center - g1.normal() * START_BEFORE_GATE;
    let mut entry_pts = vec![start];
    entry_pts.extend(lap_pts.iter().cloned());
    entry_pts.push(lap_pts[0]);
    check_spacing(&entry_pts, false)?;
    let mut base = vec![(lap_pts[0] - start).norm().max(0.5)];
    base.extend(lap.durations.iter().cloned());
    let rest: EndDerivatives = [Vector3::zeros(); 3];
    let join: EndDerivatives = [lap.eval(0.0, 1), lap.eval(0.0, 2), lap.eval(0.0, 3)];
    let solve_entry =
        |times: &[f64]| solve_min_snap(&entry_pts, times, false, Some(&rest), Some(&join));
    let target = cfg.target();
    // The peak is not monotonic in any single stretch factor, so search a
    // grid that slows the first `k` segments by `s` and keep the fastest
    // entry under the cap. Later segments keep the lap's timing, which
    // meets the fixed join derivatives without overshoot.
    let mut best: Option<(f64, Vec<f64>)> = None;
    for k in 1..=base.len() {
        for step in 0..ENTRY_STRETCH_STEPS {
            let s = ENTRY_STRETCH_RATIO.powi(step as i32);
            let times: Vec<f64> = base
                .iter()
                .enumerate()
                .map(|(i, t)| if i < k { t * s } else { *t })
                .collect();
            let total: f64 = times.iter().sum();
            if best.as_ref().is_some_and(|(b, _)| total >= *b) {
                break;
            }
            if solve_entry(&times)?.peak_thrust(PEAK_SAMPLES) <= target {
                best = Some((total, times));
                break;
            }
        }
    }
    let Some((_, times)) = best else {
        return Err(TrajectoryError::NoConvergence(
            "entry lap cannot meet the thrust cap".into(),
        ));
    };
    let entry = solve_entry(&times)?;
    let entry_duration = entry.duration();
    let lap_duration = lap.duration();
    let total = entry_duration + (laps as f64 + 1.0) * lap_duration;
    let eval = |t: f64| {
        let (s, local) = if t < entry_duration {
            (&entry, t)
        } else {
            (&lap, (t - entry_duration) % lap_duration)
        };
        (s.eval(local, 0), s.eval(local, 1), s.eval(local, 2))
    };
    let samples = sample_with_attitude(total, g1.yaw_rad, cfg, eval);
    let trajectory =
        ReferenceTrajectory::from_samples(samples, cfg.twr)?.with_lap_time(lap_duration);
    Ok(RaceReference {
        trajectory,
        entry_duration,
        lap_duration,
        start,
        start_yaw: g1.yaw_rad,
        waypoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::waypoints::Side;

    fn wp(p: Vector3<f64>) -> Waypoint {
        Waypoint {
            position: p,
            gate_id: 0,
            side: Side::Pre,
        }
    }

    fn square(scale: f64) -> Vec<Waypoint> {
        [(0.0, 0.0), (6.0, 0.0), (6.0, 6.0), (0.0, 6.0)]
            .iter()
            .map(|(x, y)| wp(Vector3::new(x * scale, y * scale, 2.0)))
            .collect()
    }

    #[test]
    fn two_waypoints_hit_the_cap() {
        let tr = generate_surrogate(
            &[
                wp(Vector3::new(0.0, 0.0, 2.0)),
                wp(Vector3::new(10.0, 0.0, 2.0)),
            ],
            3.8,
            0.01,
        )
        .unwrap();
        let peak = tr.peak_thrust_accel() / (3.8 * GRAVITY);
        assert!((0.93..=0.96).contains(&peak), "peak ratio {peak}");
    }

    #[test]
    fn larger_track_takes_longer() {
        let a = generate_surrogate(&square(1.0), 3.8, 0.01).unwrap();
        let b = generate_surrogate(&square(2.0), 3.8, 0.01).unwrap();
        assert!(b.lap_time > a.lap_time);
    }

    #[test]
    fn square_passes_through_waypoints() {
        let wps = square(1.0);
        let tr = generate_surrogate(&wps, 3.8, 0.01).unwrap();
        for w in &wps {
            let best = (0..=20_000)
                .map(|k| (tr.sample(tr.lap_time * k as f64 / 20_000.0).p - w.position).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.05, "{best}");
        }
    }

    #[test]
    fn close_waypoints_rejected() {
        let wps = [
            wp(Vector3::zeros()),
            wp(Vector3::new(0.005, 0.0, 0.0)),
            wp(Vector3::new(3.0, 0.0, 0.0)),
        ];
        assert!(matches!(
            generate_surrogate(&wps, 3.8, 0.01),
            Err(TrajectoryError::Infeasible(_))
        ));
    }

    #[test]
    fn attitude_aligns_thrust_and_heading() {
        let q = attitude_from_thrust(&Vector3::new(0.0, 0.0, 9.81), 0.7).unwrap();
        assert!((q * Vector3::z() - Vector3::z()).norm() < 1e-12);
        assert!((crate::geom::yaw_of(&q) - 0.7).abs() < 1e-12);
    }
}
