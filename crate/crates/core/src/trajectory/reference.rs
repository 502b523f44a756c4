use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};

use super::TrajectoryError;
use crate::geom::{gravity, so3_log, GRAVITY};
use crate::log::{read_state_rows, write_state_rows, StateRow};

/// Default sample period of reference trajectories, s.
pub const REFERENCE_DT: f64 = 0.01;
/// Default generation cap on thrust-to-weight.
pub const DEFAULT_TWR: f64 = 3.8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefSample {
    pub t: f64,
    pub q: UnitQuaternion<f64>,
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
}

/// Reference state at an arbitrary time, with derived acceleration and body rates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefPoint {
    pub t: f64,
    pub q: UnitQuaternion<f64>,
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub a: Vector3<f64>,
    pub omega: Vector3<f64>,
}

/// Uniformly sampled `[t, q, p, v]` reference.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceTrajectory {
    pub samples: Vec<RefSample>,
    pub dt: f64,
    /// Duration of one lap. Files carry no lap structure, so for loaded
    /// trajectories this is the last timestamp.
    pub lap_time: f64,
    accel: Vec<Vector3<f64>>,
    omega: Vec<Vector3<f64>>,
}

impl ReferenceTrajectory {
    /// Validates samples against the monotonic-time, uniform-step,
    /// thrust-cap and velocity-consistency invariants.
    pub fn from_samples(samples: Vec<RefSample>, twr: f64) -> Result<Self, TrajectoryError> {
        if samples.len() < 2 {
            return Err(TrajectoryError::Parse {
                row: samples.len(),
                msg: "need at least two samples".into(),
            });
        }
        for (i, s) in samples.iter().enumerate() {
            let finite = s.t.is_finite()
                && s.q
                    .coords
                    .iter()
                    .chain(s.p.iter())
                    .chain(s.v.iter())
                    .all(|x| x.is_finite());
            if !finite {
                return Err(TrajectoryError::Parse {
                    row: i + 1,
                    msg: "non-finite value".into(),
                });
            }
        }
        let dt = samples[1].t - samples[0].t;
        for (i, w) in samples.windows(2).enumerate() {
            let step = w[1].t - w[0].t;
            if step <= 0.0 {
                return Err(TrajectoryError::Parse {
                    row: i + 2,
                    msg: format!("time {} does not increase", w[1].t),
                });
            }
            if (step - dt).abs() > 1e-6 * dt.max(1e-3) {
                return Err(TrajectoryError::Parse {
                    row: i + 2,
                    msg: format!("non-uniform step {step} (expected {dt})"),
                });
            }
        }

        let n = samples.len();
        let accel: Vec<Vector3<f64>> = (0..n)
            .map(|i| {
                let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
                (samples[b].v - samples[a].v) / (samples[b].t - samples[a].t)
            })
            .collect();
        let omega = (0..n)
            .map(|i| {
                let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
                so3_log(&(samples[a].q.inverse() * samples[b].q)) / (samples[b].t - samples[a].t)
            })
            .collect();

        let cap = twr * GRAVITY;
        let (worst, peak) = accel
            .iter()
            .map(|a| (a - gravity()).norm())
            .enumerate()
            .fold(
                (0, 0.0),
                |best, (i, x)| if x > best.1 { (i, x) } else { best },
            );
        if peak > cap * (1.0 + 1e-3) {
            return Err(TrajectoryError::InfeasibleTrajectory {
                row: worst + 1,
                t: samples[worst].t,
                thrust_accel: peak,
                cap,
            });
        }
        let a_max = accel.iter().map(|a| a.norm()).fold(0.0, f64::max);
        let tol = 2.0 * dt * a_max + 1e-9;
        for (i, w) in samples.windows(2).enumerate() {
            let fd = (w[1].p - w[0].p) / (w[1].t - w[0].t);
            if (fd - w[0].v).norm() > tol {
                return Err(TrajectoryError::Parse {
                    row: i + 1,
                    msg: format!(
                        "position difference disagrees with velocity by {:.3e}",
                        (fd - w[0].v).norm()
                    ),
                });
            }
        }
        let lap_time = samples[n - 1].t;
        Ok(Self {
            samples,
            dt,
            lap_time,
            accel,
            omega,
        })
    }

    pub fn with_lap_time(mut self, lap_time: f64) -> Self {
        self.lap_time = lap_time;
        self
    }

    pub fn start_time(&self) -> f64 {
        self.samples[0].t
    }

    pub fn end_time(&self) -> f64 {
        self.samples[self.samples.len() - 1].t
    }

    pub fn duration(&self) -> f64 {
        self.end_time() - self.start_time()
    }

    /// Derived acceleration at each sample.
    pub fn accelerations(&self) -> &[Vector3<f64>] {
        &self.accel
    }

    /// Peak thrust acceleration `‖a − g‖` over the samples.
    pub fn peak_thrust_accel(&self) -> f64 {
        self.accel
            .iter()
            .map(|a| (a - gravity()).norm())
            .fold(0.0, f64::max)
    }

    /// Interpolated reference, held at the ends outside the sampled span.
    /// Position uses cubic Hermite interpolation on the stored velocities.
    pub fn sample(&self, t: f64) -> RefPoint {
        let n = self.samples.len();
        let x = ((t - self.start_time()) / self.dt).clamp(0.0, (n - 1) as f64);
        let i = (x.floor() as usize).min(n - 2);
        let f = x - i as f64;
        let (a, b) = (&self.samples[i], &self.samples[i + 1]);
        let h = b.t - a.t;
        let (f2, f3) = (f * f, f * f * f);
        let p = a.p * (2.0 * f3 - 3.0 * f2 + 1.0)
            + a.v * (h * (f3 - 2.0 * f2 + f))
            + b.p * (-2.0 * f3 + 3.0 * f2)
            + b.v * (h * (f3 - f2));
        RefPoint {
            t: a.t + f * h,
            q: a.q.slerp(&b.q, f),
            p,
            v: a.v.lerp(&b.v, f),
            a: self.accel[i].lerp(&self.accel[i + 1], f),
            omega: self.omega[i].lerp(&self.omega[i + 1], f),
        }
    }

    pub fn rows(&self) -> Vec<StateRow> {
        self.samples
            .iter()
            .map(|s| StateRow::new(s.t, &s.q, &s.p, &s.v))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), TrajectoryError> {
        write_state_rows(w, &self.rows()).map_err(|e| TrajectoryError::Io(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrajectoryError> {
        let f = std::fs::File::create(path).map_err(|e| TrajectoryError::Io(e.to_string()))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn read_csv<R: Read>(r: R, twr: f64) -> Result<Self, TrajectoryError> {
        let rows = read_state_rows(r).map_err(|e| {
            let row = e.position().map(|p| p.record() as usize).unwrap_or(0);
            TrajectoryError::Parse {
                row,
                msg: e.to_string(),
            }
        })?;
        let samples = rows
            .iter()
            .map(|r| RefSample {
                t: r.t,
                q: r.q(),
                p: r.p(),
                v: r.v(),
            })
            .collect();
        Self::from_samples(samples, twr)
    }
}

/// Loads and validates a trajectory CSV against the default thrust cap.
pub fn load_trajectory(path: impl AsRef<Path>) -> Result<ReferenceTrajectory, TrajectoryError> {
    load_trajectory_with_twr(path, DEFAULT_TWR)
}

pub fn load_trajectory_with_twr(
    path: impl AsRef<Path>,
    twr: f64,
) -> Result<ReferenceTrajectory, TrajectoryError> {
    let f = std::fs::File::open(path).map_err(|e| TrajectoryError::Io(e.to_string()))?;
    ReferenceTrajectory::read_csv(std::io::BufReader::new(f), twr)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "t,qw,qx,qy,qz,px,py,pz,vx,vy,vz\n";

    #[test]
    fn two_sample_file() {
        let text = format!("{HEADER}0,1,0,0,0,0,0,1,0,0,0\n0.01,1,0,0,0,0,0,1,0,0,0\n");
        let tr = ReferenceTrajectory::read_csv(text.as_bytes(), 3.8).unwrap();
        assert_eq!(tr.lap_time, 0.01);
        assert_eq!(tr.samples.len(), 2);
    }

    #[test]
    fn decreasing_time_names_row() {
        let text = format!(
            "{HEADER}0,1,0,0,0,0,0,1,0,0,0\n0.02,1,0,0,0,0,0,1,0,0,0\n0.01,1,0,0,0,0,0,1,0,0,0\n"
        );
        match ReferenceTrajectory::read_csv(text.as_bytes(), 3.8) {
            Err(TrajectoryError::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_row_is_parse_error() {
        let text = format!("{HEADER}0,1,0,0,0,0,0,1,0,0,0\n0.01,1,0,zero,0,0,0,1,0,0,0\n");
        assert!(matches!(
            ReferenceTrajectory::read_csv(text.as_bytes(), 3.8),
            Err(TrajectoryError::Parse { .. })
        ));
    }

    #[test]
    fn hover_is_feasible() {
        let samples = (0..100)
            .map(|i| RefSample {
                t: i as f64 * 0.01,
                q: UnitQuaternion::identity(),
                p: Vector3::new(1.0, 2.0, 1.5),
                v: Vector3::zeros(),
            })
            .collect();
        let tr = ReferenceTrajectory::from_samples(samples, 3.8).unwrap();
        assert!((tr.peak_thrust_accel() - GRAVITY).abs() < 1e-12);
        let mid = tr.sample(0.456);
        assert_eq!(mid.p, Vector3::new(1.0, 2.0, 1.5));
        assert_eq!(mid.a, Vector3::zeros());
    }

    #[test]
    fn excessive_acceleration_rejected() {
        // Constant 5 g along x.
        let a = 5.0 * GRAVITY;
        let samples = (0..50)
            .map(|i| {
                let t = i as f64 * 0.01;
                RefSample {
                    t,
                    q: UnitQuaternion::identity(),
                    p: Vector3::new(0.5 * a * t * t, 0.0, 1.0),
                    v: Vector3::new(a * t, 0.0, 0.0),
                }
            })
            .collect();
        match ReferenceTrajectory::from_samples(samples, 3.8) {
            Err(TrajectoryError::InfeasibleTrajectory {
                thrust_accel, cap, ..
            }) => assert!(thrust_accel > cap),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hermite_sampling_is_exact_for_cubics() {
        let p = |t: f64| Vector3::new(t * t * t - t, 2.0 * t * t, 1.0);
        let v = |t: f64| Vector3::new(3.0 * t * t - 1.0, 4.0 * t, 0.0);
        let samples = (0..=100)
            .map(|i| {
                let t = i as f64 * 0.01;
                RefSample {
                    t,
                    q: UnitQuaternion::identity(),
                    p: p(t),
                    v: v(t),
                }
            })
            .collect();
        let tr = ReferenceTrajectory::from_samples(samples, 3.8).unwrap();
        for t in [0.123, 0.5, 0.777] {
            assert!((tr.sample(t).p - p(t)).norm() < 1e-12);
        }
    }
}
