//! Degree-7 piecewise polynomials minimizing integrated squared snap.

use nalgebra::{DMatrix, Vector3};

use super::TrajectoryError;
use crate::geom::gravity;

pub const DEGREE: usize = 7;
const NC: usize = DEGREE + 1;

/// `k! / (k − r)!`, zero when `r > k`.
fn falling(k: usize, r: usize) -> f64 {
    if r > k {
        return 0.0;
    }
    ((k - r + 1)..=k).map(|x| x as f64).product()
}

/// Piecewise polynomial; segment `i` is `Σ c_k τ^k` with `τ = (t − t_i) / T_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolySpline {
    pub durations: Vec<f64>,
    pub coeffs: Vec<[Vector3<f64>; NC]>,
    starts: Vec<f64>,
}

impl PolySpline {
    fn new(durations: Vec<f64>, coeffs: Vec<[Vector3<f64>; NC]>) -> Self {
        let mut starts = Vec::with_capacity(durations.len());
        let mut acc = 0.0;
        for d in &durations {
            starts.push(acc);
            acc += d;
        }
        Self {
            durations,
            coeffs,
            starts,
        }
    }

    pub fn duration(&self) -> f64 {
        self.durations.iter().sum()
    }

    pub fn segment_start(&self, i: usize) -> f64 {
        self.starts[i]
    }

    /// `order`-th time derivative of segment `i` at normalized time `tau`.
    pub fn eval_segment(&self, i: usize, tau: f64, order: usize) -> Vector3<f64> {
        let c = &self.coeffs[i];
        let mut out = Vector3::zeros();
        let mut pow = 1.0;
        for k in order..NC {
            out += c[k] * (falling(k, order) * pow);
            pow *= tau;
        }
        out / self.durations[i].powi(order as i32)
    }

    /// `order`-th derivative at time `t`, clamped to the spline's span.
    pub fn eval(&self, t: f64, order: usize) -> Vector3<f64> {
        let i = match self.starts.binary_search_by(|s| s.total_cmp(&t)) {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) => i - 1,
        }
        .min(self.durations.len() - 1);
        let tau = ((t - self.starts[i]) / self.durations[i]).clamp(0.0, 1.0);
        self.eval_segment(i, tau, order)
    }

    /// Peak thrust acceleration `‖a − g‖` of each segment, sampled densely.
    pub fn segment_peak_thrust(&self, samples: usize) -> Vec<f64> {
        (0..self.durations.len())
            .map(|i| {
                (0..=samples)
                    .map(|s| {
                        (self.eval_segment(i, s as f64 / samples as f64, 2) - gravity()).norm()
                    })
                    .fold(0.0, f64::max)
            })
            .collect()
    }

    pub fn peak_thrust(&self, samples: usize) -> f64 {
        self.segment_peak_thrust(samples)
            .into_iter()
            .fold(0.0, f64::max)
    }
}

/// Fixed velocity, acceleration and jerk at an open end.
pub type EndDerivatives = [Vector3<f64>; 3];

/// Minimum-snap spline through `points`.
///
/// Closed: segment `i` joins `points[i]` to `points[(i + 1) % n]`, so
/// `times.len() == points.len()`. Open: `times.len() == points.len() − 1`,
/// and each end is either pinned to the given derivatives or left free.
/// Interior joints are continuous through jerk; the optimum is smoother.
pub fn solve_min_snap(
    points: &[Vector3<f64>],
    times: &[f64],
    closed: bool,
    start: Option<&EndDerivatives>,
    end: Option<&EndDerivatives>,
) -> Result<PolySpline, TrajectoryError> {
    let n = times.len();
    let expected = if closed {
        points.len()
    } else {
        points.len().saturating_sub(1)
    };
    if n == 0 || n != expected {
        return Err(TrajectoryError::Infeasible(format!(
            "{} points do not match {} segment times",
            points.len(),
            n
        )));
    }
    if times.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(TrajectoryError::Infeasible(
            "segment times must be positive".into(),
        ));
    }
    let mean_t = times.iter().sum::<f64>() / n as f64;
    let rel: Vec<f64> = times.iter().map(|t| t / mean_t).collect();

    let nv = NC * n;
    let joints = if closed { n } else { n - 1 };
    let ends = if closed {
        0
    } else {
        3 * (start.is_some() as usize + end.is_some() as usize)
    };
    let nc = 2 * n + 3 * joints + ends;
    let dim = nv + nc;
    let mut kkt = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DMatrix::<f64>::zeros(dim, 3);

    // Snap cost per segment, in normalized time.
    for (i, t) in rel.iter().enumerate() {
        let w = t.powi(-7);
        for k in 4..NC {
            for l in 4..NC {
                let q = falling(k, 4) * falling(l, 4) / (k + l - 7) as f64;
                kkt[(NC * i + k, NC * i + l)] = 2.0 * w * q;
            }
        }
    }

    let mut row = nv;
    let put = |kkt: &mut DMatrix<f64>, row: usize, col: usize, v: f64| {
        kkt[(row, col)] = v;
        kkt[(col, row)] = v;
    };
    for i in 0..n {
        // Position at τ = 0 and τ = 1.
        put(&mut kkt, row, NC * i, 1.0);
        rhs.row_mut(row).copy_from(&points[i].transpose());
        row += 1;
        for k in 0..NC {
            put(&mut kkt, row, NC * i + k, 1.0);
        }
        rhs.row_mut(row)
            .copy_from(&points[(i + 1) % points.len()].transpose());
        row += 1;
    }
    for j in 0..joints {
        let (a, b) = (j, (j + 1) % n);
        for r in 1..=3 {
            for k in r..NC {
                put(
                    &mut kkt,
                    row,
                    NC * a + k,
                    falling(k, r) / rel[a].powi(r as i32),
                );
            }
            put(
                &mut kkt,
                row,
                NC * b + r,
                -falling(r, r) / rel[b].powi(r as i32),
            );
            row += 1;
        }
    }
    if !closed {
        if let Some(d) = start {
            for r in 1..=3 {
                put(&mut kkt, row, r, falling(r, r) / rel[0].powi(r as i32));
                rhs.row_mut(row)
                    .copy_from(&(d[r - 1] * mean_t.powi(r as i32)).transpose());
                row += 1;
            }
        }
        if let Some(d) = end {
            let last = n - 1;
            for r in 1..=3 {
                for k in r..NC {
                    put(
                        &mut kkt,
                        row,
                        NC * last + k,
                        falling(k, r) / rel[last].powi(r as i32),
                    );
                }
                rhs.row_mut(row)
                    .copy_from(&(d[r - 1] * mean_t.powi(r as i32)).transpose());
                row += 1;
            }
        }
    }
    debug_assert_eq!(row, dim);

    let sol = kkt
        .lu()
        .solve(&rhs)
        .ok_or_else(|| TrajectoryError::Infeasible("singular minimum-snap system".into()))?;
    if sol.iter().any(|x| !x.is_finite()) {
        return Err(TrajectoryError::Infeasible(
            "non-finite minimum-snap solution".into(),
        ));
    }
    let coeffs = (0..n)
        .map(|i| {
            std::array::from_fn(|k| {
                Vector3::new(
                    sol[(NC * i + k, 0)],
                    sol[(NC * i + k, 1)],
                    sol[(NC * i + k, 2)],
                )
            })
        })
        .collect();
    Ok(PolySpline::new(times.to_vec(), coeffs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> Vec<Vector3<f64>> {
        vec![
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(4.0, 0.0, 1.5),
            Vector3::new(4.0, 4.0, 1.0),
            Vector3::new(0.0, 4.0, 1.5),
        ]
    }

    #[test]
    fn closed_spline_interpolates_and_is_smooth() {
        let pts = square();
        let times = [1.0, 1.3, 0.8, 1.1];
        let s = solve_min_snap(&pts, &times, true, None, None).unwrap();
        for i in 0..4 {
            assert!((s.eval_segment(i, 0.0, 0) - pts[i]).norm() < 1e-9);
            assert!((s.eval_segment(i, 1.0, 0) - pts[(i + 1) % 4]).norm() < 1e-9);
            let next = (i + 1) % 4;
            for r in 1..=6 {
                let jump = (s.eval_segment(i, 1.0, r) - s.eval_segment(next, 0.0, r)).norm();
                let scale = s.eval_segment(i, 1.0, r).norm().max(1.0);
                assert!(jump / scale < 1e-6, "order {r} jump {jump} at joint {i}");
            }
        }
    }

    #[test]
    fn open_spline_honors_end_derivatives() {
        let pts = square();
        let start = [Vector3::zeros(); 3];
        let end = [
            Vector3::new(3.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 0.0, -2.0),
        ];
        let s = solve_min_snap(&pts, &[1.0, 2.0, 1.5], false, Some(&start), Some(&end)).unwrap();
        for r in 1..=3 {
            assert!(s.eval_segment(0, 0.0, r).norm() < 1e-9);
            assert!((s.eval_segment(2, 1.0, r) - end[r - 1]).norm() < 1e-8);
        }
        assert!((s.eval(s.duration(), 0) - pts[3]).norm() < 1e-9);
    }

    #[test]
    fn uniform_time_scaling_preserves_shape() {
        let pts = square();
        let a = solve_min_snap(&pts, &[1.0, 1.3, 0.8, 1.1], true, None, None).unwrap();
        let b = solve_min_snap(&pts, &[2.0, 2.6, 1.6, 2.2], true, None, None).unwrap();
        for k in 0..=20 {
            let t = a.duration() * k as f64 / 20.0;
            assert!((a.eval(t, 0) - b.eval(2.0 * t, 0)).norm() < 1e-8);
            assert!((a.eval(t, 2) - 4.0 * b.eval(2.0 * t, 2)).norm() < 1e-6);
        }
    }

    #[test]
    fn mismatched_lengths_rejected() {
        assert!(solve_min_snap(&square(), &[1.0, 1.0], true, None, None).is_err());
        assert!(solve_min_snap(&square(), &[1.0, -1.0, 1.0], false, None, None).is_err());
    }
}
