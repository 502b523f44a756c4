//! Planar four-corner PnP: homography initialization, Levenberg-Marquardt
//! refinement, and Monte-Carlo measurement covariance.

use nalgebra::{Matrix3, SMatrix, SVector, UnitQuaternion, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::detect::{CameraRig, CornerDetection};
use super::gate::Gate;
use crate::geom::{skew, so3_exp, FisheyeIntrinsics, Pose};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum PnpError {
    #[error("degenerate corner configuration")]
    DegenerateConfiguration,
    #[error("Levenberg-Marquardt refinement diverged")]
    NoConvergence,
    #[error("solution places the gate behind the camera")]
    FarBehind,
    #[error("reprojection RMS {0:.3} px exceeds the acceptance threshold")]
    ExcessiveReprojection(f64),
    #[error("{0}")]
    InvalidArgument(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PnpConfig {
    pub max_iterations: usize,
    /// Stop when the parameter step norm falls below this.
    pub step_tol: f64,
    /// Stop when the cost (px²) changes by less than this.
    pub cost_tol: f64,
    /// Measurements with a larger reprojection RMS are discarded, px.
    pub max_rms_px: f64,
}

impl Default for PnpConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            step_tol: 1e-10,
            cost_tol: 1e-12,
            max_rms_px: 3.0,
        }
    }
}

/// Relative pose of a gate from one camera frame.
#[derive(Clone, Debug, PartialEq)]
pub struct GateMeasurement {
    pub t: f64,
    pub gate_id: u32,
    /// `camera ← gate`
    pub cam_from_gate: Pose,
    /// Root-mean-square corner reprojection error, px.
    pub rms_px: f64,
    pub iterations: usize,
}

impl GateMeasurement {
    /// `world ← camera` implied by the known gate pose.
    pub fn camera_pose_world(&self, gate: &Gate) -> Pose {
        gate.pose().compose(&self.cam_from_gate.inverse())
    }
}

fn normalized(px: &Vector2<f64>, k: &FisheyeIntrinsics) -> Vector2<f64> {
    Vector2::new((px.x - k.cx) / k.fx, (px.y - k.cy) / k.fy)
}

fn check_degenerate(pts: &[Vector2<f64>; 4]) -> Result<(), PnpError> {
    if pts.iter().any(|p| !p.iter().all(|x| x.is_finite())) {
        return Err(PnpError::DegenerateConfiguration);
    }
    for i in 0..4 {
        for j in (i + 1)..4 {
            if (pts[i] - pts[j]).norm() < 1e-9 {
                return Err(PnpError::DegenerateConfiguration);
            }
        }
    }
    for (a, b, c) in [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)] {
        let u = pts[b] - pts[a];
        let v = pts[c] - pts[a];
        let cross = u.x * v.y - u.y * v.x;
        if cross.abs() < 1e-6 * u.norm() * v.norm() {
            return Err(PnpError::DegenerateConfiguration);
        }
    }
    Ok(())
}

/// Similarity transform moving the centroid to the origin with mean distance √2.
fn conditioning(pts: &[Vector2<f64>; 4]) -> Matrix3<f64> {
    let c = pts.iter().sum::<Vector2<f64>>() / 4.0;
    let mean = pts.iter().map(|p| (p - c).norm()).sum::<f64>() / 4.0;
    let s = std::f64::consts::SQRT_2 / mean;
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

/// DLT homography mapping `src` to `dst` (both inhomogeneous 2D).
pub fn homography_dlt(
    src: &[Vector2<f64>; 4],
    dst: &[Vector2<f64>; 4],
) -> Result<Matrix3<f64>, PnpError> {
    check_degenerate(src)?;
    check_degenerate(dst)?;
    let ts = conditioning(src);
    let td = conditioning(dst);
    let mut a = SMatrix::<f64, 9, 9>::zeros();
    for i in 0..4 {
        let s = ts * src[i].push(1.0);
        let d = td * dst[i].push(1.0);
        let (x, y) = (s.x / s.z, s.y / s.z);
        let (u, v) = (d.x / d.z, d.y / d.z);
        let r0 = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, -u];
        let r1 = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, -v];
        for j in 0..9 {
            a[(2 * i, j)] = r0[j];
            a[(2 * i + 1, j)] = r1[j];
        }
    }
    // Null vector of the 8×9 system (row 9 is zero padding).
    let svd = a.svd(false, true);
    let vt = svd.v_t.ok_or(PnpError::DegenerateConfiguration)?;
    let (imin, _) = svd.singular_values.argmin();
    let h = vt.row(imin);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let ti = td.try_inverse().ok_or(PnpError::DegenerateConfiguration)?;
    let out = ti * hn * ts;
    if !out.iter().all(|x| x.is_finite()) {
        return Err(PnpError::DegenerateConfiguration);
    }
    Ok(out)
}

/// Decomposes a plane-to-normalized-image homography for points `(0, y, z)`
/// in the gate frame into `camera ← gate`, picking the solution in front of
/// the camera.
fn decompose_homography(h: &Matrix3<f64>) -> Result<Pose, PnpError> {
    let h1 = h.column(0).into_owned();
    let h2 = h.column(1).into_owned();
    let h3 = h.column(2).into_owned();
    let norm = 0.5 * (h1.norm() + h2.norm());
    if norm < 1e-12 {
        return Err(PnpError::DegenerateConfiguration);
    }
    let mut s = 1.0 / norm;
    if h3.z * s < 0.0 {
        s = -s;
    }
    let r2 = h1 * s;
    let r3 = h2 * s;
    let r1 = r2.cross(&r3);
    let t = h3 * s;
    let m = Matrix3::from_columns(&[r1, r2, r3]);
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * vt;
    }
    let rot = UnitQuaternion::from_matrix(&r);
    if t.z <= 0.0 {
        return Err(PnpError::FarBehind);
    }
    Ok(Pose::new(rot, t))
}

fn residuals(
    pose: &Pose,
    obj: &[Vector3<f64>; 4],
    img: &[Vector2<f64>; 4],
    k: &FisheyeIntrinsics,
) -> Option<SVector<f64, 8>> {
    let mut r = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let x = pose.transform_point(&obj[i]);
        if x.z <= 0.0 {
            return None;
        }
        r[2 * i] = k.fx * x.x / x.z + k.cx - img[i].x;
        r[2 * i + 1] = k.fy * x.y / x.z + k.cy - img[i].y;
    }
    Some(r)
}

fn jacobian(pose: &Pose, obj: &[Vector3<f64>; 4], k: &FisheyeIntrinsics) -> SMatrix<f64, 8, 6> {
    let mut j = SMatrix::<f64, 8, 6>::zeros();
    for i in 0..4 {
        let rx = pose.rotation * obj[i];
        let x = rx + pose.translation;
        let iz = 1.0 / x.z;
        let dpi = nalgebra::Matrix2x3::new(
            k.fx * iz,
            0.0,
            -k.fx * x.x * iz * iz,
            0.0,
            k.fy * iz,
            -k.fy * x.y * iz * iz,
        );
        // Left perturbation R ← Exp(δ)R.
        let d_rot = dpi * (-skew(&rx));
        let d_t = dpi;
        for r in 0..2 {
            for c in 0..3 {
                j[(2 * i + r, c)] = d_rot[(r, c)];
                j[(2 * i + r, 3 + c)] = d_t[(r, c)];
            }
        }
    }
    j
}

/// Levenberg-Marquardt refinement of `camera ← gate` from an initial guess.
pub fn refine_pnp(
    init: &Pose,
    gate: &Gate,
    corners: &[Vector2<f64>; 4],
    k: &FisheyeIntrinsics,
    cfg: &PnpConfig,
) -> Result<(Pose, f64, usize), PnpError> {
    let obj = gate.corners_gate();
    let mut pose = *init;
    let mut r = residuals(&pose, &obj, corners, k).ok_or(PnpError::FarBehind)?;
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let j = jacobian(&pose, &obj, k);
        let jt = j.transpose();
        let hess = jt * j;
        let grad = jt * r;
        let mut accepted = false;
        let mut done = false;
        while lambda < 1e16 {
            let mut damped = hess;
            for d in 0..6 {
                damped[(d, d)] += lambda * (hess[(d, d)] + 1e-12);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-grad))) else {
                lambda *= 10.0;
                continue;
            };
            let dphi = Vector3::new(step[0], step[1], step[2]);
            let dt = Vector3::new(step[3], step[4], step[5]);
            let mut rot = so3_exp(&dphi) * pose.rotation;
            rot.renormalize();
            let candidate = Pose::new(rot, pose.translation + dt);
            match residuals(&candidate, &obj, corners, k) {
                Some(rc) if rc.norm_squared() < cost => {
                    let new_cost = rc.norm_squared();
                    if !new_cost.is_finite() {
                        return Err(PnpError::NoConvergence);
                    }
                    done = step.norm() < cfg.step_tol || cost - new_cost < cfg.cost_tol;
                    pose = candidate;
                    r = rc;
                    cost = new_cost;
                    lambda = (lambda * 0.1).max(1e-12);
                    accepted = true;
                    break;
                }
                _ => {
                    if step.norm() < cfg.step_tol {
                        done = true;
                        break;
                    }
                    lambda *= 10.0;
                }
            }
        }
        if done || !accepted {
            break;
        }
    }
    if !cost.is_finite() || !pose.translation.iter().all(|x| x.is_finite()) {
        return Err(PnpError::NoConvergence);
    }
    if pose.translation.z <= 0.0 {
        return Err(PnpError::FarBehind);
    }
    Ok((pose, (cost / 4.0).sqrt(), iterations))
}

/// Solves `camera ← gate` from four undistorted corner pixels: homography
/// initialization followed by Levenberg-Marquardt.
pub fn solve_pnp(
    det: &CornerDetection,
    gate: &Gate,
    k: &FisheyeIntrinsics,
    cfg: &PnpConfig,
) -> Result<GateMeasurement, PnpError> {
    let plane = gate.corners_gate().map(|c| Vector2::new(c.y, c.z));
    let img = det.corners.map(|p| normalized(&p, k));
    let h = homography_dlt(&plane, &img)?;
    let init = decompose_homography(&h)?;
    let (pose, rms, iterations) = refine_pnp(&init, gate, &det.corners, k, cfg)?;
    if rms > cfg.max_rms_px {
        return Err(PnpError::ExcessiveReprojection(rms));
    }
    Ok(GateMeasurement {
        t: 0.0,
        gate_id: det.gate_id,
        cam_from_gate: pose,
        rms_px: rms,
        iterations,
    })
}

/// Monte-Carlo covariance of the world-frame body position implied by a gate
/// measurement taken from `cam_pose` (`world ← camera`).
///
/// Sample `i` draws its pixel noise from stream `i` of a ChaCha generator
/// seeded with `seed`, so results do not depend on evaluation order.
pub fn estimate_position_covariance(
    gate: &Gate,
    cam_pose: &Pose,
    rig: &CameraRig,
    sigma_px: f64,
    n_samples: usize,
    seed: u64,
    cfg: &PnpConfig,
) -> Result<Matrix3<f64>, PnpError> {
    if n_samples < 30 {
        return Err(PnpError::InvalidArgument(format!(
            "need at least 30 samples, got {n_samples}"
        )));
    }
    if sigma_px == 0.0 {
        return Ok(Matrix3::zeros());
    }
    let k = &rig.intrinsics;
    let cam_from_gate = cam_pose.inverse().compose(&gate.pose());
    let mut exact = [Vector2::zeros(); 4];
    for (slot, c) in exact.iter_mut().zip(gate.corners_gate()) {
        *slot = k
            .project_pinhole(&cam_from_gate.transform_point(&c))
            .map_err(|_| PnpError::FarBehind)?;
    }
    let body_from_cam_inv = rig.body_from_cam().inverse();
    // Sampling noise only; the reprojection gate does not apply here.
    let solve_cfg = PnpConfig {
        max_rms_px: f64::INFINITY,
        ..cfg.clone()
    };
    let mut samples = Vec::with_capacity(n_samples);
    let mut first_err = None;
    for i in 0..n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let noisy = exact.map(|p| {
            let nx: f64 = StandardNormal.sample(&mut rng);
            let ny: f64 = StandardNormal.sample(&mut rng);
            p + Vector2::new(nx, ny) * sigma_px
        });
        match refine_pnp(&cam_from_gate, gate, &noisy, k, &solve_cfg) {
            Ok((pose, _, _)) => {
                let world_cam = gate.pose().compose(&pose.inverse());
                samples.push(world_cam.compose(&body_from_cam_inv).translation);
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let failed = n_samples - samples.len();
    if failed * 5 > n_samples {
        return Err(first_err.unwrap_or(PnpError::NoConvergence));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<Vector3<f64>>() / n;
    let cov = samples.iter().fold(Matrix3::zeros(), |acc, s| {
        let d = s - mean;
        acc + d * d.transpose()
    }) / (n - 1.0);
    Ok(crate::geom::symmetrize(&cov))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vision::detect::{detect_gates, DetectionConfig};
    use crate::vision::gate::GateMap;
    use rand_chacha::ChaCha8Rng;

    fn rig0() -> CameraRig {
        CameraRig {
            uptilt_deg: 0.0,
            offset: Vector3::zeros(),
            ..Default::default()
        }
    }

    fn exact_detection(gate: &Gate, cam_pose: &Pose, k: &FisheyeIntrinsics) -> CornerDetection {
        let cfg = DetectionConfig {
            sigma_px: 0.0,
            dropout: 0.0,
            max_range: 100.0,
            min_depth: 0.01,
        };
        let map = GateMap::new(vec![gate.clone()]).unwrap();
        detect_gates(cam_pose, &map, k, &cfg, &mut ChaCha8Rng::seed_from_u64(0))
            .pop()
            .expect("gate visible")
    }

    #[test]
    fn fronto_parallel_depth_is_exact() {
        let gate = Gate::new(1, Vector3::new(0.0, 0.0, 2.0), 0.0);
        let k = FisheyeIntrinsics::default();
        let body = Pose::new(UnitQuaternion::identity(), Vector3::new(-4.0, 0.0, 2.0));
        let cam = rig0().camera_pose(&body);
        let m = solve_pnp(
            &exact_detection(&gate, &cam, &k),
            &gate,
            &k,
            &PnpConfig::default(),
        )
        .unwrap();
        assert!((m.cam_from_gate.translation.z - 4.0).abs() < 1e-9);
        assert!(m.cam_from_gate.translation.xy().norm() < 1e-9);
        assert!(m.rms_px < 1e-6);
    }

    #[test]
    fn zero_noise_round_trip() {
        let gate = Gate::new(1, Vector3::new(2.0, 1.0, 1.5), 0.4);
        let k = FisheyeIntrinsics::default();
        let body = Pose::new(
            UnitQuaternion::from_euler_angles(0.1, -0.2, 0.5),
            Vector3::new(-2.0, -0.5, 1.2),
        );
        let cam = rig0().camera_pose(&body);
        let m = solve_pnp(
            &exact_detection(&gate, &cam, &k),
            &gate,
            &k,
            &PnpConfig::default(),
        )
        .unwrap();
        let (dt, dr) = m.camera_pose_world(&gate).error_to(&cam);
        assert!(dt < 1e-6 && dr < 1e-6, "{dt} {dr}");
    }

    #[test]
    fn collinear_corners_are_degenerate() {
        let gate = Gate::new(1, Vector3::zeros(), 0.0);
        let det = CornerDetection {
            gate_id: 1,
            corners: [
                Vector2::new(0.0, 0.0),
                Vector2::new(1.0, 1.0),
                Vector2::new(2.0, 2.0),
                Vector2::new(3.0, 3.0),
            ],
            visible: [true; 4],
        };
        assert_eq!(
            solve_pnp(
                &det,
                &gate,
                &FisheyeIntrinsics::default(),
                &PnpConfig::default()
            ),
            Err(PnpError::DegenerateConfiguration)
        );
        let dup = CornerDetection {
            corners: [Vector2::new(5.0, 5.0); 4],
            ..det
        };
        assert_eq!(
            solve_pnp(
                &dup,
                &gate,
                &FisheyeIntrinsics::default(),
                &PnpConfig::default()
            ),
            Err(PnpError::DegenerateConfiguration)
        );
    }

    #[test]
    fn reprojection_gate_discards_inconsistent_corners() {
        let gate = Gate::new(1, Vector3::new(0.0, 0.0, 2.0), 0.0);
        let k = FisheyeIntrinsics::default();
        let cam = rig0().camera_pose(&Pose::new(
            UnitQuaternion::identity(),
            Vector3::new(-4.0, 0.0, 2.0),
        ));
        let mut det = exact_detection(&gate, &cam, &k);
        det.corners[0] += Vector2::new(25.0, -10.0);
        assert!(matches!(
            solve_pnp(&det, &gate, &k, &PnpConfig::default()),
            Err(PnpError::ExcessiveReprojection(_))
        ));
    }

    #[test]
    fn montecarlo_zero_sigma_is_zero() {
        let gate = Gate::new(1, Vector3::new(0.0, 0.0, 2.0), 0.0);
        let cam = rig0().camera_pose(&Pose::new(
            UnitQuaternion::identity(),
            Vector3::new(-3.0, 0.0, 2.0),
        ));
        let r =
            estimate_position_covariance(&gate, &cam, &rig0(), 0.0, 100, 1, &PnpConfig::default())
                .unwrap();
        assert_eq!(r, Matrix3::zeros());
        assert!(estimate_position_covariance(
            &gate,
            &cam,
            &rig0(),
            1.0,
            10,
            1,
            &PnpConfig::default()
        )
        .is_err());
    }

    #[test]
    fn montecarlo_grows_with_distance() {
        let gate = Gate::new(1, Vector3::new(0.0, 0.0, 2.0), 0.0);
        let trace_at = |d: f64| {
            let cam = rig0().camera_pose(&Pose::new(
                UnitQuaternion::identity(),
                Vector3::new(-d, 0.3, 2.1),
            ));
            estimate_position_covariance(&gate, &cam, &rig0(), 1.0, 200, 9, &PnpConfig::default())
                .unwrap()
                .trace()
        };
        assert!(trace_at(8.0) > trace_at(3.0));
    }
}
