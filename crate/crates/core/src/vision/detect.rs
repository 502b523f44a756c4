//! Synthetic gate-corner detector: projects the known gate corners through the
//! true camera pose and corrupts them the way a keypoint network would.

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::gate::{Gate, GateMap};
use crate::geom::{FisheyeIntrinsics, Pose};

/// Camera intrinsics plus its mounting on the body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraRig {
    pub intrinsics: FisheyeIntrinsics,
    /// Upward tilt of the optical axis above the body x axis, degrees.
    pub uptilt_deg: f64,
    /// Camera center in the body frame, m.
    pub offset: Vector3<f64>,
}

impl Default for CameraRig {
    fn default() -> Self {
        Self {
            intrinsics: FisheyeIntrinsics::default(),
            uptilt_deg: 25.0,
            offset: Vector3::new(0.06, 0.0, 0.02),
        }
    }
}

impl CameraRig {
    /// `body ← camera`. The camera frame is x right, y down, z along the optical axis.
    pub fn body_from_cam(&self) -> Pose {
        let (s, c) = self.uptilt_deg.to_radians().sin_cos();
        let x = Vector3::new(0.0, -1.0, 0.0);
        let z = Vector3::new(c, 0.0, s);
        let y = z.cross(&x);
        let m = nalgebra::Matrix3::from_columns(&[x, y, z]);
        let rot =
            UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(m));
        Pose::new(rot, self.offset)
    }

    /// `world ← camera` for a body pose `world ← body`.
    pub fn camera_pose(&self, body: &Pose) -> Pose {
        body.compose(&self.body_from_cam())
    }

    /// `world ← body` for a camera pose `world ← camera`.
    pub fn body_pose(&self, camera: &Pose) -> Pose {
        camera.compose(&self.body_from_cam().inverse())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionConfig {
    /// Corner noise on the undistorted image, px.
    pub sigma_px: f64,
    /// Probability of dropping a whole gate.
    pub dropout: f64,
    /// m
    pub max_range: f64,
    /// Corners closer than this along the optical axis are not detected, m.
    pub min_depth: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            sigma_px: 1.0,
            dropout: 0.05,
            max_range: 12.0,
            min_depth: 0.3,
        }
    }
}

/// Four corner pixels of one gate on the undistorted (pinhole) image,
/// ordered as [`Gate::corners_gate`].
#[derive(Clone, Debug, PartialEq)]
pub struct CornerDetection {
    pub gate_id: u32,
    pub corners: [Vector2<f64>; 4],
    pub visible: [bool; 4],
}

impl CornerDetection {
    /// Image of the gate center: the intersection of the quadrilateral's
    /// diagonals, which perspective preserves. Falls back to the corner mean
    /// when the diagonals are parallel.
    pub fn center(&self) -> Vector2<f64> {
        let h = |p: &Vector2<f64>| Vector3::new(p.x, p.y, 1.0);
        let c = &self.corners;
        let d1 = h(&c[0]).cross(&h(&c[2]));
        let d2 = h(&c[1]).cross(&h(&c[3]));
        let x = d1.cross(&d2);
        if x.z.abs() < 1e-12 * x.norm().max(1.0) {
            return c.iter().sum::<Vector2<f64>>() / 4.0;
        }
        Vector2::new(x.x / x.z, x.y / x.z)
    }
}

/// Undistorted pixels of the gate corners if the gate is detectable from `cam_pose`.
fn visible_corners(
    gate: &Gate,
    cam_pose: &Pose,
    k: &FisheyeIntrinsics,
    cfg: &DetectionConfig,
) -> Option<[Vector2<f64>; 4]> {
    let cam_in_gate = gate.pose().inverse().transform_point(&cam_pose.translation);
    // Only the approach side of the gate is detected.
    if cam_in_gate.x >= 0.0 || cam_in_gate.norm() > cfg.max_range {
        return None;
    }
    let world_to_cam = cam_pose.inverse();
    let mut out = [Vector2::zeros(); 4];
    for (slot, corner) in out.iter_mut().zip(gate.corners_world()) {
        let x = world_to_cam.transform_point(&corner);
        if x.z < cfg.min_depth {
            return None;
        }
        let fish = k.project(&x).ok()?;
        let pin = k.project_pinhole(&x).ok()?;
        if !k.contains(&fish) || !k.contains(&pin) {
            return None;
        }
        *slot = pin;
    }
    Some(out)
}

/// Detects every gate whose four inner corners are visible from the camera
/// (`world ← camera`), with Gaussian pixel noise and whole-gate dropout.
pub fn detect_gates<R: Rng + ?Sized>(
    cam_pose: &Pose,
    map: &GateMap,
    k: &FisheyeIntrinsics,
    cfg: &DetectionConfig,
    rng: &mut R,
) -> Vec<CornerDetection> {
    let drop = Bernoulli::new(cfg.dropout.clamp(0.0, 1.0)).expect("probability in [0, 1]");
    let mut out = Vec::new();
    for gate in &map.gates {
        let Some(mut corners) = visible_corners(gate, cam_pose, k, cfg) else {
            continue;
        };
        if drop.sample(rng) {
            continue;
        }
        if cfg.sigma_px > 0.0 {
            for c in corners.iter_mut() {
                let nx: f64 = StandardNormal.sample(rng);
                let ny: f64 = StandardNormal.sample(rng);
                *c += Vector2::new(nx, ny) * cfg.sigma_px;
            }
        }
        out.push(CornerDetection {
            gate_id: gate.id,
            corners,
            visible: [true; 4],
        });
    }
    out
}

/// Bearing (unit ray in the camera frame) of an undistorted pixel.
pub fn pinhole_bearing(px: &Vector2<f64>, k: &FisheyeIntrinsics) -> Vector3<f64> {
    Vector3::new((px.x - k.cx) / k.fx, (px.y - k.cy) / k.fy, 1.0).normalize()
}

/// Matches a detection to the map gate whose center bearing, predicted from
/// the estimated camera pose, is closest to the detection center. Returns
/// `None` when the best match is further than `max_angle` radians.
pub fn associate(
    det: &CornerDetection,
    est_cam_pose: &Pose,
    map: &GateMap,
    k: &FisheyeIntrinsics,
    max_angle: f64,
) -> Option<u32> {
    let observed = pinhole_bearing(&det.center(), k);
    let world_to_cam = est_cam_pose.inverse();
    map.gates
        .iter()
        .filter_map(|g| {
            let c = world_to_cam.transform_point(&g.center);
            (c.z > 0.0).then(|| (g.id, c.normalize().dot(&observed).clamp(-1.0, 1.0).acos()))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .filter(|(_, angle)| *angle <= max_angle)
        .map(|(id, _)| id)
}
