//! Translational VIO drift filter. The state is the position offset between
//! the VIO estimate and the truth; it is constant in expectation and
//! observed through gate detections.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::geom::{symmetrize, wrap_angle, yaw_of, Pose};
use crate::sensors::VioSample;

#[derive(Debug, thiserror::Error)]
pub enum DriftError {
    #[error("innovation covariance is not invertible")]
    SingularInnovation,
    #[error("negative time step {0}")]
    NegativeTimeStep(f64),
    #[error("invalid drift filter config: {0}")]
    InvalidConfig(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftKfConfig {
    /// Acceleration variance of the drift process, m²/s⁴.
    pub sigma_a2: f64,
    /// Per-gate Mahalanobis gating of innovations.
    pub gating: bool,
    /// Chi-square(3) probability of the gate.
    pub gate_chi2_p: f64,
    /// After this many consecutive frames whose measurements were all gated
    /// out, the next frame is accepted without gating.
    pub reacquire_after: u32,
    /// Reject a gate whose PnP yaw differs from the VIO yaw by more than this, deg.
    pub max_yaw_mismatch_deg: f64,
}

impl Default for DriftKfConfig {
    fn default() -> Self {
        Self {
            sigma_a2: 8.0,
            gating: true,
            gate_chi2_p: 0.99,
            reacquire_after: 5,
            max_yaw_mismatch_deg: 25.0,
        }
    }
}

impl DriftKfConfig {
    pub fn validate(&self) -> Result<(), DriftError> {
        if !(self.sigma_a2.is_finite() && self.sigma_a2 >= 0.0) {
            return Err(DriftError::InvalidConfig(
                "sigma_a2 must be finite and non-negative".into(),
            ));
        }
        if !(self.gate_chi2_p > 0.0 && self.gate_chi2_p < 1.0) {
            return Err(DriftError::InvalidConfig(
                "gate_chi2_p must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self, DriftError> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DriftError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Squared Mahalanobis distance threshold.
    pub fn gate_threshold(&self) -> f64 {
        ChiSquared::new(3.0)
            .expect("3 dof")
            .inverse_cdf(self.gate_chi2_p)
    }
}

/// Process noise added over `dt`: `I · ¼ dt⁴ σ_a²`.
pub fn process_noise(dt: f64, sigma_a2: f64) -> Matrix3<f64> {
    Matrix3::identity() * (0.25 * dt.powi(4) * sigma_a2)
}

/// One gate's drift observation `z = p_vio − p_gate`, with `H = I`.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftObservation {
    pub gate_id: u32,
    pub z: Vector3<f64>,
    pub r: Matrix3<f64>,
}

impl DriftObservation {
    /// Builds the observation from the synchronized VIO sample and the body
    /// pose implied by a gate measurement.
    pub fn from_gate(
        gate_id: u32,
        vio: &VioSample,
        body_from_gate: &Pose,
        r: Matrix3<f64>,
    ) -> Self {
        Self {
            gate_id,
            z: vio.p - body_from_gate.translation,
            r,
        }
    }
}

/// Heading agreement between a PnP-implied body pose and a VIO orientation.
pub fn yaw_consistent(pnp_body: &Pose, vio: &VioSample, max_deg: f64) -> bool {
    wrap_angle(yaw_of(&pnp_body.rotation) - yaw_of(&vio.q)).abs() <= max_deg.to_radians()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateReport {
    pub accepted: Vec<u32>,
    pub rejected: Vec<u32>,
    /// Squared Mahalanobis distance of each input observation, in input order.
    pub mahalanobis2: Vec<f64>,
    pub reacquired: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriftKf {
    pub x: Vector3<f64>,
    pub p: Matrix3<f64>,
    pub last_t: Option<f64>,
    cfg: DriftKfConfig,
    threshold: f64,
    rejected_frames: u32,
    locked: bool,
}

impl DriftKf {
    /// Zero state, zero covariance.
    pub fn new(cfg: DriftKfConfig) -> Self {
        let threshold = cfg.gate_threshold();
        Self {
            x: Vector3::zeros(),
            p: Matrix3::zeros(),
            last_t: None,
            cfg,
            threshold,
            rejected_frames: 0,
            locked: false,
        }
    }

    /// True once any measurement has been accepted. Gating starts here: the
    /// zero initial covariance expresses no knowledge, not certainty.
    pub fn is_locked(&self) -> bool {
        self.locked
    }

    pub fn config(&self) -> &DriftKfConfig {
        &self.cfg
    }

    pub fn propagate(&mut self, dt: f64) -> Result<(), DriftError> {
        if dt < 0.0 || dt.is_nan() {
            return Err(DriftError::NegativeTimeStep(dt));
        }
        self.p += process_noise(dt, self.cfg.sigma_a2);
        Ok(())
    }

    /// Propagates over the time since the previous call.
    pub fn propagate_to(&mut self, t: f64) -> Result<(), DriftError> {
        if let Some(last) = self.last_t {
            self.propagate(t - last)?;
        }
        self.last_t = Some(t);
        Ok(())
    }

    fn mahalanobis2(&self, obs: &DriftObservation) -> Option<f64> {
        let s = self.p + obs.r;
        let y = obs.z - self.x;
        s.try_inverse().map(|si| (y.transpose() * si * y)[0])
    }

    /// Joint Kalman update over every observation of one camera frame.
    pub fn update(
        &mut self,
        observations: &[DriftObservation],
    ) -> Result<UpdateReport, DriftError> {
        let mut report = UpdateReport::default();
        if observations.is_empty() {
            return Ok(report);
        }
        let mut keep = Vec::with_capacity(observations.len());
        for obs in observations {
            let d2 = self.mahalanobis2(obs).unwrap_or(f64::INFINITY);
            report.mahalanobis2.push(d2);
            if !self.cfg.gating || !self.locked || d2 <= self.threshold {
                keep.push(obs);
            }
        }
        if keep.is_empty() {
            self.rejected_frames += 1;
            if self.rejected_frames <= self.cfg.reacquire_after {
                report.rejected = observations.iter().map(|o| o.gate_id).collect();
                return Ok(report);
            }
            report.reacquired = true;
            keep = observations.iter().collect();
        }
        self.rejected_frames = 0;
        self.locked = true;
        report.accepted = keep.iter().map(|o| o.gate_id).collect();
        report.rejected = observations
            .iter()
            .filter(|o| !keep.iter().any(|k| std::ptr::eq(*k, *o)))
            .map(|o| o.gate_id)
            .collect();

        let m = keep.len();
        let mut h = DMatrix::zeros(3 * m, 3);
        let mut r = DMatrix::zeros(3 * m, 3 * m);
        let mut y = DVector::zeros(3 * m);
        for (i, obs) in keep.iter().enumerate() {
            h.fixed_view_mut::<3, 3>(3 * i, 0)
                .copy_from(&Matrix3::identity());
            r.fixed_view_mut::<3, 3>(3 * i, 3 * i).copy_from(&obs.r);
            y.fixed_rows_mut::<3>(3 * i).copy_from(&(obs.z - self.x));
        }
        let p = DMatrix::from_column_slice(3, 3, self.p.as_slice());
        let s = &h * &p * h.transpose() + &r;
        let s_inv = s
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or(DriftError::SingularInnovation)?;
        let k = &p * h.transpose() * s_inv;
        let dx = &k * y;
        let ikh = DMatrix::identity(3, 3) - &k * &h;
        let p_post = &ikh * &p * ikh.transpose() + &k * &r * k.transpose();
        self.x += Vector3::new(dx[0], dx[1], dx[2]);
        self.p = symmetrize(&Matrix3::from_column_slice(p_post.as_slice()));
        Ok(report)
    }

    /// Subtracts the estimated drift from a VIO position.
    pub fn correct_vio(&self, vio: &VioSample) -> VioSample {
        VioSample {
            p: vio.p - self.x,
            ..*vio
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::is_covariance;
    use nalgebra::UnitQuaternion;

    fn obs(z: Vector3<f64>, r: f64) -> DriftObservation {
        DriftObservation {
            gate_id: 1,
            z,
            r: Matrix3::identity() * r,
        }
    }

    fn ungated() -> DriftKfConfig {
        DriftKfConfig {
            gating: false,
            ..Default::default()
        }
    }

    #[test]
    fn zero_dt_is_identity() {
        let mut kf = DriftKf::new(DriftKfConfig::default());
        kf.propagate(0.0).unwrap();
        assert_eq!(kf.p, Matrix3::zeros());
        assert_eq!(kf.x, Vector3::zeros());
        assert!(kf.propagate(-1.0).is_err());
    }

    #[test]
    fn camera_rate_increment() {
        let expected = 0.25 * (1.0f64 / 30.0).powi(4) * 8.0;
        let mut kf = DriftKf::new(DriftKfConfig::default());
        kf.propagate(1.0 / 30.0).unwrap();
        for i in 0..3 {
            assert!((kf.p[(i, i)] - expected).abs() < 1e-18);
            assert!((kf.p[(i, i)] - 2.4691e-6).abs() < 1e-10);
        }
    }

    #[test]
    fn per_step_accumulation() {
        let (a, b) = (0.02, 0.05);
        let mut split = DriftKf::new(DriftKfConfig::default());
        split.propagate(a).unwrap();
        split.propagate(b).unwrap();
        let mut joint = DriftKf::new(DriftKfConfig::default());
        joint.propagate(a + b).unwrap();
        let per_step = 0.25 * (a.powi(4) + b.powi(4)) * 8.0;
        assert!((split.p[(0, 0)] - per_step).abs() < 1e-18);
        assert!(joint.p[(0, 0)] > split.p[(0, 0)]);
    }

    #[test]
    fn uninformative_measurement_leaves_prior() {
        let mut kf = DriftKf::new(ungated());
        kf.p = Matrix3::identity();
        kf.x = Vector3::new(0.1, 0.2, 0.3);
        let prior = kf.clone();
        kf.update(&[obs(Vector3::new(5.0, -3.0, 1.0), 1e6)])
            .unwrap();
        assert!((kf.x - prior.x).norm() < 1e-4);
        assert!((kf.p - prior.p).norm() < 1e-4);
    }

    #[test]
    fn perfect_measurement_is_adopted() {
        let mut kf = DriftKf::new(ungated());
        kf.p = Matrix3::identity();
        let z = Vector3::new(0.4, -0.7, 0.05);
        kf.update(&[obs(z, 0.0)]).unwrap();
        assert!((kf.x - z).norm() < 1e-12);
    }

    #[test]
    fn zero_prior_and_zero_noise_is_singular() {
        let mut kf = DriftKf::new(ungated());
        assert!(matches!(
            kf.update(&[obs(Vector3::x(), 0.0)]),
            Err(DriftError::SingularInnovation)
        ));
    }

    #[test]
    fn stacked_duplicates_equal_halved_noise() {
        let z = Vector3::new(0.3, 0.1, -0.2);
        let mut prior = DriftKf::new(ungated());
        prior.p = Matrix3::new(0.5, 0.1, 0.0, 0.1, 0.4, 0.05, 0.0, 0.05, 0.3);
        let mut stacked = prior.clone();
        stacked.update(&[obs(z, 0.2), obs(z, 0.2)]).unwrap();
        let mut single = prior;
        single.update(&[obs(z, 0.1)]).unwrap();
        assert!((stacked.x - single.x).norm() < 1e-10);
        assert!((stacked.p - single.p).norm() < 1e-10);
    }

    #[test]
    fn posterior_never_exceeds_prior() {
        let mut kf = DriftKf::new(ungated());
        for k in 0..50 {
            kf.propagate(1.0 / 30.0).unwrap();
            let prior = kf.p;
            let z = Vector3::new(0.01 * k as f64, 0.0, -0.02);
            kf.update(&[obs(z, 1e-3), obs(z * 1.1, 4e-3)]).unwrap();
            assert!(is_covariance(&kf.p));
            assert!(crate::geom::min_eigenvalue(&(prior - kf.p)) > -1e-15);
        }
    }

    #[test]
    fn first_measurement_is_never_gated() {
        let mut kf = DriftKf::new(DriftKfConfig::default());
        kf.propagate(1.0 / 30.0).unwrap();
        let rep = kf
            .update(&[obs(Vector3::new(0.5, 0.0, 0.0), 1e-6)])
            .unwrap();
        assert_eq!(rep.accepted, vec![1]);
        assert!(kf.is_locked());
        assert!((kf.x.x - 0.5).abs() < 0.2);
    }

    fn locked(p: f64) -> DriftKf {
        let mut kf = DriftKf::new(DriftKfConfig::default());
        kf.p = Matrix3::identity();
        kf.update(&[obs(Vector3::zeros(), 1.0)]).unwrap();
        kf.p = Matrix3::identity() * p;
        kf
    }

    #[test]
    fn gating_rejects_outlier_then_reacquires() {
        let mut kf = locked(1e-4);
        let far = obs(Vector3::new(3.0, 0.0, 0.0), 1e-4);
        for _ in 0..5 {
            let rep = kf.update(std::slice::from_ref(&far)).unwrap();
            assert!(rep.accepted.is_empty());
            assert_eq!(kf.x, Vector3::zeros());
        }
        let rep = kf.update(&[far]).unwrap();
        assert!(rep.reacquired);
        assert!(kf.x.x > 1.0);
    }

    #[test]
    fn gating_keeps_inliers_in_a_mixed_frame() {
        let mut kf = locked(1e-2);
        let good = DriftObservation {
            gate_id: 1,
            ..obs(Vector3::new(0.05, 0.0, 0.0), 1e-2)
        };
        let bad = DriftObservation {
            gate_id: 2,
            ..obs(Vector3::new(4.0, 0.0, 0.0), 1e-2)
        };
        let rep = kf.update(&[good, bad]).unwrap();
        assert_eq!(rep.accepted, vec![1]);
        assert_eq!(rep.rejected, vec![2]);
        assert!(kf.x.x < 0.05);
    }

    #[test]
    fn threshold_is_chi2_99() {
        assert!((DriftKfConfig::default().gate_threshold() - 11.345).abs() < 1e-3);
    }

    #[test]
    fn correction_only_touches_position() {
        let mut kf = DriftKf::new(ungated());
        let vio = VioSample {
            t: 1.0,
            q: UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3),
            p: Vector3::new(1.0, 2.0, 3.0),
            v: Vector3::new(4.0, 5.0, 6.0),
        };
        assert_eq!(kf.correct_vio(&vio), vio);
        kf.x = Vector3::new(0.5, -0.5, 0.1);
        let c = kf.correct_vio(&vio);
        assert_eq!(c.p, Vector3::new(0.5, 2.5, 2.9));
        assert_eq!((c.q, c.v, c.t), (vio.q, vio.v, vio.t));
    }

    #[test]
    fn config_json_defaults() {
        let cfg =
            DriftKfConfig::from_json_str(r#"{"sigma_a2": 8, "gating": true, "gate_chi2_p": 0.99}"#)
                .unwrap();
        assert_eq!(cfg, DriftKfConfig::default());
        assert!(DriftKfConfig::from_json_str(r#"{"gate_chi2_p": 1.5}"#).is_err());
    }
}
