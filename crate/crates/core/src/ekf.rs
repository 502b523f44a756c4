//! Error-state EKF fusing IMU samples with drift-corrected pose fixes.
//!
//! Nominal state: attitude, position, velocity, gyro bias, accel bias.
//! Error state (15): `[δθ, δp, δv, δb_g, δb_a]` with the attitude error on
//! the right, `q_true = q ⊗ Exp(δθ)`. Pose fixes observe the attitude and
//! position blocks.

use std::path::Path;

use nalgebra::{Matrix3, SMatrix, SVector, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::geom::{gravity, right_jacobian, skew, so3_exp, so3_log, symmetrize};
use crate::log::StateRow;
use crate::sensors::ImuSample;

pub type ErrorCov = SMatrix<f64, 15, 15>;
pub type ErrorVec = SVector<f64, 15>;

pub const ATT: usize = 0;
pub const POS: usize = 3;
pub const VEL: usize = 6;
pub const BG: usize = 9;
pub const BA: usize = 12;

/// Divergence tripwire on the gyro bias estimate, rad/s.
pub const MAX_GYRO_BIAS: f64 = 0.5;
/// Divergence tripwire on the accelerometer bias estimate, m/s².
pub const MAX_ACCEL_BIAS: f64 = 2.0;
/// Oldest pose fix accepted relative to the filter time, s.
pub const MAX_MEASUREMENT_AGE: f64 = 0.05;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum EkfError {
    #[error("IMU sample at {imu} precedes filter time {state}")]
    NonMonotonicTime { state: f64, imu: f64 },
    #[error("pose fix at {meas} is stale relative to filter time {state}")]
    StaleMeasurement { state: f64, meas: f64 },
    #[error("innovation covariance is not invertible")]
    SingularInnovation,
    #[error("bias estimate left its admissible range")]
    Diverged,
    #[error("invalid EKF config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EkfConfig {
    /// rad/s/√Hz
    pub gyro_noise_density: f64,
    /// m/s²/√Hz
    pub accel_noise_density: f64,
    /// rad/s/√s
    pub gyro_bias_rw: f64,
    /// m/s²/√s
    pub accel_bias_rw: f64,
    /// Static measurement standard deviation of the attitude fix, rad.
    pub meas_att_std: f64,
    /// Static measurement standard deviation of the position fix, m.
    pub meas_pos_std: f64,
    pub init_att_std: f64,
    pub init_pos_std: f64,
    pub init_vel_std: f64,
    pub init_gyro_bias_std: f64,
    pub init_accel_bias_std: f64,
}

impl Default for EkfConfig {
    fn default() -> Self {
        Self {
            gyro_noise_density: 0.005,
            accel_noise_density: 0.05,
            gyro_bias_rw: 1e-4,
            accel_bias_rw: 1e-4,
            meas_att_std: 0.02,
            meas_pos_std: 0.05,
            init_att_std: 0.05,
            init_pos_std: 0.1,
            init_vel_std: 0.1,
            init_gyro_bias_std: 0.005,
            init_accel_bias_std: 0.05,
        }
    }
}

impl EkfConfig {
    pub fn validate(&self) -> Result<(), EkfError> {
        let all = [
            self.gyro_noise_density,
            self.accel_noise_density,
            self.gyro_bias_rw,
            self.accel_bias_rw,
            self.meas_att_std,
            self.meas_pos_std,
            self.init_att_std,
            self.init_pos_std,
            self.init_vel_std,
            self.init_gyro_bias_std,
            self.init_accel_bias_std,
        ];
        if all.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(EkfError::InvalidConfig(
                "noise parameters must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self, EkfError> {
        let cfg: Self =
            serde_json::from_str(s).map_err(|e| EkfError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EkfError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| EkfError::InvalidConfig(e.to_string()))?;
        Self::from_json_str(&text)
    }

    pub fn initial_covariance(&self) -> ErrorCov {
        let mut p = ErrorCov::zeros();
        let stds = [
            self.init_att_std,
            self.init_pos_std,
            self.init_vel_std,
            self.init_gyro_bias_std,
            self.init_accel_bias_std,
        ];
        for (b, s) in stds.iter().enumerate() {
            for i in 0..3 {
                p[(3 * b + i, 3 * b + i)] = s * s;
            }
        }
        p
    }

    /// Discrete noise covariance for `[n_g, n_a, n_bg, n_ba]` over `dt`.
    pub fn process_noise(&self, dt: f64) -> SMatrix<f64, 12, 12> {
        let vars = [
            self.gyro_noise_density.powi(2) / dt,
            self.accel_noise_density.powi(2) / dt,
            self.gyro_bias_rw.powi(2) * dt,
            self.accel_bias_rw.powi(2) * dt,
        ];
        let mut q = SMatrix::<f64, 12, 12>::zeros();
        for (b, v) in vars.iter().enumerate() {
            for i in 0..3 {
                q[(3 * b + i, 3 * b + i)] = *v;
            }
        }
        q
    }

    pub fn measurement_noise(&self) -> SMatrix<f64, 6, 6> {
        let mut r = SMatrix::<f64, 6, 6>::zeros();
        for i in 0..3 {
            r[(i, i)] = self.meas_att_std.powi(2);
            r[(3 + i, 3 + i)] = self.meas_pos_std.powi(2);
        }
        r
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NavState {
    pub t: f64,
    pub q: UnitQuaternion<f64>,
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub bg: Vector3<f64>,
    pub ba: Vector3<f64>,
    pub cov: ErrorCov,
}

impl NavState {
    pub fn new(
        t: f64,
        q: UnitQuaternion<f64>,
        p: Vector3<f64>,
        v: Vector3<f64>,
        cfg: &EkfConfig,
    ) -> Self {
        Self {
            t,
            q,
            p,
            v,
            bg: Vector3::zeros(),
            ba: Vector3::zeros(),
            cov: cfg.initial_covariance(),
        }
    }

    /// Nominal state perturbed by an error vector.
    pub fn boxplus(&self, dx: &ErrorVec) -> NavState {
        let mut q = self.q * so3_exp(&dx.fixed_rows::<3>(ATT).into_owned());
        q.renormalize();
        NavState {
            q,
            p: self.p + dx.fixed_rows::<3>(POS),
            v: self.v + dx.fixed_rows::<3>(VEL),
            bg: self.bg + dx.fixed_rows::<3>(BG),
            ba: self.ba + dx.fixed_rows::<3>(BA),
            ..self.clone()
        }
    }

    /// Error vector taking `self` to `other`.
    pub fn boxminus(&self, other: &NavState) -> ErrorVec {
        let mut e = ErrorVec::zeros();
        e.fixed_rows_mut::<3>(ATT)
            .copy_from(&so3_log(&(self.q.inverse() * other.q)));
        e.fixed_rows_mut::<3>(POS).copy_from(&(other.p - self.p));
        e.fixed_rows_mut::<3>(VEL).copy_from(&(other.v - self.v));
        e.fixed_rows_mut::<3>(BG).copy_from(&(other.bg - self.bg));
        e.fixed_rows_mut::<3>(BA).copy_from(&(other.ba - self.ba));
        e
    }

    pub fn biases_bounded(&self) -> bool {
        self.bg.norm() < MAX_GYRO_BIAS && self.ba.norm() < MAX_ACCEL_BIAS
    }

    pub fn row(&self) -> StateRow {
        StateRow::new(self.t, &self.q, &self.p, &self.v)
    }
}

/// Pose fix in the world frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseMeasurement {
    pub t: f64,
    pub q: UnitQuaternion<f64>,
    pub p: Vector3<f64>,
}

/// Nominal propagation with explicit noise: gyro, accel, gyro-bias and
/// accel-bias increments. The position step is exact for acceleration held
/// constant over `dt`.
pub fn propagate_nominal(
    s: &NavState,
    gyro: &Vector3<f64>,
    accel: &Vector3<f64>,
    dt: f64,
    noise: &SVector<f64, 12>,
) -> NavState {
    let ng = noise.fixed_rows::<3>(0);
    let na = noise.fixed_rows::<3>(3);
    let omega = gyro - s.bg - ng;
    let a = s.q * (accel - s.ba - na) + gravity();
    let mut q = s.q * so3_exp(&(omega * dt));
    q.renormalize();
    NavState {
        t: s.t + dt,
        q,
        p: s.p + s.v * dt + 0.5 * a * dt * dt,
        v: s.v + a * dt,
        bg: s.bg + noise.fixed_rows::<3>(6),
        ba: s.ba + noise.fixed_rows::<3>(9),
        cov: s.cov,
    }
}

/// Error-state transition `F` and noise Jacobian `W` of [`propagate_nominal`]
/// at zero noise.
pub fn transition_jacobians(
    s: &NavState,
    gyro: &Vector3<f64>,
    accel: &Vector3<f64>,
    dt: f64,
) -> (ErrorCov, SMatrix<f64, 15, 12>) {
    let phi = (gyro - s.bg) * dt;
    let rot = s.q.to_rotation_matrix().into_inner();
    let f_skew = rot * skew(&(accel - s.ba));
    let jr = right_jacobian(&phi);
    let i3 = Matrix3::identity();
    let dt2 = 0.5 * dt * dt;

    let mut f = ErrorCov::identity();
    f.fixed_view_mut::<3, 3>(ATT, ATT)
        .copy_from(&so3_exp(&phi).to_rotation_matrix().into_inner().transpose());
    f.fixed_view_mut::<3, 3>(ATT, BG).copy_from(&(-jr * dt));
    f.fixed_view_mut::<3, 3>(POS, ATT)
        .copy_from(&(-f_skew * dt2));
    f.fixed_view_mut::<3, 3>(POS, VEL).copy_from(&(i3 * dt));
    f.fixed_view_mut::<3, 3>(POS, BA).copy_from(&(-rot * dt2));
    f.fixed_view_mut::<3, 3>(VEL, ATT)
        .copy_from(&(-f_skew * dt));
    f.fixed_view_mut::<3, 3>(VEL, BA).copy_from(&(-rot * dt));

    let mut w = SMatrix::<f64, 15, 12>::zeros();
    w.fixed_view_mut::<3, 3>(ATT, 0).copy_from(&(-jr * dt));
    w.fixed_view_mut::<3, 3>(POS, 3).copy_from(&(-rot * dt2));
    w.fixed_view_mut::<3, 3>(VEL, 3).copy_from(&(-rot * dt));
    w.fixed_view_mut::<3, 3>(BG, 6).copy_from(&i3);
    w.fixed_view_mut::<3, 3>(BA, 9).copy_from(&i3);
    (f, w)
}

/// Strapdown propagation to `imu.t` holding the sample over the interval.
pub fn propagate_imu(s: &NavState, imu: &ImuSample, cfg: &EkfConfig) -> Result<NavState, EkfError> {
    if imu.t < s.t {
        return Err(EkfError::NonMonotonicTime {
            state: s.t,
            imu: imu.t,
        });
    }
    let dt = imu.t - s.t;
    if dt == 0.0 {
        return Ok(s.clone());
    }
    let (f, w) = transition_jacobians(s, &imu.gyro, &imu.accel, dt);
    let mut out = propagate_nominal(s, &imu.gyro, &imu.accel, dt, &SVector::zeros());
    out.t = imu.t;
    out.cov = symmetrize(&(f * s.cov * f.transpose() + w * cfg.process_noise(dt) * w.transpose()));
    if !out.biases_bounded() {
        return Err(EkfError::Diverged);
    }
    Ok(out)
}

/// Pose residual `[Log(q̂⁻¹ q_m), p_m − p̂]`.
pub fn pose_residual(s: &NavState, m: &PoseMeasurement) -> SVector<f64, 6> {
    let mut r = SVector::<f64, 6>::zeros();
    r.fixed_rows_mut::<3>(0)
        .copy_from(&so3_log(&(s.q.inverse() * m.q)));
    r.fixed_rows_mut::<3>(3).copy_from(&(m.p - s.p));
    r
}

/// Kalman update with a pose fix, Joseph-form covariance and error reset.
pub fn update_pose(
    s: &NavState,
    m: &PoseMeasurement,
    cfg: &EkfConfig,
) -> Result<NavState, EkfError> {
    if s.t - m.t > MAX_MEASUREMENT_AGE || m.t - s.t > MAX_MEASUREMENT_AGE {
        return Err(EkfError::StaleMeasurement {
            state: s.t,
            meas: m.t,
        });
    }
    let mut h = SMatrix::<f64, 6, 15>::zeros();
    h.fixed_view_mut::<6, 6>(0, 0).fill_with_identity();
    let r = cfg.measurement_noise();
    let sinn = h * s.cov * h.transpose() + r;
    let s_inv = sinn
        .cholesky()
        .ok_or(EkfError::SingularInnovation)?
        .inverse();
    let k = s.cov * h.transpose() * s_inv;
    let dx = k * pose_residual(s, m);
    let ikh = ErrorCov::identity() - k * h;
    let p_post = ikh * s.cov * ikh.transpose() + k * r * k.transpose();

    let mut out = s.boxplus(&dx);
    let mut g = ErrorCov::identity();
    g.fixed_view_mut::<3, 3>(ATT, ATT)
        .copy_from(&(Matrix3::identity() - 0.5 * skew(&dx.fixed_rows::<3>(ATT).into_owned())));
    out.cov = symmetrize(&(g * p_post * g.transpose()));
    if !out.biases_bounded() {
        return Err(EkfError::Diverged);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::is_covariance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hover_imu(t: f64) -> ImuSample {
        ImuSample {
            t,
            accel: Vector3::new(0.0, 0.0, crate::geom::GRAVITY),
            gyro: Vector3::zeros(),
        }
    }

    fn random_vec<R: Rng>(rng: &mut R, scale: f64) -> Vector3<f64> {
        Vector3::from_fn(|_, _| rng.random_range(-scale..scale))
    }

    #[test]
    fn stationary_fixed_point_with_growing_covariance() {
        let cfg = EkfConfig::default();
        let mut s = NavState::new(
            0.0,
            UnitQuaternion::identity(),
            Vector3::new(1.0, 2.0, 3.0),
            Vector3::zeros(),
            &cfg,
        );
        let mut last_trace = s.cov.trace();
        for k in 1..=500 {
            s = propagate_imu(&s, &hover_imu(k as f64 * 0.002), &cfg).unwrap();
            assert!(s.cov.trace() > last_trace);
            last_trace = s.cov.trace();
        }
        assert!((s.p - Vector3::new(1.0, 2.0, 3.0)).norm() < 1e-12);
        assert!(s.v.norm() < 1e-12);
        assert!(s.q.angle() < 1e-12);
        assert!(is_covariance(&s.cov));
    }

    #[test]
    fn constant_acceleration_kinematics() {
        let cfg = EkfConfig::default();
        let a0 = Vector3::new(1.5, -0.5, 0.25);
        let mut s = NavState::new(
            0.0,
            UnitQuaternion::identity(),
            Vector3::zeros(),
            Vector3::zeros(),
            &cfg,
        );
        for k in 1..=500 {
            let imu = ImuSample {
                t: k as f64 * 0.002,
                accel: a0 - gravity(),
                gyro: Vector3::zeros(),
            };
            s = propagate_imu(&s, &imu, &cfg).unwrap();
        }
        assert!((s.t - 1.0).abs() < 1e-12);
        assert!((s.v - a0).norm() < 1e-4);
        assert!((s.p - a0 * 0.5).norm() < 1e-4);
    }

    #[test]
    fn rejects_backward_time() {
        let cfg = EkfConfig::default();
        let s = NavState::new(
            1.0,
            UnitQuaternion::identity(),
            Vector3::zeros(),
            Vector3::zeros(),
            &cfg,
        );
        assert!(matches!(
            propagate_imu(&s, &hover_imu(0.5), &cfg),
            Err(EkfError::NonMonotonicTime { .. })
        ));
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = EkfConfig::default();
        let eps = 1e-6;
        for _ in 0..100 {
            let mut s = NavState::new(
                0.0,
                so3_exp(&random_vec(&mut rng, 2.0)),
                random_vec(&mut rng, 5.0),
                random_vec(&mut rng, 5.0),
                &cfg,
            );
            s.bg = random_vec(&mut rng, 0.1);
            s.ba = random_vec(&mut rng, 0.5);
            let gyro = random_vec(&mut rng, 6.0);
            let accel = random_vec(&mut rng, 20.0);
            let dt = 0.002;
            let (f, w) = transition_jacobians(&s, &gyro, &accel, dt);
            let zero = SVector::<f64, 12>::zeros();
            let nominal = propagate_nominal(&s, &gyro, &accel, dt, &zero);
            for j in 0..15 {
                let mut d = ErrorVec::zeros();
                d[j] = eps;
                let plus =
                    nominal.boxminus(&propagate_nominal(&s.boxplus(&d), &gyro, &accel, dt, &zero));
                let minus = nominal.boxminus(&propagate_nominal(
                    &s.boxplus(&(-d)),
                    &gyro,
                    &accel,
                    dt,
                    &zero,
                ));
                let col = (plus - minus) / (2.0 * eps);
                let err = (col - f.column(j)).norm() / f.column(j).norm().max(1e-3);
                assert!(err < 1e-5, "F column {j}: {err}");
            }
            for j in 0..12 {
                let mut n = zero;
                n[j] = eps;
                let plus = nominal.boxminus(&propagate_nominal(&s, &gyro, &accel, dt, &n));
                let minus = nominal.boxminus(&propagate_nominal(&s, &gyro, &accel, dt, &(-n)));
                let col = (plus - minus) / (2.0 * eps);
                let err = (col - w.column(j)).norm() / w.column(j).norm().max(1e-6);
                assert!(err < 1e-5, "W column {j}: {err}");
            }
        }
    }

    #[test]
    fn zero_innovation_contracts_covariance() {
        let cfg = EkfConfig::default();
        let s = NavState::new(
            0.0,
            UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3),
            Vector3::new(1.0, 0.0, 2.0),
            Vector3::x(),
            &cfg,
        );
        let m = PoseMeasurement {
            t: 0.0,
            q: s.q,
            p: s.p,
        };
        let u = update_pose(&s, &m, &cfg).unwrap();
        assert!(s.boxminus(&u).norm() < 1e-12);
        assert!(u.cov.trace() < s.cov.trace());
        assert!(crate::geom::min_eigenvalue(&(s.cov - u.cov)) > -1e-15);
    }

    #[test]
    fn limiting_measurement_noise() {
        let cfg = EkfConfig {
            meas_pos_std: 1e3,
            meas_att_std: 1e-6,
            ..Default::default()
        };
        let s = NavState::new(
            0.0,
            UnitQuaternion::identity(),
            Vector3::zeros(),
            Vector3::zeros(),
            &cfg,
        );
        let m = PoseMeasurement {
            t: 0.0,
            q: UnitQuaternion::from_euler_angles(0.0, 0.0, 0.05),
            p: Vector3::new(1.0, 1.0, 1.0),
        };
        let u = update_pose(&s, &m, &cfg).unwrap();
        assert!(u.p.norm() < 1e-4);
        assert!(u.q.angle_to(&m.q) < 1e-6);
    }

    #[test]
    fn stale_fix_rejected() {
        let cfg = EkfConfig::default();
        let s = NavState::new(
            1.0,
            UnitQuaternion::identity(),
            Vector3::zeros(),
            Vector3::zeros(),
            &cfg,
        );
        let m = PoseMeasurement {
            t: 0.9,
            q: s.q,
            p: s.p,
        };
        assert!(matches!(
            update_pose(&s, &m, &cfg),
            Err(EkfError::StaleMeasurement { .. })
        ));
        assert!(update_pose(&s, &PoseMeasurement { t: 0.96, ..m }, &cfg).is_ok());
    }

    #[test]
    fn accel_bias_observed_through_pose_fixes() {
        let cfg = EkfConfig::default();
        let bias = Vector3::new(0.3, -0.2, 0.25);
        let omega = Vector3::new(0.3, 0.2, 0.5);
        let mut s = NavState::new(
            0.0,
            UnitQuaternion::identity(),
            Vector3::zeros(),
            Vector3::zeros(),
            &cfg,
        );
        s.cov.fixed_view_mut::<3, 3>(BA, BA).fill_with_identity();
        s.cov.fixed_view_mut::<3, 3>(BA, BA).scale_mut(0.25);
        for k in 1..=15_000 {
            let t = k as f64 * 0.002;
            // Tumbling keeps every bias axis observable.
            let q_prev = so3_exp(&(omega * (t - 0.002)));
            let q_true = so3_exp(&(omega * t));
            let imu = ImuSample {
                t,
                accel: q_prev.inverse() * -gravity() + bias,
                gyro: omega,
            };
            s = propagate_imu(&s, &imu, &cfg).unwrap();
            if k % 10 == 0 {
                s = update_pose(
                    &s,
                    &PoseMeasurement {
                        t,
                        q: q_true,
                        p: Vector3::zeros(),
                    },
                    &cfg,
                )
                .unwrap();
            }
        }
        for i in 0..3 {
            let sigma = s.cov[(BA + i, BA + i)].sqrt();
            assert!(
                (s.ba[i] - bias[i]).abs() < 3.0 * sigma.max(0.01),
                "axis {i}: {} vs {}",
                s.ba[i],
                bias[i]
            );
        }
    }
}
