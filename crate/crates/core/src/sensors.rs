//! IMU, VIO and camera-frame generation from the true state.
//!
//! VIO position error is a drift process: a random walk plus an optional
//! constant drift velocity, optionally shrunk at loop-closure instants, with
//! white noise on top. Orientation may drift in yaw only.

use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::geom::gravity;
use crate::quad::TrueState;

/// IMU output rate, Hz.
pub const IMU_RATE_HZ: f64 = 500.0;
/// VIO output rate, Hz.
pub const VIO_RATE_HZ: f64 = 200.0;
/// Camera frame rate, Hz.
pub const CAMERA_RATE_HZ: f64 = 30.0;

fn gaussian3<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> Vector3<f64> {
    if sigma == 0.0 {
        return Vector3::zeros();
    }
    Vector3::from_fn(|_, _| {
        sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
    })
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let n: f64 = StandardNormal.sample(rng);
    sigma * n
}

/// IMU noise model. Densities are continuous-time; the discrete sample
/// standard deviation is `density / sqrt(dt)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImuNoise {
    /// rad/s/√Hz
    pub gyro_noise_density: f64,
    /// m/s²/√Hz
    pub accel_noise_density: f64,
    /// rad/s/√s
    pub gyro_bias_rw: f64,
    /// m/s²/√s
    pub accel_bias_rw: f64,
    /// Standard deviation of the turn-on gyro bias, rad/s.
    pub gyro_bias_init: f64,
    /// Standard deviation of the turn-on accelerometer bias, m/s².
    pub accel_bias_init: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        Self {
            gyro_noise_density: 0.005,
            accel_noise_density: 0.05,
            gyro_bias_rw: 1e-4,
            accel_bias_rw: 1e-4,
            gyro_bias_init: 0.005,
            accel_bias_init: 0.05,
        }
    }
}

impl ImuNoise {
    pub fn noiseless() -> Self {
        Self {
            gyro_noise_density: 0.0,
            accel_noise_density: 0.0,
            gyro_bias_rw: 0.0,
            accel_bias_rw: 0.0,
            gyro_bias_init: 0.0,
            accel_bias_init: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ImuBiases {
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

impl ImuBiases {
    pub fn draw<R: Rng + ?Sized>(noise: &ImuNoise, rng: &mut R) -> Self {
        Self {
            gyro: gaussian3(rng, noise.gyro_bias_init),
            accel: gaussian3(rng, noise.accel_bias_init),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    /// Specific force in the body frame, m/s².
    pub accel: Vector3<f64>,
    /// Body rates, rad/s.
    pub gyro: Vector3<f64>,
}

/// Measures specific force and body rate, then advances the bias random walk by `dt`.
pub fn sample_imu<R: Rng + ?Sized>(
    state: &TrueState,
    biases: &mut ImuBiases,
    noise: &ImuNoise,
    dt: f64,
    rng: &mut R,
) -> ImuSample {
    let specific_force = state.q.inverse() * (state.accel - gravity());
    let sd = dt.max(f64::MIN_POSITIVE).sqrt();
    let sample = ImuSample {
        t: state.t,
        accel: specific_force + biases.accel + gaussian3(rng, noise.accel_noise_density / sd),
        gyro: state.omega + biases.gyro + gaussian3(rng, noise.gyro_noise_density / sd),
    };
    biases.gyro += gaussian3(rng, noise.gyro_bias_rw * sd);
    biases.accel += gaussian3(rng, noise.accel_bias_rw * sd);
    sample
}

/// Periodic partial drift correction, the effect of on-device loop closure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopClosure {
    /// s
    pub interval: f64,
    /// Multiplier applied to the accumulated drift at each correction.
    pub shrink: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftModel {
    /// Position random walk, m/√s per axis.
    pub sigma_rw: f64,
    /// White position noise, m.
    pub sigma_p: f64,
    /// White velocity noise, m/s.
    pub sigma_v: f64,
    /// Yaw random walk, rad/√s.
    pub sigma_yaw_rw: f64,
    /// Magnitude of a constant drift velocity with uniformly random direction, m/s.
    pub drift_speed: f64,
    pub loop_closure: Option<LoopClosure>,
}

impl Default for DriftModel {
    fn default() -> Self {
        Self {
            sigma_rw: 0.03,
            sigma_p: 0.005,
            sigma_v: 0.02,
            sigma_yaw_rw: 0.1_f64.to_radians(),
            drift_speed: 0.08,
            loop_closure: None,
        }
    }
}

impl DriftModel {
    pub fn none() -> Self {
        Self {
            sigma_rw: 0.0,
            sigma_p: 0.0,
            sigma_v: 0.0,
            sigma_yaw_rw: 0.0,
            drift_speed: 0.0,
            loop_closure: None,
        }
    }
}

/// Accumulated VIO error.
#[derive(Clone, Debug, PartialEq)]
pub struct VioDrift {
    pub offset: Vector3<f64>,
    pub yaw: f64,
    pub velocity: Vector3<f64>,
    last_t: Option<f64>,
    next_closure: Option<f64>,
}

impl VioDrift {
    pub fn zero() -> Self {
        Self {
            offset: Vector3::zeros(),
            yaw: 0.0,
            velocity: Vector3::zeros(),
            last_t: None,
            next_closure: None,
        }
    }

    /// Starts at zero drift with a drift velocity of random direction.
    pub fn new<R: Rng + ?Sized>(model: &DriftModel, rng: &mut R) -> Self {
        let mut d = Self::zero();
        if model.drift_speed > 0.0 {
            let mut dir = gaussian3(rng, 1.0);
            while dir.norm() < 1e-9 {
                dir = gaussian3(rng, 1.0);
            }
            d.velocity = dir.normalize() * model.drift_speed;
        }
        d
    }

    /// Advances the drift process to time `t`.
    pub fn advance<R: Rng + ?Sized>(&mut self, t: f64, model: &DriftModel, rng: &mut R) {
        let Some(last) = self.last_t else {
            self.last_t = Some(t);
            self.next_closure = model.loop_closure.as_ref().map(|lc| t + lc.interval);
            return;
        };
        let dt = t - last;
        if dt <= 0.0 {
            return;
        }
        let sd = dt.sqrt();
        self.offset += self.velocity * dt + gaussian3(rng, model.sigma_rw * sd);
        self.yaw += gaussian(rng, model.sigma_yaw_rw * sd);
        if let (Some(lc), Some(next)) = (model.loop_closure.as_ref(), self.next_closure.as_mut()) {
            while t >= *next {
                self.offset *= lc.shrink;
                self.yaw *= lc.shrink;
                *next += lc.interval;
            }
        }
        self.last_t = Some(t);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VioSample {
    pub t: f64,
    pub q: UnitQuaternion<f64>,
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
}

/// Advances the drift to the state's time and returns the drifting VIO estimate.
pub fn sample_vio<R: Rng + ?Sized>(
    state: &TrueState,
    drift: &mut VioDrift,
    model: &DriftModel,
    rng: &mut R,
) -> VioSample {
    drift.advance(state.t, model, rng);
    let yaw = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), drift.yaw);
    VioSample {
        t: state.t,
        q: yaw * state.q,
        p: state.p + drift.offset + gaussian3(rng, model.sigma_p),
        v: state.v + drift.velocity + gaussian3(rng, model.sigma_v),
    }
}

/// Uniform detection latency between capture and availability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    /// s
    pub min: f64,
    /// s
    pub max: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            min: 0.024,
            max: 0.030,
        }
    }
}

impl LatencyModel {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.max <= self.min {
            return self.min;
        }
        Uniform::new_inclusive(self.min, self.max)
            .map(|u| u.sample(rng))
            .unwrap_or(self.min)
    }
}

/// A camera frame with its synchronized VIO estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraFrameEvent<D> {
    pub t_capture: f64,
    pub t_available: f64,
    pub vio: VioSample,
    pub detections: D,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::GRAVITY;
    use crate::quad::QuadParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hover_state() -> TrueState {
        TrueState::hovering(Vector3::new(0.0, 0.0, 1.5), 0.3, &QuadParams::default())
    }

    #[test]
    fn hover_specific_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = ImuBiases::default();
        let s = sample_imu(
            &hover_state(),
            &mut b,
            &ImuNoise::noiseless(),
            0.002,
            &mut rng,
        );
        assert!((s.accel - Vector3::new(0.0, 0.0, GRAVITY)).norm() < 1e-12);
        assert_eq!(s.gyro, Vector3::zeros());
    }

    #[test]
    fn free_fall_reads_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut state = hover_state();
        state.accel = gravity();
        let s = sample_imu(
            &state,
            &mut ImuBiases::default(),
            &ImuNoise::noiseless(),
            0.002,
            &mut rng,
        );
        assert!(s.accel.norm() < 1e-12);
    }

    #[test]
    fn sample_mean_at_rest_matches_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noise = ImuNoise {
            gyro_bias_rw: 0.0,
            accel_bias_rw: 0.0,
            ..Default::default()
        };
        let bias = ImuBiases {
            gyro: Vector3::new(0.01, -0.02, 0.005),
            accel: Vector3::new(0.1, 0.05, -0.08),
        };
        let mut b = bias;
        let state = TrueState::at_rest(Vector3::zeros(), UnitQuaternion::identity());
        let n = 100_000;
        let dt = 1.0 / IMU_RATE_HZ;
        let (mut sa, mut sg) = (Vector3::zeros(), Vector3::zeros());
        for _ in 0..n {
            let s = sample_imu(&state, &mut b, &noise, dt, &mut rng);
            sa += s.accel;
            sg += s.gyro;
        }
        let (ma, mg) = (sa / n as f64, sg / n as f64);
        let sig_a = noise.accel_noise_density / dt.sqrt();
        let sig_g = noise.gyro_noise_density / dt.sqrt();
        let expected_a = bias.accel + Vector3::new(0.0, 0.0, GRAVITY);
        for i in 0..3 {
            assert!((ma[i] - expected_a[i]).abs() < 3.0 * sig_a / (n as f64).sqrt());
            assert!((mg[i] - bias.gyro[i]).abs() < 3.0 * sig_g / (n as f64).sqrt());
        }
    }

    #[test]
    fn vio_without_drift_equals_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = DriftModel::none();
        let mut drift = VioDrift::new(&model, &mut rng);
        let mut state = hover_state();
        for k in 0..50 {
            state.t = k as f64 * 0.005;
            let s = sample_vio(&state, &mut drift, &model, &mut rng);
            assert_eq!(s.p, state.p);
            assert_eq!(s.v, state.v);
            assert!(s.q.angle_to(&state.q) < 1e-15);
        }
    }

    #[test]
    fn random_walk_variance_grows_linearly() {
        let model = DriftModel {
            sigma_rw: 0.05,
            sigma_p: 0.0,
            sigma_v: 0.0,
            sigma_yaw_rw: 0.0,
            drift_speed: 0.0,
            loop_closure: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let runs = 500;
        let horizon = 60.0;
        let dt = 1.0 / VIO_RATE_HZ;
        let mut sum_sq = Vector3::zeros();
        let mut state = hover_state();
        for _ in 0..runs {
            let mut drift = VioDrift::new(&model, &mut rng);
            let steps = (horizon / dt).round() as usize;
            for k in 0..=steps {
                state.t = k as f64 * dt;
                drift.advance(state.t, &model, &mut rng);
            }
            sum_sq += drift.offset.component_mul(&drift.offset);
        }
        let expected = model.sigma_rw.powi(2) * horizon;
        for i in 0..3 {
            let msd = sum_sq[i] / runs as f64;
            assert!(
                (msd - expected).abs() < 0.1 * expected,
                "axis {i}: {msd} vs {expected}"
            );
        }
    }

    #[test]
    fn loop_closure_bounds_drift_variance() {
        let model = DriftModel {
            sigma_rw: 0.05,
            sigma_p: 0.0,
            sigma_v: 0.0,
            sigma_yaw_rw: 0.0,
            drift_speed: 0.0,
            loop_closure: Some(LoopClosure {
                interval: 5.0,
                shrink: 0.5,
            }),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let runs = 300;
        let dt = 1.0 / VIO_RATE_HZ;
        // Mean squared drift per axis sampled right before closures at 30 s and 120 s.
        let mut at = [0.0; 2];
        for _ in 0..runs {
            let mut drift = VioDrift::new(&model, &mut rng);
            for k in 0..=(120.0 / dt) as usize {
                let t = k as f64 * dt;
                drift.advance(t, &model, &mut rng);
                if k == (29.99 / dt).round() as usize {
                    at[0] += drift.offset.norm_squared() / 3.0;
                }
                if k == (119.99 / dt).round() as usize {
                    at[1] += drift.offset.norm_squared() / 3.0;
                }
            }
        }
        let (early, late) = (at[0] / runs as f64, at[1] / runs as f64);
        // Stationary value before a closure: σ²·T / (1 − s²) = 0.0025·5/0.75.
        let stationary = 0.0025 * 5.0 / 0.75;
        assert!(late < 1.3 * stationary, "late {late}");
        assert!(
            late < 2.0 * early,
            "variance kept growing: {early} -> {late}"
        );
        // Uncorrected it would be σ²·120 = 0.3.
        assert!(late < 0.1);
    }

    #[test]
    fn vio_velocity_consistent_with_position_drift() {
        let model = DriftModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut drift = VioDrift::new(&model, &mut rng);
        let dt = 1.0 / VIO_RATE_HZ;
        let mut state = hover_state();
        let mut prev: Option<VioSample> = None;
        let mut residuals = Vec::new();
        for k in 0..4000 {
            state.t = k as f64 * dt;
            let s = sample_vio(&state, &mut drift, &model, &mut rng);
            if let Some(p) = prev {
                residuals.push((s.p - p.p) / dt - s.v);
            }
            prev = Some(s);
        }
        let n = residuals.len() as f64;
        let mean = residuals.iter().sum::<Vector3<f64>>() / n;
        let bound = (model.sigma_rw.powi(2) / dt
            + 2.0 * model.sigma_p.powi(2) / (dt * dt)
            + model.sigma_v.powi(2))
        .sqrt();
        for i in 0..3 {
            let var = residuals
                .iter()
                .map(|r| (r[i] - mean[i]).powi(2))
                .sum::<f64>()
                / n;
            assert!(
                mean[i].abs() < 4.0 * bound / n.sqrt(),
                "bias on axis {i}: {}",
                mean[i]
            );
            assert!(var.sqrt() < 1.1 * bound);
        }
    }

    #[test]
    fn latency_within_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = LatencyModel::default();
        for _ in 0..1000 {
            let l = m.sample(&mut rng);
            assert!((0.024..=0.030).contains(&l));
        }
    }
}
