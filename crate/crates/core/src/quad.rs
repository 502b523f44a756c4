//! Ground-truth quadrotor: rigid-body dynamics, first-order rotors, an X-frame
//! mixer and a flight-controller style body-rate PID loop driven by CTBR commands.

use nalgebra::{Matrix4, UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::geom::{gravity, quat_integrate, GRAVITY};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SimError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("time step {0} s outside (0, 2 ms]")]
    BadTimeStep(f64),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

/// Body-rate loop gains, expressed as angular acceleration per unit error so
/// they are independent of the inertia.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RatePidGains {
    pub kp: [f64; 3],
    pub ki: [f64; 3],
    /// Derivative on the measured rate.
    pub kd: [f64; 3],
    /// Clamp on the integrated rate error, rad.
    pub integral_limit: f64,
}

impl Default for RatePidGains {
    // Settles a 2 rad/s roll-rate step in under 50 ms with the default 30 ms rotor lag.
    fn default() -> Self {
        Self {
            kp: [300.0, 300.0, 220.0],
            ki: [500.0, 500.0, 400.0],
            kd: [3.8, 3.8, 2.5],
            integral_limit: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadParams {
    /// kg
    pub mass: f64,
    /// Diagonal inertia, kg·m².
    pub inertia: [f64; 3],
    /// Center to rotor distance, m.
    pub arm_length: f64,
    /// Maximum thrust-to-weight ratio.
    pub twr: f64,
    /// Rotor thrust first-order time constant, s.
    pub rotor_time_constant: f64,
    /// Reaction torque per unit rotor thrust, m.
    pub yaw_torque_coeff: f64,
    /// Linear drag per body axis, N·s/m. Zero disables drag.
    pub drag: [f64; 3],
    /// Per-axis body-rate command limit, rad/s.
    pub max_rate: f64,
    pub pid: RatePidGains,
}

impl Default for QuadParams {
    fn default() -> Self {
        Self {
            // 665.5 g frame plus an assumed 205 g battery.
            mass: 0.87,
            inertia: [0.0025, 0.0025, 0.0040],
            arm_length: 0.11,
            twr: 7.0,
            rotor_time_constant: 0.03,
            yaw_torque_coeff: 0.022,
            drag: [0.0; 3],
            max_rate: 20.0,
            pid: RatePidGains::default(),
        }
    }
}

impl QuadParams {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.mass > 0.0) {
            return Err(SimError::InvalidParams(format!(
                "mass {} must be positive",
                self.mass
            )));
        }
        if !(self.twr > 1.0) {
            return Err(SimError::InvalidParams(format!(
                "thrust-to-weight {} cannot hover",
                self.twr
            )));
        }
        if self.inertia.iter().any(|&i| !(i > 0.0)) || !(self.arm_length > 0.0) {
            return Err(SimError::InvalidParams(
                "inertia and arm length must be positive".into(),
            ));
        }
        if !(self.rotor_time_constant >= 0.0)
            || !(self.yaw_torque_coeff > 0.0)
            || !(self.max_rate > 0.0)
        {
            return Err(SimError::InvalidParams(
                "rotor constants and rate limit must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn max_thrust(&self) -> f64 {
        self.twr * self.mass * GRAVITY
    }

    pub fn max_rotor_thrust(&self) -> f64 {
        self.max_thrust() / 4.0
    }

    pub fn hover_thrust(&self) -> f64 {
        self.mass * GRAVITY
    }

    fn inertia_vec(&self) -> Vector3<f64> {
        Vector3::from(self.inertia)
    }

    /// Maps rotor thrusts `[FL, FR, RR, RL]` to `[collective, τx, τy, τz]`.
    pub fn allocation(&self) -> Matrix4<f64> {
        let a = self.arm_length / std::f64::consts::SQRT_2;
        let k = self.yaw_torque_coeff;
        Matrix4::new(
            1.0, 1.0, 1.0, 1.0, //
            a, -a, -a, a, //
            -a, -a, a, a, //
            -k, k, -k, k,
        )
    }
}

/// Collective thrust and body-rate setpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtbrCommand {
    /// Collective thrust, N.
    pub thrust: f64,
    /// Desired body rates, rad/s.
    pub rates: Vector3<f64>,
}

impl CtbrCommand {
    pub fn new(thrust: f64, rates: Vector3<f64>) -> Self {
        Self { thrust, rates }
    }

    pub fn hover(params: &QuadParams) -> Self {
        Self {
            thrust: params.hover_thrust(),
            rates: Vector3::zeros(),
        }
    }

    /// Thrust as a fraction of the maximum.
    pub fn normalized_thrust(&self, params: &QuadParams) -> f64 {
        self.thrust / params.max_thrust()
    }

    pub fn is_finite(&self) -> bool {
        self.thrust.is_finite() && self.rates.iter().all(|r| r.is_finite())
    }

    /// Clamps thrust to `[0, T_max]` and each rate to `±max_rate`.
    pub fn clamped(&self, params: &QuadParams) -> Self {
        let r = params.max_rate;
        Self {
            thrust: self.thrust.clamp(0.0, params.max_thrust()),
            rates: self.rates.map(|w| w.clamp(-r, r)),
        }
    }
}

/// Rate-loop memory of the flight controller.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RateLoopState {
    pub integral: Vector3<f64>,
    pub last_rate: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrueState {
    pub t: f64,
    pub q: UnitQuaternion<f64>,
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    /// Body rates, rad/s.
    pub omega: Vector3<f64>,
    /// Rotor thrusts `[FL, FR, RR, RL]`, N.
    pub rotors: Vector4<f64>,
    /// World-frame linear acceleration over the last step.
    pub accel: Vector3<f64>,
    pub rate_loop: RateLoopState,
}

impl TrueState {
    /// At rest with motors stopped.
    pub fn at_rest(p: Vector3<f64>, q: UnitQuaternion<f64>) -> Self {
        Self {
            t: 0.0,
            q,
            p,
            v: Vector3::zeros(),
            omega: Vector3::zeros(),
            rotors: Vector4::zeros(),
            accel: Vector3::zeros(),
            rate_loop: RateLoopState::default(),
        }
    }

    /// Level hover: rotors already spinning at hover thrust.
    pub fn hovering(p: Vector3<f64>, yaw: f64, params: &QuadParams) -> Self {
        let mut s = Self::at_rest(p, UnitQuaternion::from_euler_angles(0.0, 0.0, yaw));
        s.rotors = Vector4::repeat(params.hover_thrust() / 4.0);
        s
    }

    pub fn is_finite(&self) -> bool {
        self.q.coords.iter().all(|x| x.is_finite())
            && self
                .p
                .iter()
                .chain(self.v.iter())
                .chain(self.omega.iter())
                .all(|x| x.is_finite())
            && self.rotors.iter().all(|x| x.is_finite())
    }
}

/// Allocates collective thrust and body torques to the four rotors.
///
/// Rotor thrusts are clamped to `[0, T_max/4]`. When the request saturates,
/// yaw torque is reduced first; any remaining violation is clamped per rotor.
pub fn mixer(collective: f64, torques: &Vector3<f64>, params: &QuadParams) -> Vector4<f64> {
    let a = params.arm_length / std::f64::consts::SQRT_2;
    let k = params.yaw_torque_coeff;
    let t_max = params.max_rotor_thrust();
    // Inverse of `QuadParams::allocation`.
    let c = collective / 4.0;
    let rx = torques.x / (4.0 * a);
    let ry = torques.y / (4.0 * a);
    let base = Vector4::new(c + rx - ry, c - rx - ry, c - rx + ry, c + rx + ry);
    let yaw_dir = Vector4::new(-1.0, 1.0, -1.0, 1.0) * (torques.z / (4.0 * k));

    // Largest yaw fraction s in [0, 1] keeping every rotor in range.
    let mut s: f64 = 1.0;
    for i in 0..4 {
        let (b, y) = (base[i], yaw_dir[i]);
        if b < 0.0 || b > t_max {
            s = 0.0;
            break;
        }
        if y > 0.0 {
            s = s.min((t_max - b) / y);
        } else if y < 0.0 {
            s = s.min(-b / y);
        }
    }
    (base + yaw_dir * s.max(0.0)).map(|t| t.clamp(0.0, t_max))
}

/// Advances the true state by `dt` under `cmd`: rate PID, mixer, rotor lag and
/// semi-implicit Newton-Euler integration.
pub fn step(
    state: &TrueState,
    cmd: &CtbrCommand,
    dt: f64,
    params: &QuadParams,
) -> Result<TrueState, SimError> {
    if !(dt > 0.0 && dt <= 0.002 + 1e-12) {
        return Err(SimError::BadTimeStep(dt));
    }
    if !cmd.is_finite() {
        return Err(SimError::NonFinite("command"));
    }
    if !state.is_finite() {
        return Err(SimError::NonFinite("state"));
    }
    let cmd = cmd.clamped(params);
    let inertia = params.inertia_vec();
    let gains = &params.pid;
    let omega = state.omega;

    let err = cmd.rates - omega;
    let lim = gains.integral_limit;
    let integral = (state.rate_loop.integral + err * dt).map(|x| x.clamp(-lim, lim));
    let rate_derivative = (omega - state.rate_loop.last_rate) / dt;
    let ang_acc_cmd = Vector3::from(gains.kp).component_mul(&err)
        + Vector3::from(gains.ki).component_mul(&integral)
        - Vector3::from(gains.kd).component_mul(&rate_derivative);
    let torque_cmd =
        inertia.component_mul(&ang_acc_cmd) + omega.cross(&inertia.component_mul(&omega));

    let rotor_target = mixer(cmd.thrust, &torque_cmd, params);
    let blend = if params.rotor_time_constant > 0.0 {
        1.0 - (-dt / params.rotor_time_constant).exp()
    } else {
        1.0
    };
    let rotors = state.rotors + (rotor_target - state.rotors) * blend;

    let wrench = params.allocation() * rotors;
    let thrust_world = state.q * Vector3::new(0.0, 0.0, wrench[0]);
    let drag_body = -Vector3::from(params.drag).component_mul(&(state.q.inverse() * state.v));
    let accel = (thrust_world + state.q * drag_body) / params.mass + gravity();

    let torque = Vector3::new(wrench[1], wrench[2], wrench[3]);
    let omega_dot = (torque - omega.cross(&inertia.component_mul(&omega))).component_div(&inertia);

    let v = state.v + accel * dt;
    let p = state.p + v * dt;
    let omega_next = omega + omega_dot * dt;
    let q = quat_integrate(&state.q, &omega_next, dt);

    let next = TrueState {
        t: state.t + dt,
        q,
        p,
        v,
        omega: omega_next,
        rotors,
        accel,
        rate_loop: RateLoopState {
            integral,
            last_rate: omega,
        },
    };
    if !next.is_finite() {
        return Err(SimError::NonFinite("state"));
    }
    Ok(next)
}
