//! Receding-horizon tracking by iterative LQ on a point-mass model with
//! attitude kinematics. Inputs are mass-normalized collective thrust and
//! body rates; the error state is `[δp, δv, δθ]`.

use std::path::Path;

use nalgebra::{SMatrix, SVector, UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use super::predictor::KinematicState;
use crate::geom::{gravity, quat_integrate, so3_exp, so3_log};
use crate::quad::CtbrCommand;
use crate::trajectory::ReferenceTrajectory;

pub type Input = Vector4<f64>;
type Err9 = SVector<f64, 9>;
type Mat9 = SMatrix<f64, 9, 9>;
type Mat94 = SMatrix<f64, 9, 4>;
type Mat49 = SMatrix<f64, 4, 9>;
type Mat4 = SMatrix<f64, 4, 4>;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("solver cost increased on consecutive iterations")]
    SolverDiverged,
    #[error("inconsistent controller bounds: {0}")]
    InfeasibleBounds(String),
    #[error("invalid controller config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    /// s
    pub horizon: f64,
    pub nodes: usize,
    pub q_pos: [f64; 3],
    pub q_vel: [f64; 3],
    pub q_att: [f64; 3],
    /// Terminal weights are the stage weights times this.
    pub terminal_scale: f64,
    /// Weight on mass-normalized thrust deviation, per (m/s²)².
    pub r_thrust: f64,
    pub r_rates: [f64; 3],
    /// kg, used to convert thrust to acceleration.
    pub mass: f64,
    /// N
    pub thrust_min: f64,
    /// N
    pub thrust_max: f64,
    /// rad/s, per axis
    pub rate_max: f64,
    /// Command delay compensated by the predictor, s.
    pub delay: f64,
    pub use_predictor: bool,
    pub max_iterations: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            nodes: 20,
            q_pos: [200.0, 200.0, 300.0],
            q_vel: [10.0, 10.0, 10.0],
            q_att: [2.0, 2.0, 1.0],
            terminal_scale: 5.0,
            r_thrust: 0.05,
            r_rates: [0.5, 0.5, 0.5],
            mass: 0.87,
            thrust_min: 0.0,
            thrust_max: 0.87 * crate::geom::GRAVITY * 7.0 * 0.95,
            rate_max: 20.0,
            delay: 0.03,
            use_predictor: true,
            max_iterations: 5,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ControlError> {
        if !(self.horizon > 0.0) || self.nodes == 0 {
            return Err(ControlError::InvalidConfig(
                "horizon and node count must be positive".into(),
            ));
        }
        let weights = self
            .q_pos
            .iter()
            .chain(&self.q_vel)
            .chain(&self.q_att)
            .chain(&self.r_rates)
            .chain([&self.r_thrust, &self.terminal_scale]);
        if weights.clone().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(ControlError::InvalidConfig(
                "weights must be finite and non-negative".into(),
            ));
        }
        if !(self.r_thrust > 0.0) || self.r_rates.iter().any(|r| !(*r > 0.0)) {
            return Err(ControlError::InvalidConfig(
                "input weights must be positive".into(),
            ));
        }
        if !(self.delay >= 0.0) || !(self.mass > 0.0) {
            return Err(ControlError::InvalidConfig(
                "delay must be non-negative and mass positive".into(),
            ));
        }
        if !(self.thrust_min >= 0.0 && self.thrust_max > self.thrust_min) {
            return Err(ControlError::InfeasibleBounds(format!(
                "thrust range [{}, {}] N",
                self.thrust_min, self.thrust_max
            )));
        }
        if !(self.rate_max > 0.0) {
            return Err(ControlError::InfeasibleBounds(
                "rate bound must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self, ControlError> {
        let cfg: Self =
            serde_json::from_str(s).map_err(|e| ControlError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ControlError> {
        Self::from_json_str(
            &std::fs::read_to_string(path)
                .map_err(|e| ControlError::InvalidConfig(e.to_string()))?,
        )
    }

    pub fn node_dt(&self) -> f64 {
        self.horizon / self.nodes as f64
    }

    fn state_weights(&self) -> Mat9 {
        let d: Vec<f64> = self
            .q_pos
            .iter()
            .chain(&self.q_vel)
            .chain(&self.q_att)
            .cloned()
            .collect();
        Mat9::from_diagonal(&Err9::from_column_slice(&d))
    }

    fn input_weights(&self) -> Mat4 {
        Mat4::from_diagonal(&Vector4::new(
            self.r_thrust,
            self.r_rates[0],
            self.r_rates[1],
            self.r_rates[2],
        ))
    }

    fn clamp_input(&self, u: &Input) -> Input {
        let (cmin, cmax) = (self.thrust_min / self.mass, self.thrust_max / self.mass);
        let r = self.rate_max;
        Input::new(
            u[0].clamp(cmin, cmax),
            u[1].clamp(-r, r),
            u[2].clamp(-r, r),
            u[3].clamp(-r, r),
        )
    }

    pub fn to_command(&self, u: &Input) -> CtbrCommand {
        CtbrCommand::new(u[0] * self.mass, Vector3::new(u[1], u[2], u[3]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Node {
    p: Vector3<f64>,
    v: Vector3<f64>,
    q: UnitQuaternion<f64>,
}

impl Node {
    fn from_state(s: &KinematicState) -> Self {
        Self {
            p: s.p,
            v: s.v,
            q: s.q,
        }
    }

    fn boxplus(&self, d: &Err9) -> Node {
        Node {
            p: self.p + d.fixed_rows::<3>(0),
            v: self.v + d.fixed_rows::<3>(3),
            q: self.q * so3_exp(&d.fixed_rows::<3>(6).into_owned()),
        }
    }

    /// Error taking `other` to `self`.
    fn boxminus(&self, other: &Node) -> Err9 {
        let mut e = Err9::zeros();
        e.fixed_rows_mut::<3>(0).copy_from(&(self.p - other.p));
        e.fixed_rows_mut::<3>(3).copy_from(&(self.v - other.v));
        e.fixed_rows_mut::<3>(6)
            .copy_from(&so3_log(&(other.q.inverse() * self.q)));
        e
    }
}

fn dynamics(x: &Node, u: &Input, dt: f64) -> Node {
    let rates = Vector3::new(u[1], u[2], u[3]);
    let mid = quat_integrate(&x.q, &rates, 0.5 * dt);
    let a = mid * Vector3::new(0.0, 0.0, u[0]) + gravity();
    Node {
        p: x.p + x.v * dt + 0.5 * a * dt * dt,
        v: x.v + a * dt,
        q: quat_integrate(&x.q, &rates, dt),
    }
}

fn linearize(x: &Node, u: &Input, dt: f64) -> (Mat9, Mat94) {
    const EPS: f64 = 1e-6;
    let mut a = Mat9::zeros();
    let mut b = Mat94::zeros();
    let base = dynamics(x, u, dt);
    for j in 0..9 {
        let mut d = Err9::zeros();
        d[j] = EPS;
        let fp = dynamics(&x.boxplus(&d), u, dt);
        let fm = dynamics(&x.boxplus(&(-d)), u, dt);
        a.set_column(
            j,
            &((fp.boxminus(&base) - fm.boxminus(&base)) / (2.0 * EPS)),
        );
    }
    for j in 0..4 {
        let mut du = Input::zeros();
        du[j] = EPS;
        let fp = dynamics(x, &(u + du), dt);
        let fm = dynamics(x, &(u - du), dt);
        b.set_column(
            j,
            &((fp.boxminus(&base) - fm.boxminus(&base)) / (2.0 * EPS)),
        );
    }
    (a, b)
}

/// One solve's outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct MpcSolution {
    pub command: CtbrCommand,
    pub cost: f64,
    pub iterations: usize,
    /// Largest bound violation of the first input before clamping.
    pub clamp_violation: f64,
}

/// Stateful receding-horizon controller with a shifted warm start.
#[derive(Clone, Debug)]
pub struct Mpc {
    cfg: ControllerConfig,
    warm: Option<(f64, Vec<Input>)>,
}

impl Mpc {
    pub fn new(cfg: ControllerConfig) -> Result<Self, ControlError> {
        cfg.validate()?;
        Ok(Self { cfg, warm: None })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn reset(&mut self) {
        self.warm = None;
    }

    fn reference(&self, reference: &ReferenceTrajectory, t0: f64) -> (Vec<Node>, Vec<Input>) {
        let dt = self.cfg.node_dt();
        let n = self.cfg.nodes;
        let mut xs = Vec::with_capacity(n + 1);
        let mut us = Vec::with_capacity(n);
        for k in 0..=n {
            let r = reference.sample(t0 + k as f64 * dt);
            xs.push(Node {
                p: r.p,
                v: r.v,
                q: r.q,
            });
            if k < n {
                let c = (r.a - gravity()).dot(&(r.q * Vector3::z()));
                us.push(
                    self.cfg
                        .clamp_input(&Input::new(c, r.omega.x, r.omega.y, r.omega.z)),
                );
            }
        }
        (xs, us)
    }

    fn warm_start(&self, t0: f64, u_ref: &[Input]) -> Vec<Input> {
        let dt = self.cfg.node_dt();
        match &self.warm {
            Some((tp, prev)) if !prev.is_empty() => (0..self.cfg.nodes)
                .map(|k| {
                    let x = ((t0 - tp) / dt + k as f64).max(0.0);
                    let i = x.floor() as usize;
                    if i + 1 >= prev.len() {
                        // Past the previous horizon: fall back to the reference input.
                        if i < prev.len() {
                            prev[i]
                        } else {
                            u_ref[k]
                        }
                    } else {
                        prev[i].lerp(&prev[i + 1], x - i as f64)
                    }
                })
                .collect(),
            _ => u_ref.to_vec(),
        }
    }

    fn rollout(&self, x0: &Node, us: &[Input]) -> Vec<Node> {
        let dt = self.cfg.node_dt();
        let mut xs = Vec::with_capacity(us.len() + 1);
        xs.push(*x0);
        for u in us {
            let next = dynamics(xs.last().unwrap(), u, dt);
            xs.push(next);
        }
        xs
    }

    fn cost(&self, xs: &[Node], us: &[Input], x_ref: &[Node], u_ref: &[Input]) -> f64 {
        let q = self.cfg.state_weights();
        let r = self.cfg.input_weights();
        let n = us.len();
        let mut c = 0.0;
        for k in 0..n {
            let e = xs[k].boxminus(&x_ref[k]);
            let du = us[k] - u_ref[k];
            c += (e.transpose() * q * e)[0] + (du.transpose() * r * du)[0];
        }
        let e = xs[n].boxminus(&x_ref[n]);
        c + self.cfg.terminal_scale * (e.transpose() * q * e)[0]
    }

    /// Solves from `state` against the reference starting at `state.t`.
    pub fn solve(
        &mut self,
        state: &KinematicState,
        reference: &ReferenceTrajectory,
    ) -> Result<MpcSolution, ControlError> {
        let cfg = &self.cfg;
        let n = cfg.nodes;
        let dt = cfg.node_dt();
        let q = cfg.state_weights();
        let qf = q * cfg.terminal_scale;
        let r = cfg.input_weights();
        let (x_ref, u_ref) = self.reference(reference, state.t);
        let x0 = Node::from_state(state);

        let mut us: Vec<Input> = self
            .warm_start(state.t, &u_ref)
            .iter()
            .map(|u| cfg.clamp_input(u))
            .collect();
        let mut xs = self.rollout(&x0, &us);
        let mut cost = self.cost(&xs, &us, &x_ref, &u_ref);
        let mut mu = 1e-6;
        let mut increases = 0;
        let mut iterations = 0;
        let mut first_unclamped = us[0];

        for _ in 0..cfg.max_iterations {
            iterations += 1;
            let lin: Vec<(Mat9, Mat94)> = (0..n).map(|k| linearize(&xs[k], &us[k], dt)).collect();
            // Backward pass.
            let e_n = xs[n].boxminus(&x_ref[n]);
            let mut vx = qf * e_n;
            let mut vxx = qf;
            let mut ks = vec![Input::zeros(); n];
            let mut gains = vec![Mat49::zeros(); n];
            let mut dv1 = 0.0;
            let mut dv2 = 0.0;
            for k in (0..n).rev() {
                let (a, b) = &lin[k];
                let e = xs[k].boxminus(&x_ref[k]);
                let qx = q * e + a.transpose() * vx;
                let qu = r * (us[k] - u_ref[k]) + b.transpose() * vx;
                let qxx = q + a.transpose() * vxx * a;
                let quu = r + b.transpose() * vxx * b + Mat4::identity() * mu;
                let qux = b.transpose() * vxx * a;
                let Some(chol) = quu.cholesky() else {
                    return Err(ControlError::SolverDiverged);
                };
                let kff = -chol.solve(&qu);
                let kfb = -chol.solve(&qux);
                dv1 += kff.dot(&qu);
                dv2 += 0.5 * (kff.transpose() * quu * kff)[0];
                vx =
                    qx + kfb.transpose() * quu * kff + kfb.transpose() * qu + qux.transpose() * kff;
                vxx = qxx
                    + kfb.transpose() * quu * kfb
                    + kfb.transpose() * qux
                    + qux.transpose() * kfb;
                vxx = 0.5 * (vxx + vxx.transpose());
                ks[k] = kff;
                gains[k] = kfb;
            }
            // Forward pass with backtracking; steps gaining less than `tol`
            // count as converged so a re-solve reproduces the same inputs.
            let tol = 1e-9 * cost.max(1.0);
            let mut accepted = None;
            let mut stalled = false;
            let mut alpha = 1.0;
            for _ in 0..8 {
                let mut new_us = Vec::with_capacity(n);
                let mut new_xs = Vec::with_capacity(n + 1);
                new_xs.push(x0);
                let mut raw0 = us[0];
                for k in 0..n {
                    let dx = new_xs[k].boxminus(&xs[k]);
                    let raw = us[k] + ks[k] * alpha + gains[k] * dx;
                    if k == 0 {
                        raw0 = raw;
                    }
                    let u = cfg.clamp_input(&raw);
                    new_xs.push(dynamics(&new_xs[k], &u, dt));
                    new_us.push(u);
                }
                let new_cost = self.cost(&new_xs, &new_us, &x_ref, &u_ref);
                if new_cost.is_finite() && new_cost < cost - tol {
                    accepted = Some((new_xs, new_us, new_cost, raw0));
                    break;
                }
                stalled |= new_cost.is_finite() && new_cost < cost + tol;
                alpha *= 0.5;
            }
            match accepted {
                Some((nx, nu, nc, raw0)) => {
                    xs = nx;
                    us = nu;
                    cost = nc;
                    first_unclamped = raw0;
                    increases = 0;
                    mu = (mu * 0.1).max(1e-9);
                }
                None => {
                    // No descent: either converged or the model is fighting us.
                    if -(dv1 + dv2) < 10.0 * tol || stalled {
                        break;
                    }
                    increases += 1;
                    mu *= 100.0;
                    if increases >= 3 {
                        return Err(ControlError::SolverDiverged);
                    }
                }
            }
        }
        if !cost.is_finite() {
            return Err(ControlError::SolverDiverged);
        }
        let clamped = cfg.clamp_input(&first_unclamped);
        let clamp_violation = (first_unclamped - clamped).abs().max();
        let command = cfg.to_command(&us[0]);
        self.warm = Some((state.t, us));
        Ok(MpcSolution {
            command,
            cost,
            iterations,
            clamp_violation,
        })
    }
}
