use std::collections::VecDeque;

use nalgebra::{UnitQuaternion, Vector3};

use crate::geom::{gravity, quat_integrate};
use crate::quad::CtbrCommand;

/// Pose and velocity seen by the controller.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KinematicState {
    pub t: f64,
    pub q: UnitQuaternion<f64>,
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
}

/// Commands with the time at which each takes effect on the vehicle.
#[derive(Clone, Debug, Default)]
pub struct CommandBuffer {
    entries: VecDeque<(f64, CtbrCommand)>,
}

impl CommandBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a command that takes effect at `t_apply`. Entries must arrive
    /// in non-decreasing `t_apply` order.
    pub fn push(&mut self, t_apply: f64, cmd: CtbrCommand) {
        debug_assert!(self.entries.back().is_none_or(|(t, _)| *t <= t_apply));
        self.entries.push_back((t_apply, cmd));
    }

    /// Command in effect at `t`, if any has taken effect yet.
    pub fn active_at(&self, t: f64) -> Option<&CtbrCommand> {
        self.entries
            .iter()
            .rev()
            .find(|(ta, _)| *ta <= t)
            .map(|(_, c)| c)
    }

    /// Drops entries superseded before `t`, keeping the one active at `t`.
    pub fn prune_before(&mut self, t: f64) {
        while self.entries.len() > 1 && self.entries[1].0 <= t {
            self.entries.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(f64, CtbrCommand)> {
        self.entries.iter()
    }
}

/// Integration step of the predictor, s.
pub const PREDICT_STEP: f64 = 0.001;

/// Point-mass forward prediction by `delay` under the buffered commands.
/// Before the first entry takes effect, `fallback` is applied; beyond the
/// last one it is held.
pub fn predict_delay(
    state: &KinematicState,
    buffer: &CommandBuffer,
    delay: f64,
    mass: f64,
    fallback: &CtbrCommand,
) -> KinematicState {
    if delay <= 0.0 {
        return *state;
    }
    let mut s = *state;
    let end = state.t + delay;
    let mut times: Vec<f64> = buffer
        .iter()
        .map(|(t, _)| *t)
        .filter(|t| *t > state.t && *t < end)
        .collect();
    times.push(end);
    let mut t = state.t;
    for boundary in times {
        let cmd = *buffer.active_at(t).unwrap_or(fallback);
        while t < boundary {
            let h = (boundary - t).min(PREDICT_STEP);
            // Thrust direction at the step midpoint.
            let mid = quat_integrate(&s.q, &cmd.rates, 0.5 * h);
            let a = mid * Vector3::new(0.0, 0.0, cmd.thrust / mass) + gravity();
            s.p += s.v * h + 0.5 * a * h * h;
            s.v += a * h;
            s.q = quat_integrate(&s.q, &cmd.rates, h);
            t += h;
        }
    }
    s.t = end;
    s
}
