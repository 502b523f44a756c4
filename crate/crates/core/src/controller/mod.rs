//! Delay-compensated receding-horizon CTBR controller.

mod mpc;
mod predictor;

pub use mpc::{ControlError, ControllerConfig, Input, Mpc, MpcSolution};
pub use predictor::{predict_delay, CommandBuffer, KinematicState, PREDICT_STEP};

/// One row of solver telemetry.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SolveRecord {
    pub t: f64,
    pub cost: f64,
    pub iterations: usize,
    /// Wall-clock solve time, µs. Omitted from deterministic logs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solve_us: Option<f64>,
    pub fallback: bool,
}
