//! Gate waypoints, minimum-snap reference generation and reference file I/O.

mod generate;
pub mod minsnap;
mod reference;
mod waypoints;

pub use generate::{
    attitude_from_thrust, closed_loop_spline, generate_race, generate_surrogate, GenConfig,
    RaceReference, START_BEFORE_GATE,
};
pub use reference::{
    load_trajectory, load_trajectory_with_twr, RefPoint, RefSample, ReferenceTrajectory,
    DEFAULT_TWR, REFERENCE_DT,
};
pub use waypoints::{
    place_waypoints, waypoints_to_json, Side, Waypoint, GATE_OFFSET, SPLIT_S_EXIT_OFFSET,
};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("row {row}: {msg}")]
    Parse { row: usize, msg: String },
    #[error("row {row} (t = {t:.3} s): thrust acceleration {thrust_accel:.3} m/s² exceeds cap {cap:.3} m/s²")]
    InfeasibleTrajectory {
        row: usize,
        t: f64,
        thrust_accel: f64,
        cap: f64,
    },
    #[error("infeasible waypoints: {0}")]
    Infeasible(String),
    #[error("no convergence: {0}")]
    NoConvergence(String),
}
