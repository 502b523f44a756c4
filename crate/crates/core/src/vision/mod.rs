//! Gate map, synthetic corner detection and gate-relative pose estimation.

mod detect;
mod gate;
mod pnp;

pub use detect::{
    associate, detect_gates, pinhole_bearing, CameraRig, CornerDetection, DetectionConfig,
};
pub use gate::{Gate, GateMap, MapError, INNER_HALF_SIZE, OUTER_HALF_SIZE};
pub use pnp::{
    estimate_position_covariance, homography_dlt, refine_pnp, solve_pnp, GateMeasurement,
    PnpConfig, PnpError,
};
