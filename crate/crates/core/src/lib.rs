pub mod controller;
pub mod drift;
pub mod ekf;
pub mod geom;
pub mod harness;
pub mod log;
pub mod quad;
pub mod sensors;
pub mod trajectory;
pub mod vision;
