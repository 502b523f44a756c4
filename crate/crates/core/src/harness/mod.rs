//! Closed-loop race simulation: scheduling, lap timing, logs and analysis.
//!
//! Each physics tick runs its stages in a fixed order: physics, sensors,
//! vision, filters, controller.

mod analyze;
mod config;
mod gatepass;
mod output;
mod race;

pub use analyze::{
    analyze_dir, estimator_report, read_laps, run_dirs, summarize, AnalyzeError, ColumnMap,
    EstimatorReport, SectorStats, Stats, Summary,
};
pub use config::{Arena, ConfigError, MocapNoise, Mode, RaceConfig, Rates};
pub use gatepass::{detect_gate_pass, GateCrossing};
pub use output::{
    LapRow, SectorRow, ESTIMATE_LOG, EVENTS_FILE, LAPS_FILE, SECTORS_FILE, SOLVES_FILE,
    SUMMARY_FILE, TRUTH_LOG,
};
pub use race::{
    run_config, run_race, Course, Event, EventKind, LapRecord, ModuleError, Outcome, RaceError,
    RaceResult, RunLogs, Sector, TruthRow, COVARIANCE_FLOOR,
};
