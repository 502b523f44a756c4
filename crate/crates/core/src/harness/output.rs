//! Run directory layout and CSV schemas.
//!
//! | file | one row per |
//! |---|---|
//! | `laps.csv` | lap, including the out-lap (0) and an unfinished last lap |
//! | `sectors.csv` | gate-to-gate segment |
//! | `state_log.csv` | control tick: true `t,q,p,v` and the command in effect |
//! | `est_log.csv` | estimator output: `t,q,p,v` |
//! | `events.csv` | gate pass, miss, lap boundary, crash, rejection |
//! | `summary.txt` | human-readable statistics |

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::analyze::summarize;
use super::race::{RaceError, RaceResult};

pub const LAPS_FILE: &str = "laps.csv";
pub const SECTORS_FILE: &str = "sectors.csv";
pub const TRUTH_LOG: &str = "state_log.csv";
pub const ESTIMATE_LOG: &str = "est_log.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const SOLVES_FILE: &str = "solves.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LapRow {
    pub lap: usize,
    pub completed: bool,
    pub lap_time: f64,
    pub top_speed: f64,
    pub path_length: f64,
    pub gate_misses: u32,
    pub crash: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectorRow {
    pub lap: usize,
    pub sector: usize,
    pub from_gate: u32,
    pub to_gate: u32,
    pub time: f64,
}

impl RaceResult {
    pub fn lap_rows(&self) -> Vec<LapRow> {
        self.laps
            .iter()
            .map(|l| LapRow {
                lap: l.lap,
                completed: l.completed,
                lap_time: l.lap_time,
                top_speed: l.top_speed,
                path_length: l.path_length,
                gate_misses: l.gate_misses,
                crash: l.crash,
            })
            .collect()
    }

    pub fn sector_rows(&self) -> Vec<SectorRow> {
        self.laps
            .iter()
            .flat_map(|l| {
                l.sectors.iter().enumerate().map(move |(i, s)| SectorRow {
                    lap: l.lap,
                    sector: i + 1,
                    from_gate: s.from_gate,
                    to_gate: s.to_gate,
                    time: s.time,
                })
            })
            .collect()
    }

    /// Human-readable run summary.
    pub fn summary_text(&self) -> String {
        let mut out = format!(
            "mode {}  seed {}  outcome {:?}  end {:.3} s\n",
            self.mode, self.seed, self.outcome, self.end_time
        );
        out += &format!("tracking rmse {:.4} m\n\n", self.tracking_rmse);
        match summarize(&self.lap_rows(), 1, &self.sector_rows()) {
            Ok(s) => out += &s.to_string(),
            Err(e) => out += &format!("{e}\n"),
        }
        out
    }

    /// Writes every log into `dir`, creating it if needed.
    pub fn write_outputs(&self, dir: &Path) -> Result<(), RaceError> {
        let io = |e: &dyn std::fmt::Display| RaceError::Io(e.to_string());
        std::fs::create_dir_all(dir).map_err(|e| io(&e))?;
        fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), RaceError> {
            let mut w = csv::Writer::from_path(path)
                .map_err(|e| RaceError::Io(format!("{}: {e}", path.display())))?;
            for r in rows {
                w.serialize(r).map_err(|e| RaceError::Io(e.to_string()))?;
            }
            w.flush().map_err(|e| RaceError::Io(e.to_string()))
        }
        write_csv(&dir.join(LAPS_FILE), &self.lap_rows())?;
        write_csv(&dir.join(SECTORS_FILE), &self.sector_rows())?;
        write_csv(&dir.join(TRUTH_LOG), &self.logs.truth)?;
        write_csv(&dir.join(ESTIMATE_LOG), &self.logs.estimate)?;
        write_csv(&dir.join(EVENTS_FILE), &self.logs.events)?;
        write_csv(&dir.join(SOLVES_FILE), &self.logs.solves)?;
        std::fs::write(dir.join(SUMMARY_FILE), self.summary_text()).map_err(|e| io(&e))
    }
}
