//! Lap statistics over one or more run directories.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::output::{LapRow, SectorRow, ESTIMATE_LOG, LAPS_FILE, SECTORS_FILE, TRUTH_LOG};
use super::race::TruthRow;
use crate::log::StateRow;

#[derive(Debug, thiserror::Error)]
pub enum AnalyzeError {
    #[error("i/o error on {path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("{path}: {msg}")]
    Csv { path: PathBuf, msg: String },
    #[error("{path}: missing column '{column}'")]
    MissingColumn { path: PathBuf, column: String },
    #[error("no completed laps")]
    NoLaps,
}

/// Count, mean, population standard deviation and range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Some(Self {
            n,
            mean,
            std: var.sqrt(),
            min,
            max,
        })
    }
}

/// Maps lap-table fields to column names, so logs from other tools can be
/// analyzed. Unmapped optional fields are skipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub laps_file: String,
    pub lap: String,
    pub lap_time: String,
    pub top_speed: Option<String>,
    pub path_length: Option<String>,
    pub gate_misses: Option<String>,
    pub crash: Option<String>,
    pub completed: Option<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            laps_file: LAPS_FILE.into(),
            lap: "lap".into(),
            lap_time: "lap_time".into(),
            top_speed: Some("top_speed".into()),
            path_length: Some("path_length".into()),
            gate_misses: Some("gate_misses".into()),
            crash: Some("crash".into()),
            completed: Some("completed".into()),
        }
    }
}

impl ColumnMap {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, AnalyzeError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| AnalyzeError::Io {
            path: path.into(),
            msg: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| AnalyzeError::Csv {
            path: path.into(),
            msg: e.to_string(),
        })
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" | "" => Some(false),
        _ => None,
    }
}

/// Reads a lap table through a column map.
pub fn read_laps(path: &Path, map: &ColumnMap) -> Result<Vec<LapRow>, AnalyzeError> {
    let csv_err = |msg: String| AnalyzeError::Csv {
        path: path.into(),
        msg,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| AnalyzeError::Io {
        path: path.into(),
        msg: e.to_string(),
    })?;
    let headers = rdr.headers().map_err(|e| csv_err(e.to_string()))?.clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let required = |name: &str| {
        find(name).ok_or_else(|| AnalyzeError::MissingColumn {
            path: path.into(),
            column: name.into(),
        })
    };
    let optional = |name: &Option<String>| -> Result<Option<usize>, AnalyzeError> {
        name.as_deref().map(required).transpose()
    };
    let lap_col = required(&map.lap)?;
    let time_col = required(&map.lap_time)?;
    let speed_col = optional(&map.top_speed)?;
    let path_col = optional(&map.path_length)?;
    let miss_col = optional(&map.gate_misses)?;
    let crash_col = optional(&map.crash)?;
    let done_col = optional(&map.completed)?;

    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(e.to_string()))?;
        let field = |c: usize| rec.get(c).unwrap_or("").trim();
        let num = |c: usize| -> Result<f64, AnalyzeError> {
            field(c)
                .parse::<f64>()
                .map_err(|_| csv_err(format!("row {}: '{}' is not a number", i + 1, field(c))))
        };
        let flag = |c: usize| {
            parse_bool(field(c))
                .ok_or_else(|| csv_err(format!("row {}: '{}' is not a boolean", i + 1, field(c))))
        };
        rows.push(LapRow {
            lap: num(lap_col)? as usize,
            completed: done_col.map(flag).transpose()?.unwrap_or(true),
            lap_time: num(time_col)?,
            top_speed: speed_col.map(num).transpose()?.unwrap_or(f64::NAN),
            path_length: path_col.map(num).transpose()?.unwrap_or(f64::NAN),
            gate_misses: miss_col.map(num).transpose()?.unwrap_or(0.0) as u32,
            crash: crash_col.map(flag).transpose()?.unwrap_or(false),
        });
    }
    Ok(rows)
}

/// Per-sector time distribution keyed by the gates bounding the sector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectorStats {
    pub from_gate: u32,
    pub to_gate: u32,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Estimator error against truth at common timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorReport {
    pub samples: usize,
    /// Per-axis position RMSE, m.
    pub rmse: [f64; 3],
    /// Per-axis largest absolute position error, m.
    pub max_abs: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub runs: usize,
    /// Completed timed laps.
    pub laps: usize,
    pub laps_per_run: f64,
    pub crashes: usize,
    pub gate_misses: u32,
    pub lap_time: Stats,
    pub top_speed: Option<Stats>,
    pub path_length: Option<Stats>,
    pub sectors: Vec<SectorStats>,
    pub estimator: Option<EstimatorReport>,
}

/// Statistics over the lap tables of `runs` runs. Only completed timed laps
/// (index ≥ 1) enter the averages; crashes and misses count every row.
pub fn summarize(
    laps: &[LapRow],
    runs: usize,
    sectors: &[SectorRow],
) -> Result<Summary, AnalyzeError> {
    let done: Vec<&LapRow> = laps.iter().filter(|l| l.completed && l.lap > 0).collect();
    let times: Vec<f64> = done.iter().map(|l| l.lap_time).collect();
    let lap_time = Stats::of(&times).ok_or(AnalyzeError::NoLaps)?;
    let finite = |f: fn(&LapRow) -> f64| {
        let v: Vec<f64> = done.iter().map(|l| f(l)).collect();
        if v.iter().all(|x| x.is_finite()) {
            Stats::of(&v)
        } else {
            None
        }
    };
    let mut grouped: BTreeMap<(u32, u32), Vec<f64>> = BTreeMap::new();
    let timed: std::collections::BTreeSet<usize> = done.iter().map(|l| l.lap).collect();
    for s in sectors.iter().filter(|s| timed.contains(&s.lap)) {
        grouped
            .entry((s.from_gate, s.to_gate))
            .or_default()
            .push(s.time);
    }
    let mut sector_stats: Vec<SectorStats> = grouped
        .into_iter()
        .filter_map(|((from_gate, to_gate), v)| {
            Stats::of(&v).map(|s| SectorStats {
                from_gate,
                to_gate,
                n: s.n,
                mean: s.mean,
                std: s.std,
                min: s.min,
                max: s.max,
            })
        })
        .collect();
    // Race order: by first appearance in the sector table.
    let order: Vec<(u32, u32)> = sectors.iter().map(|s| (s.from_gate, s.to_gate)).collect();
    sector_stats.sort_by_key(|s| {
        order
            .iter()
            .position(|k| *k == (s.from_gate, s.to_gate))
            .unwrap_or(usize::MAX)
    });
    let runs = runs.max(1);
    Ok(Summary {
        runs,
        laps: done.len(),
        laps_per_run: done.len() as f64 / runs as f64,
        crashes: laps.iter().filter(|l| l.crash).count(),
        gate_misses: laps.iter().map(|l| l.gate_misses).sum(),
        lap_time,
        top_speed: finite(|l| l.top_speed),
        path_length: finite(|l| l.path_length),
        sectors: sector_stats,
        estimator: None,
    })
}

/// Pairs estimate and truth rows with identical timestamps.
pub fn estimator_report(truth: &[TruthRow], estimate: &[StateRow]) -> Option<EstimatorReport> {
    let key = |t: f64| (t * 1e6).round() as i64;
    let est: HashMap<i64, &StateRow> = estimate.iter().map(|r| (key(r.t), r)).collect();
    let mut sq = [0.0; 3];
    let mut max_abs = [0.0f64; 3];
    let mut n = 0usize;
    for tr in truth {
        let Some(e) = est.get(&key(tr.t)) else {
            continue;
        };
        let d = [e.px - tr.px, e.py - tr.py, e.pz - tr.pz];
        for i in 0..3 {
            sq[i] += d[i] * d[i];
            max_abs[i] = max_abs[i].max(d[i].abs());
        }
        n += 1;
    }
    (n > 0).then(|| EstimatorReport {
        samples: n,
        rmse: sq.map(|s| (s / n as f64).sqrt()),
        max_abs,
    })
}

fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, AnalyzeError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| AnalyzeError::Io {
        path: path.into(),
        msg: e.to_string(),
    })?;
    rdr.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| AnalyzeError::Csv {
            path: path.into(),
            msg: e.to_string(),
        })
}

/// Run directories under `dir`: `dir` itself when it holds a lap table,
/// otherwise each immediate subdirectory that does, in name order.
pub fn run_dirs(dir: &Path, map: &ColumnMap) -> Result<Vec<PathBuf>, AnalyzeError> {
    if dir.join(&map.laps_file).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let entries = std::fs::read_dir(dir).map_err(|e| AnalyzeError::Io {
        path: dir.into(),
        msg: e.to_string(),
    })?;
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(&map.laps_file).is_file())
        .collect();
    out.sort();
    Ok(out)
}

/// Analyzes every run under `dir`.
pub fn analyze_dir(dir: &Path, map: &ColumnMap) -> Result<Summary, AnalyzeError> {
    let runs = run_dirs(dir, map)?;
    if runs.is_empty() {
        return Err(AnalyzeError::NoLaps);
    }
    let mut laps = Vec::new();
    let mut sectors = Vec::new();
    for run in &runs {
        // Keep lap indices distinct across runs so sectors stay with their lap.
        let offset = laps
            .iter()
            .map(|l: &LapRow| l.lap)
            .max()
            .map_or(0, |m| m + 1);
        let run_laps = read_laps(&run.join(&map.laps_file), map)?;
        let sector_path = run.join(SECTORS_FILE);
        let run_sectors: Vec<SectorRow> = if sector_path.is_file() {
            read_rows(&sector_path)?
        } else {
            Vec::new()
        };
        let shift = |lap: usize| if lap == 0 { 0 } else { lap + offset };
        laps.extend(run_laps.into_iter().map(|l| LapRow {
            lap: shift(l.lap),
            ..l
        }));
        sectors.extend(run_sectors.into_iter().map(|s| SectorRow {
            lap: shift(s.lap),
            ..s
        }));
    }
    let mut summary = summarize(&laps, runs.len(), &sectors)?;
    if runs.len() == 1 {
        let (tp, ep) = (runs[0].join(TRUTH_LOG), runs[0].join(ESTIMATE_LOG));
        if tp.is_file() && ep.is_file() {
            summary.estimator = estimator_report(&read_rows(&tp)?, &read_rows(&ep)?);
        }
    }
    Ok(summary)
}

impl Summary {
    pub fn write_sector_csv(&self, path: &Path) -> Result<(), AnalyzeError> {
        let io = |e: csv::Error| AnalyzeError::Io {
            path: path.into(),
            msg: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        for s in &self.sectors {
            w.serialize(s).map_err(io)?;
        }
        w.flush().map_err(|e| AnalyzeError::Io {
            path: path.into(),
            msg: e.to_string(),
        })
    }
}

fn stats_line(
    f: &mut fmt::Formatter<'_>,
    name: &str,
    unit: &str,
    s: &Option<Stats>,
) -> fmt::Result {
    match s {
        Some(s) => writeln!(
            f,
            "{name:<14}{:>10.3}{:>10.3}{:>10.3}{:>10.3}  {unit}",
            s.mean, s.std, s.min, s.max
        ),
        None => writeln!(
            f,
            "{name:<14}{:>10}{:>10}{:>10}{:>10}  {unit}",
            "-", "-", "-", "-"
        ),
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "runs {}  laps {}  laps/run {:.2}  crashes {}  gate misses {}",
            self.runs, self.laps, self.laps_per_run, self.crashes, self.gate_misses
        )?;
        writeln!(f)?;
        writeln!(
            f,
            "{:<14}{:>10}{:>10}{:>10}{:>10}",
            "", "avg", "std", "min", "max"
        )?;
        stats_line(f, "lap time", "s", &Some(self.lap_time))?;
        stats_line(f, "top speed", "m/s", &self.top_speed)?;
        stats_line(f, "path length", "m", &self.path_length)?;
        if !self.sectors.is_empty() {
            writeln!(f)?;
            writeln!(
                f,
                "{:<14}{:>10}{:>10}{:>10}{:>10}",
                "sector", "avg", "std", "min", "max"
            )?;
            for s in &self.sectors {
                let name = format!("{} -> {}", s.from_gate, s.to_gate);
                writeln!(
                    f,
                    "{name:<14}{:>10.3}{:>10.3}{:>10.3}{:>10.3}  s",
                    s.mean, s.std, s.min, s.max
                )?;
            }
        }
        if let Some(e) = &self.estimator {
            writeln!(f)?;
            writeln!(f, "estimator vs truth ({} samples)", e.samples)?;
            writeln!(f, "{:<14}{:>10}{:>10}{:>10}", "", "x", "y", "z")?;
            writeln!(
                f,
                "{:<14}{:>10.4}{:>10.4}{:>10.4}  m",
                "rmse", e.rmse[0], e.rmse[1], e.rmse[2]
            )?;
            writeln!(
                f,
                "{:<14}{:>10.4}{:>10.4}{:>10.4}  m",
                "max", e.max_abs[0], e.max_abs[1], e.max_abs[2]
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lap(lap: usize, t: f64) -> LapRow {
        LapRow {
            lap,
            completed: true,
            lap_time: t,
            top_speed: 10.0,
            path_length: 40.0,
            gate_misses: 0,
            crash: false,
        }
    }

    #[test]
    fn single_lap_has_zero_spread() {
        let s = summarize(&[lap(1, 5.2)], 1, &[]).unwrap();
        assert_eq!(s.lap_time.std, 0.0);
        assert_eq!(s.lap_time.mean, 5.2);
        assert_eq!(s.lap_time.min, s.lap_time.max);
    }

    #[test]
    fn two_laps_population_std() {
        let s = summarize(&[lap(1, 5.0), lap(2, 6.0)], 1, &[]).unwrap();
        assert_eq!(s.lap_time.mean, 5.5);
        assert_eq!(s.lap_time.std, 0.5);
        assert_eq!(s.laps, 2);
    }

    #[test]
    fn out_lap_and_crashes_excluded_from_times() {
        let mut crashed = lap(3, 2.0);
        crashed.completed = false;
        crashed.crash = true;
        let s = summarize(&[lap(0, 9.0), lap(1, 5.0), crashed], 1, &[]).unwrap();
        assert_eq!(s.laps, 1);
        assert_eq!(s.crashes, 1);
        assert!(matches!(
            summarize(&[lap(0, 9.0)], 1, &[]),
            Err(AnalyzeError::NoLaps)
        ));
    }
}
