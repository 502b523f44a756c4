use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rayon::prelude::*;

use gaterace::geom::Pose;
use gaterace::harness::{analyze_dir, run_race, ColumnMap, Course, Mode, RaceConfig};
use gaterace::quad::QuadParams;
use gaterace::trajectory::{generate_race, waypoints_to_json, GenConfig};
use gaterace::vision::{estimate_position_covariance, CameraRig, Gate, GateMap, PnpConfig};

#[derive(Parser)]
#[command(
    name = "gaterace",
    version,
    about = "Closed-loop drone racing simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fly a race and write lap tables and logs.
    Sim(SimArgs),
    /// Generate a feasibility-capped race reference for a track.
    GenTraj(GenTrajArgs),
    /// Monte-Carlo position covariance of a single gate measurement.
    #[command(name = "calib-R")]
    CalibR(CalibArgs),
    /// Summarize lap tables from one run directory or a directory of runs.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct SimArgs {
    /// Race config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Timed laps to fly.
    #[arg(long)]
    laps: Option<usize>,
    /// vio, mocap or ablate-kf.
    #[arg(long)]
    mode: Option<Mode>,
    /// Consecutive seeds to fly, one subdirectory each.
    #[arg(long, default_value_t = 1)]
    runs: u64,
    /// Disable the delay-compensating state predictor.
    #[arg(long)]
    no_predictor: bool,
    /// Record wall-clock MPC solve times in solves.csv (not reproducible).
    #[arg(long)]
    log_solve_time: bool,
    #[command(flatten)]
    quad: QuadOverrides,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Vehicle parameters, applied on top of the config file.
#[derive(Args)]
struct QuadOverrides {
    /// JSON file replacing the config's vehicle block.
    #[arg(long)]
    quad: Option<PathBuf>,
    /// kg
    #[arg(long)]
    mass: Option<f64>,
    /// Vehicle thrust-to-weight ratio.
    #[arg(long)]
    quad_twr: Option<f64>,
    /// s
    #[arg(long)]
    rotor_time_constant: Option<f64>,
    /// rad/s
    #[arg(long)]
    max_rate: Option<f64>,
}

impl QuadOverrides {
    fn apply(&self, quad: &mut QuadParams) -> Result<()> {
        if let Some(path) = &self.quad {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            *quad = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
        }
        if let Some(v) = self.mass {
            quad.mass = v;
        }
        if let Some(v) = self.quad_twr {
            quad.twr = v;
        }
        if let Some(v) = self.rotor_time_constant {
            quad.rotor_time_constant = v;
        }
        if let Some(v) = self.max_rate {
            quad.max_rate = v;
        }
        Ok(())
    }
}

#[derive(Args)]
struct GenTrajArgs {
    #[arg(long)]
    track: PathBuf,
    /// Thrust-to-weight cap for the reference.
    #[arg(long, default_value_t = 3.8)]
    twr: f64,
    #[arg(long, default_value_t = 10)]
    laps: usize,
    /// Gate ids that open a Split-S, in addition to those flagged in the track.
    #[arg(long, value_delimiter = ',')]
    split_s: Vec<u32>,
    /// Also dump the waypoints as JSON.
    #[arg(long)]
    waypoints: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibArgs {
    /// Camera distance in front of the gate, m.
    #[arg(long, default_value_t = 3.0)]
    gate_dist: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_px: f64,
    #[arg(short = 'n', long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Take camera and PnP settings from this race config.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    dir: PathBuf,
    /// Also write the per-sector distribution CSV.
    #[arg(long)]
    sectors: bool,
    /// JSON mapping of lap-table column names, for external logs.
    #[arg(long)]
    columns: Option<PathBuf>,
    /// Output path for the sector CSV.
    #[arg(long)]
    sector_out: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Sim(a) => sim(a),
        Command::GenTraj(a) => gen_traj(a),
        Command::CalibR(a) => calib_r(a),
        Command::Analyze(a) => analyze(a),
    }
}

fn sim(a: SimArgs) -> Result<()> {
    let mut cfg =
        RaceConfig::load(&a.config).with_context(|| format!("loading {}", a.config.display()))?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(laps) = a.laps {
        cfg.laps = laps;
    }
    if let Some(mode) = a.mode {
        cfg.mode = mode;
    }
    if a.no_predictor {
        cfg.controller.use_predictor = false;
    }
    cfg.log_solve_time |= a.log_solve_time;
    a.quad.apply(&mut cfg.quad)?;
    if a.runs == 0 {
        bail!("--runs must be at least 1");
    }
    let course = Course::prepare(&cfg)?;
    if a.runs == 1 {
        return fly(&cfg, &course, &a.out);
    }
    (0..a.runs).into_par_iter().try_for_each(|k| {
        let run_cfg = RaceConfig {
            seed: cfg.seed + k,
            ..cfg.clone()
        };
        fly(
            &run_cfg,
            &course,
            &a.out.join(format!("seed_{}", run_cfg.seed)),
        )
    })
}

fn fly(cfg: &RaceConfig, course: &Course, out: &Path) -> Result<()> {
    let result = run_race(cfg, course)?;
    result.write_outputs(out)?;
    println!("{}", result.summary_text());
    Ok(())
}

fn gen_traj(a: GenTrajArgs) -> Result<()> {
    let map = GateMap::load(&a.track)?;
    let split_s: BTreeSet<u32> = a.split_s.into_iter().collect();
    let cfg = GenConfig {
        twr: a.twr,
        ..GenConfig::default()
    };
    let race = generate_race(&map, &split_s, a.laps, &cfg)?;
    race.trajectory.save(&a.out)?;
    if let Some(path) = &a.waypoints {
        std::fs::write(path, waypoints_to_json(&race.waypoints))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let peak = race.trajectory.peak_thrust_accel() / gaterace::geom::GRAVITY;
    println!(
        "lap {:.3} s  entry {:.3} s  total {:.3} s  peak {:.2} g  -> {}",
        race.lap_duration,
        race.entry_duration,
        race.trajectory.duration(),
        peak,
        a.out.display()
    );
    Ok(())
}

/// Camera `gate_dist` in front of a gate at the origin, looking straight at it.
fn facing_camera(gate: &Gate, dist: f64) -> Pose {
    let n = gate.normal();
    let right = Vector3::z().cross(&n);
    let down = n.cross(&right);
    let rot = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[right, down, n]));
    Pose::new(
        UnitQuaternion::from_rotation_matrix(&rot),
        gate.center - n * dist,
    )
}

fn calib_r(a: CalibArgs) -> Result<()> {
    let (rig, pnp) = match &a.config {
        Some(path) => {
            let cfg = RaceConfig::load(path)?;
            (cfg.camera, cfg.pnp)
        }
        None => (CameraRig::default(), PnpConfig::default()),
    };
    if !(a.gate_dist > 0.0) {
        bail!("--gate-dist must be positive");
    }
    let gate = Gate::new(0, Vector3::zeros(), 0.0);
    let cam = facing_camera(&gate, a.gate_dist);
    let r = estimate_position_covariance(&gate, &cam, &rig, a.sigma_px, a.samples, a.seed, &pnp)?;
    println!(
        "gate distance {:.2} m  sigma {:.2} px  samples {}",
        a.gate_dist, a.sigma_px, a.samples
    );
    println!("position covariance (world frame, m^2):");
    for i in 0..3 {
        println!(
            "  {:>12.4e} {:>12.4e} {:>12.4e}",
            r[(i, 0)],
            r[(i, 1)],
            r[(i, 2)]
        );
    }
    let sd = r.diagonal().map(f64::sqrt);
    println!(
        "std along normal {:.4} m  lateral {:.4} m  vertical {:.4} m",
        sd.x, sd.y, sd.z
    );
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let map = match &a.columns {
        Some(path) => ColumnMap::load(path)?,
        None => ColumnMap::default(),
    };
    let summary = analyze_dir(&a.dir, &map)?;
    print!("{summary}");
    if a.sectors {
        let path = a
            .sector_out
            .unwrap_or_else(|| a.dir.join("sector_times.csv"));
        summary.write_sector_csv(&path)?;
        println!("sector distribution -> {}", path.display());
    }
    Ok(())
}
