use std::collections::{BTreeSet, HashMap, VecDeque};

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::{ConfigError, Mode, RaceConfig};
use super::gatepass::{detect_gate_pass, GateCrossing};
use crate::controller::{
    predict_delay, CommandBuffer, ControlError, KinematicState, Mpc, SolveRecord,
};
use crate::drift::{yaw_consistent, DriftError, DriftKf, DriftObservation};
use crate::ekf::{propagate_imu, update_pose, EkfError, NavState, PoseMeasurement};
use crate::geom::{so3_exp, yaw_of, Pose};
use crate::log::StateRow;
use crate::quad::{step, CtbrCommand, SimError, TrueState};
use crate::sensors::{sample_imu, sample_vio, ImuBiases, VioDrift, VioSample};
use crate::trajectory::{
    generate_race, load_trajectory_with_twr, GenConfig, ReferenceTrajectory, TrajectoryError,
};
use crate::vision::{
    associate, detect_gates, estimate_position_covariance, solve_pnp, CornerDetection, GateMap,
    MapError,
};

/// Floor added to every Monte-Carlo measurement covariance, m².
pub const COVARIANCE_FLOOR: f64 = 1e-6;
/// Extra simulated time allowed past the end of the reference, s.
const REFERENCE_GRACE: f64 = 5.0;

#[derive(Debug, thiserror::Error)]
pub enum ModuleError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Ekf(#[from] EkfError),
    #[error(transparent)]
    Drift(#[from] DriftError),
    #[error(transparent)]
    Control(#[from] ControlError),
}

#[derive(Debug, thiserror::Error)]
pub enum RaceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("track: {0}")]
    Map(#[from] MapError),
    #[error("reference: {0}")]
    Trajectory(#[from] TrajectoryError),
    #[error("lap {lap}, t = {t:.3} s: {source}")]
    Module {
        lap: usize,
        t: f64,
        source: ModuleError,
    },
    #[error("cannot write logs: {0}")]
    Io(String),
}

/// One gate-to-gate segment of a lap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sector {
    pub from_gate: u32,
    pub to_gate: u32,
    /// s
    pub time: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LapRecord {
    /// 1-based; 0 is the untimed out-lap from the start.
    pub lap: usize,
    /// s. For an unfinished lap, the time flown before it ended.
    pub lap_time: f64,
    pub sectors: Vec<Sector>,
    /// m/s
    pub top_speed: f64,
    /// m
    pub path_length: f64,
    pub gate_misses: u32,
    pub crash: bool,
    pub completed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Start,
    Pass,
    /// Crossed the gate frame outside the opening.
    Miss,
    /// Passed a later gate without passing the expected one.
    Skip,
    LapStart,
    LapComplete,
    Crash,
    Timeout,
    Finish,
    MeasurementRejected,
    Reacquired,
    SolverFallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub kind: EventKind,
    pub lap: usize,
    pub gate: Option<u32>,
    pub detail: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Finished,
    Crashed,
    TimedOut,
}

/// True state and the command in effect, one row per control tick.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub t: f64,
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub px: f64,
    pub py: f64,
    pub pz: f64,
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
    /// N
    pub thrust: f64,
    pub wx: f64,
    pub wy: f64,
    pub wz: f64,
}

impl TruthRow {
    fn new(s: &TrueState, cmd: &CtbrCommand) -> Self {
        let r = StateRow::new(s.t, &s.q, &s.p, &s.v);
        Self {
            t: r.t,
            qw: r.qw,
            qx: r.qx,
            qy: r.qy,
            qz: r.qz,
            px: r.px,
            py: r.py,
            pz: r.pz,
            vx: r.vx,
            vy: r.vy,
            vz: r.vz,
            thrust: cmd.thrust,
            wx: cmd.rates.x,
            wy: cmd.rates.y,
            wz: cmd.rates.z,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLogs {
    pub truth: Vec<TruthRow>,
    /// Controller-side estimate: EKF output per IMU tick, or motion-capture
    /// samples in MoCap mode.
    pub estimate: Vec<StateRow>,
    pub events: Vec<Event>,
    pub solves: Vec<SolveRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RaceResult {
    pub mode: Mode,
    pub seed: u64,
    pub outcome: Outcome,
    /// Every lap started, including the out-lap and an unfinished final lap.
    pub laps: Vec<LapRecord>,
    pub logs: RunLogs,
    /// RMS of true position minus reference position over control ticks, m.
    pub tracking_rmse: f64,
    pub end_time: f64,
}

impl RaceResult {
    pub fn completed_laps(&self) -> impl Iterator<Item = &LapRecord> {
        self.laps.iter().filter(|l| l.completed && l.lap > 0)
    }

    pub fn crashes(&self) -> usize {
        self.laps.iter().filter(|l| l.crash).count()
    }

    pub fn gate_misses(&self) -> u32 {
        self.laps.iter().map(|l| l.gate_misses).sum()
    }
}

/// Track and reference shared by every run of one configuration.
#[derive(Clone, Debug)]
pub struct Course {
    pub map: GateMap,
    pub reference: ReferenceTrajectory,
    pub start: Vector3<f64>,
    pub start_yaw: f64,
}

impl Course {
    /// Loads the track and either loads or generates the reference.
    pub fn prepare(cfg: &RaceConfig) -> Result<Self, RaceError> {
        cfg.validate()?;
        let map = GateMap::load(&cfg.track)?;
        match &cfg.trajectory {
            Some(path) => {
                let reference = load_trajectory_with_twr(path, cfg.twr)?;
                let first = reference.samples[0];
                Ok(Self {
                    map,
                    start: first.p,
                    start_yaw: yaw_of(&first.q),
                    reference,
                })
            }
            None => Self::generate(map, cfg.laps, cfg.twr),
        }
    }

    pub fn generate(map: GateMap, laps: usize, twr: f64) -> Result<Self, RaceError> {
        let gen = GenConfig {
            twr,
            ..GenConfig::default()
        };
        let race = generate_race(&map, &BTreeSet::new(), laps, &gen)?;
        Ok(Self {
            map,
            reference: race.trajectory,
            start: race.start,
            start_yaw: race.start_yaw,
        })
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian3(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    if sigma == 0.0 {
        return Vector3::zeros();
    }
    Vector3::from_fn(|_, _| {
        let n: f64 = StandardNormal.sample(rng);
        sigma * n
    })
}

/// True on the physics tick where a `rate` Hz stream emits.
fn fires(tick: u64, rate: f64, physics: f64) -> bool {
    let count = |n: u64| (n as f64 * rate / physics + 1e-9).floor() as u64;
    tick == 0 || count(tick) != count(tick - 1)
}

struct CameraFrame {
    t_capture: f64,
    t_available: f64,
    vio: VioSample,
    detections: Vec<CornerDetection>,
}

/// Crossing point in the gate plane, `lateral vertical` in m.
fn offset_text(offset: &Vector2<f64>) -> String {
    format!("{:.3} {:.3}", offset.x, offset.y)
}

/// Lap and sector bookkeeping from gate crossings.
struct LapTimer {
    gate_ids: Vec<u32>,
    expected: usize,
    started: bool,
    lap: usize,
    lap_start: f64,
    last_pass: Option<(u32, f64)>,
    current: LapRecord,
    done: Vec<LapRecord>,
}

impl LapTimer {
    fn new(gate_ids: Vec<u32>) -> Self {
        Self {
            gate_ids,
            expected: 0,
            started: false,
            lap: 0,
            lap_start: 0.0,
            last_pass: None,
            current: Self::blank(0),
            done: Vec::new(),
        }
    }

    fn blank(lap: usize) -> LapRecord {
        LapRecord {
            lap,
            lap_time: 0.0,
            sectors: Vec::new(),
            top_speed: 0.0,
            path_length: 0.0,
            gate_misses: 0,
            crash: false,
            completed: false,
        }
    }

    fn completed(&self) -> usize {
        self.done
            .iter()
            .filter(|l| l.lap > 0 && l.completed)
            .count()
    }

    /// Handles a pass through gate index `idx` at `t`. Returns true when the
    /// pass closes a lap.
    fn pass(&mut self, idx: usize, t: f64, offset: Vector2<f64>, events: &mut Vec<Event>) -> bool {
        let id = self.gate_ids[idx];
        let n = self.gate_ids.len();
        if !self.started {
            // Only gate 1 opens the out-lap.
            if idx != 0 {
                return false;
            }
            self.started = true;
            self.lap_start = t;
            self.expected = 1 % n;
            self.last_pass = Some((id, t));
            events.push(Event {
                t,
                kind: EventKind::Pass,
                lap: 0,
                gate: Some(id),
                detail: offset_text(&offset),
            });
            return false;
        }
        if idx != self.expected {
            let skipped = (idx + n - self.expected) % n;
            self.current.gate_misses += skipped as u32;
            for k in 0..skipped {
                let missed = self.gate_ids[(self.expected + k) % n];
                events.push(Event {
                    t,
                    kind: EventKind::Skip,
                    lap: self.lap,
                    gate: Some(missed),
                    detail: String::new(),
                });
            }
        }
        events.push(Event {
            t,
            kind: EventKind::Pass,
            lap: self.lap,
            gate: Some(id),
            detail: offset_text(&offset),
        });
        if let Some((from, t_from)) = self.last_pass {
            self.current.sectors.push(Sector {
                from_gate: from,
                to_gate: id,
                time: t - t_from,
            });
        }
        self.last_pass = Some((id, t));
        self.expected = (idx + 1) % n;
        idx == 0
    }

    fn close_lap(&mut self, t: f64, events: &mut Vec<Event>) {
        let mut rec = std::mem::replace(&mut self.current, Self::blank(self.lap + 1));
        rec.lap_time = t - self.lap_start;
        rec.completed = true;
        if rec.lap > 0 {
            events.push(Event {
                t,
                kind: EventKind::LapComplete,
                lap: rec.lap,
                gate: None,
                detail: format!("{:.4}", rec.lap_time),
            });
        }
        self.done.push(rec);
        self.lap += 1;
        self.lap_start = t;
        events.push(Event {
            t,
            kind: EventKind::LapStart,
            lap: self.lap,
            gate: None,
            detail: String::new(),
        });
    }

    fn abort(&mut self, t: f64, crash: bool) {
        let mut rec = std::mem::replace(&mut self.current, Self::blank(self.lap + 1));
        rec.lap_time = t - self.lap_start;
        rec.crash = crash;
        self.done.push(rec);
    }
}

/// Monte-Carlo measurement covariances, cached per gate and camera position bin.
struct CovarianceCache {
    entries: HashMap<(u32, [i64; 3]), Matrix3<f64>>,
    seed: u64,
    computed: u64,
}

impl CovarianceCache {
    fn get(
        &mut self,
        cfg: &RaceConfig,
        map: &GateMap,
        gate_id: u32,
        world_cam: &Pose,
    ) -> Option<Matrix3<f64>> {
        let gate = map.get(gate_id)?;
        let rel = gate
            .pose()
            .inverse()
            .transform_point(&world_cam.translation)
            / cfg.covariance_bin;
        let key = (
            gate_id,
            [
                rel.x.round() as i64,
                rel.y.round() as i64,
                rel.z.round() as i64,
            ],
        );
        if let Some(r) = self.entries.get(&key) {
            return Some(*r);
        }
        let seed = self
            .seed
            .wrapping_add(self.computed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        self.computed += 1;
        let r = estimate_position_covariance(
            gate,
            world_cam,
            &cfg.camera,
            cfg.detection.sigma_px,
            cfg.covariance_samples,
            seed,
            &cfg.pnp,
        )
        .ok()?
            + Matrix3::identity() * COVARIANCE_FLOOR;
        self.entries.insert(key, r);
        Some(r)
    }
}

/// Runs one race on a prepared course.
pub fn run_race(cfg: &RaceConfig, course: &Course) -> Result<RaceResult, RaceError> {
    cfg.validate()?;
    let physics = cfg.rates.physics;
    let dt = 1.0 / physics;
    let quad = &cfg.quad;
    let map = &course.map;
    let reference = &course.reference;
    let rig = &cfg.camera;
    let hover = CtbrCommand::hover(quad);

    let mut rng_imu = stream_rng(cfg.seed, 1);
    let mut rng_vio = stream_rng(cfg.seed, 2);
    let mut rng_cam = stream_rng(cfg.seed, 3);
    let mut rng_latency = stream_rng(cfg.seed, 4);
    let mut rng_mocap = stream_rng(cfg.seed, 5);
    let mut rng_init = stream_rng(cfg.seed, 6);

    let mut truth = TrueState::hovering(course.start, course.start_yaw, quad);
    let mut biases = ImuBiases::draw(&cfg.imu, &mut rng_init);
    let mut drift = VioDrift::new(&cfg.vio, &mut rng_init);
    let mut drift_kf = DriftKf::new(cfg.drift_kf.clone());
    let mut covariances = CovarianceCache {
        entries: HashMap::new(),
        seed: cfg.seed ^ 0x5EED_C0DE,
        computed: 0,
    };
    let mut frames: VecDeque<CameraFrame> = VecDeque::new();
    let mut ekf: Option<NavState> = None;
    let mut mocap: Option<KinematicState> = None;
    let mut buffer = CommandBuffer::new();
    let mut last_cmd = hover;
    let mut mpc = Mpc::new(cfg.controller.clone()).map_err(|e| RaceError::Module {
        lap: 0,
        t: 0.0,
        source: e.into(),
    })?;
    let max_assoc = cfg.max_association_deg.to_radians();

    let gate_ids: Vec<u32> = map.gates.iter().map(|g| g.id).collect();
    let mut timer = LapTimer::new(gate_ids);
    let mut logs = RunLogs::default();
    logs.events.push(Event {
        t: 0.0,
        kind: EventKind::Start,
        lap: 0,
        gate: None,
        detail: format!("{} seed {}", cfg.mode, cfg.seed),
    });

    let mut sq_err = 0.0;
    let mut err_count = 0usize;
    let t_limit = reference.end_time() + REFERENCE_GRACE;
    let arena = &cfg.arena;
    let vio_mode = cfg.mode != Mode::Mocap;
    let module_err = |lap: usize, t: f64, e: ModuleError| RaceError::Module { lap, t, source: e };

    let mut tick: u64 = 0;
    let outcome = loop {
        let t = tick as f64 / physics;
        let lap = timer.lap;

        // Physics.
        if tick > 0 {
            let t_prev = (tick - 1) as f64 / physics;
            let cmd = *buffer.active_at(t_prev).unwrap_or(&hover);
            let prev = truth;
            truth = step(&truth, &cmd, dt, quad).map_err(|e| module_err(lap, t, e.into()))?;
            truth.t = t;

            let seg = truth.p - prev.p;
            let mut crashed = None;
            let mut lap_split = None;
            for (idx, gate) in map.gates.iter().enumerate() {
                match detect_gate_pass(&prev.p, &truth.p, gate) {
                    GateCrossing::Pass { frac, offset } => {
                        let tc = t_prev + frac * dt;
                        if timer.pass(idx, tc, offset, &mut logs.events) {
                            lap_split = Some((frac, tc));
                        }
                    }
                    GateCrossing::Miss { frac, offset } => {
                        let tc = t_prev + frac * dt;
                        timer.current.gate_misses += 1;
                        logs.events.push(Event {
                            t: tc,
                            kind: EventKind::Miss,
                            lap,
                            gate: Some(gate.id),
                            detail: offset_text(&offset),
                        });
                        crashed = Some(format!("hit gate {} frame", gate.id));
                    }
                    GateCrossing::None => {}
                }
            }
            let speed = truth.v.norm();
            match lap_split {
                Some((frac, tc)) => {
                    timer.current.path_length += frac * seg.norm();
                    timer.current.top_speed = timer.current.top_speed.max(speed);
                    timer.close_lap(tc, &mut logs.events);
                    timer.current.path_length += (1.0 - frac) * seg.norm();
                    timer.current.top_speed = speed;
                }
                None => {
                    timer.current.path_length += seg.norm();
                    timer.current.top_speed = timer.current.top_speed.max(speed);
                }
            }

            if crashed.is_none() {
                let p = truth.p;
                if !truth.is_finite() {
                    crashed = Some("non-finite state".into());
                } else if p.z < arena.floor {
                    crashed = Some(format!("floor contact at z = {:.3}", p.z));
                } else if (0..3).any(|i| p[i] < arena.min[i] || p[i] > arena.max[i]) {
                    crashed = Some(format!(
                        "left arena at ({:.2}, {:.2}, {:.2})",
                        p.x, p.y, p.z
                    ));
                }
            }
            if let Some(why) = crashed {
                logs.events.push(Event {
                    t,
                    kind: EventKind::Crash,
                    lap: timer.lap,
                    gate: None,
                    detail: why,
                });
                timer.abort(t, true);
                break Outcome::Crashed;
            }
            if timer.completed() >= cfg.laps {
                logs.events.push(Event {
                    t,
                    kind: EventKind::Finish,
                    lap: timer.lap,
                    gate: None,
                    detail: String::new(),
                });
                break Outcome::Finished;
            }
            if t - timer.lap_start > cfg.lap_timeout || t > t_limit {
                logs.events.push(Event {
                    t,
                    kind: EventKind::Timeout,
                    lap: timer.lap,
                    gate: None,
                    detail: String::new(),
                });
                timer.abort(t, false);
                break Outcome::TimedOut;
            }
        }
        let lap = timer.lap;

        // Sensors.
        let imu = fires(tick, cfg.rates.imu, physics).then(|| {
            sample_imu(
                &truth,
                &mut biases,
                &cfg.imu,
                1.0 / cfg.rates.imu,
                &mut rng_imu,
            )
        });
        let vio = (vio_mode && fires(tick, cfg.rates.vio, physics))
            .then(|| sample_vio(&truth, &mut drift, &cfg.vio, &mut rng_vio));
        if !vio_mode && fires(tick, cfg.rates.mocap, physics) {
            let m = KinematicState {
                t,
                q: truth.q * so3_exp(&gaussian3(&mut rng_mocap, cfg.mocap.sigma_att)),
                p: truth.p + gaussian3(&mut rng_mocap, cfg.mocap.sigma_p),
                v: truth.v + gaussian3(&mut rng_mocap, cfg.mocap.sigma_v),
            };
            logs.estimate.push(StateRow::new(m.t, &m.q, &m.p, &m.v));
            mocap = Some(m);
        }
        if cfg.mode == Mode::Vio && fires(tick, cfg.rates.camera, physics) {
            let frame_vio = match &vio {
                Some(v) => *v,
                None => sample_vio(&truth, &mut drift, &cfg.vio, &mut rng_vio),
            };
            let cam = rig.camera_pose(&Pose::new(truth.q, truth.p));
            let detections = detect_gates(&cam, map, &rig.intrinsics, &cfg.detection, &mut rng_cam);
            let t_available = t + cfg.latency.sample(&mut rng_latency);
            frames.push_back(CameraFrame {
                t_capture: t,
                t_available,
                vio: frame_vio,
                detections,
            });
        }

        // Vision.
        while frames.front().is_some_and(|f| f.t_available <= t) {
            let frame = frames.pop_front().expect("front exists");
            let corrected = drift_kf.correct_vio(&frame.vio);
            let est_cam = rig.camera_pose(&Pose::new(corrected.q, corrected.p));
            let mut observations = Vec::new();
            for det in &frame.detections {
                let Some(id) = associate(det, &est_cam, map, &rig.intrinsics, max_assoc) else {
                    continue;
                };
                let gate = map.get(id).expect("associated gate exists");
                let det = CornerDetection {
                    gate_id: id,
                    ..det.clone()
                };
                let Ok(meas) = solve_pnp(&det, gate, &rig.intrinsics, &cfg.pnp) else {
                    continue;
                };
                let world_cam = meas.camera_pose_world(gate);
                let body = rig.body_pose(&world_cam);
                if !yaw_consistent(&body, &corrected, cfg.drift_kf.max_yaw_mismatch_deg) {
                    logs.events.push(Event {
                        t,
                        kind: EventKind::MeasurementRejected,
                        lap,
                        gate: Some(id),
                        detail: "heading".into(),
                    });
                    continue;
                }
                if let Some(r) = covariances.get(cfg, map, id, &world_cam) {
                    observations.push(DriftObservation::from_gate(id, &frame.vio, &body, r));
                }
            }
            if observations.is_empty() {
                continue;
            }
            drift_kf
                .propagate_to(frame.t_capture)
                .map_err(|e| module_err(lap, t, e.into()))?;
            let report = drift_kf
                .update(&observations)
                .map_err(|e| module_err(lap, t, e.into()))?;
            for id in &report.rejected {
                logs.events.push(Event {
                    t,
                    kind: EventKind::MeasurementRejected,
                    lap,
                    gate: Some(*id),
                    detail: "gating".into(),
                });
            }
            if report.reacquired {
                logs.events.push(Event {
                    t,
                    kind: EventKind::Reacquired,
                    lap,
                    gate: None,
                    detail: String::new(),
                });
            }
        }

        // Filters.
        if vio_mode {
            if ekf.is_none() {
                if let Some(v) = &vio {
                    ekf = Some(NavState::new(t, v.q, v.p, Vector3::zeros(), &cfg.ekf));
                }
            }
            if let Some(s) = ekf.as_mut() {
                if let Some(imu) = &imu {
                    *s = propagate_imu(s, imu, &cfg.ekf)
                        .map_err(|e| module_err(lap, t, e.into()))?;
                }
                if let Some(v) = &vio {
                    let fix = if cfg.mode == Mode::Vio {
                        drift_kf.correct_vio(v)
                    } else {
                        *v
                    };
                    *s = update_pose(
                        s,
                        &PoseMeasurement {
                            t: fix.t,
                            q: fix.q,
                            p: fix.p,
                        },
                        &cfg.ekf,
                    )
                    .map_err(|e| module_err(lap, t, e.into()))?;
                }
                if imu.is_some() {
                    logs.estimate.push(s.row());
                }
            }
        }

        // Controller.
        if fires(tick, cfg.rates.control, physics) {
            let estimate = match cfg.mode {
                Mode::Mocap => mocap,
                _ => ekf.as_ref().map(|s| KinematicState {
                    t: s.t,
                    q: s.q,
                    p: s.p,
                    v: s.v,
                }),
            };
            if let Some(state) = estimate {
                let ctrl = mpc.config();
                let planned = if ctrl.use_predictor {
                    predict_delay(&state, &buffer, t + ctrl.delay - state.t, ctrl.mass, &hover)
                } else {
                    state
                };
                let started = cfg.log_solve_time.then(std::time::Instant::now);
                let solved = mpc.solve(&planned, reference);
                let solve_us = started.map(|s| s.elapsed().as_secs_f64() * 1e6);
                let cmd = match solved {
                    Ok(sol) => {
                        logs.solves.push(SolveRecord {
                            t,
                            cost: sol.cost,
                            iterations: sol.iterations,
                            solve_us,
                            fallback: false,
                        });
                        sol.command
                    }
                    Err(ControlError::SolverDiverged) => {
                        mpc.reset();
                        logs.events.push(Event {
                            t,
                            kind: EventKind::SolverFallback,
                            lap,
                            gate: None,
                            detail: String::new(),
                        });
                        logs.solves.push(SolveRecord {
                            t,
                            cost: f64::NAN,
                            iterations: 0,
                            solve_us,
                            fallback: true,
                        });
                        last_cmd
                    }
                    Err(e) => return Err(module_err(lap, t, e.into())),
                };
                last_cmd = cmd;
                buffer.push(t + cfg.command_delay, cmd);
                buffer.prune_before(t - 1.0);
            }
            let applied = *buffer.active_at(t).unwrap_or(&hover);
            logs.truth.push(TruthRow::new(&truth, &applied));
            let err = truth.p - reference.sample(t).p;
            sq_err += err.norm_squared();
            err_count += 1;
        }
        tick += 1;
    };

    let end_time = tick as f64 / physics;
    let tracking_rmse = if err_count > 0 {
        (sq_err / err_count as f64).sqrt()
    } else {
        0.0
    };
    Ok(RaceResult {
        mode: cfg.mode,
        seed: cfg.seed,
        outcome,
        laps: timer.done,
        logs,
        tracking_rmse,
        end_time,
    })
}

/// Prepares the course from the config and runs one race.
pub fn run_config(cfg: &RaceConfig) -> Result<RaceResult, RaceError> {
    let course = Course::prepare(cfg)?;
    run_race(cfg, &course)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_schedule_counts() {
        let count = |rate: f64| (0..1000u64).filter(|&n| fires(n, rate, 1000.0)).count();
        assert_eq!(count(500.0), 500);
        assert_eq!(count(200.0), 200);
        assert_eq!(count(100.0), 100);
        // Tick 0 plus the 29 increments inside the first second.
        assert_eq!(count(30.0), 30);
        assert_eq!(count(275.0), 275);
    }

    #[test]
    fn lap_timer_sectors_sum_to_lap() {
        let mut ev = Vec::new();
        let mut timer = LapTimer::new(vec![1, 2, 3]);
        assert!(!timer.pass(0, 0.2, Vector2::zeros(), &mut ev));
        assert!(!timer.pass(1, 1.0, Vector2::zeros(), &mut ev));
        assert!(!timer.pass(2, 2.1, Vector2::zeros(), &mut ev));
        assert!(timer.pass(0, 3.0, Vector2::zeros(), &mut ev));
        timer.close_lap(3.0, &mut ev);
        assert!(!timer.pass(1, 4.2, Vector2::zeros(), &mut ev));
        assert!(!timer.pass(2, 5.0, Vector2::zeros(), &mut ev));
        assert!(timer.pass(0, 6.5, Vector2::zeros(), &mut ev));
        timer.close_lap(6.5, &mut ev);
        let lap1 = &timer.done[1];
        assert_eq!(lap1.lap, 1);
        assert!((lap1.lap_time - 3.5).abs() < 1e-12);
        let total: f64 = lap1.sectors.iter().map(|s| s.time).sum();
        assert!((total - lap1.lap_time).abs() < 1e-12);
        assert_eq!(lap1.sectors.len(), 3);
        assert_eq!(timer.completed(), 1);
    }

    #[test]
    fn skipped_gate_counts_as_miss() {
        let mut ev = Vec::new();
        let mut timer = LapTimer::new(vec![1, 2, 3]);
        timer.pass(0, 0.1, Vector2::zeros(), &mut ev);
        timer.pass(2, 1.0, Vector2::zeros(), &mut ev);
        assert_eq!(timer.current.gate_misses, 1);
        assert!(ev
            .iter()
            .any(|e| e.kind == EventKind::Skip && e.gate == Some(2)));
    }
}
