use std::path::{Path, PathBuf};

use gaterace::harness::{
    analyze_dir, estimator_report, run_race, ColumnMap, Course, MocapNoise, Mode, Outcome,
    RaceConfig, ESTIMATE_LOG, EVENTS_FILE, LAPS_FILE, SECTORS_FILE, SOLVES_FILE, SUMMARY_FILE,
    TRUTH_LOG,
};

fn config() -> RaceConfig {
    let path: PathBuf = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/race.json");
    RaceConfig::load(path).unwrap()
}

fn quiet_mocap(laps: usize) -> RaceConfig {
    RaceConfig {
        mode: Mode::Mocap,
        laps,
        mocap: MocapNoise {
            sigma_p: 0.0,
            sigma_v: 0.0,
            sigma_att: 0.0,
        },
        ..config()
    }
}

#[test]
fn noiseless_mocap_laps_are_clean_and_repeatable() {
    let cfg = quiet_mocap(3);
    let r = run_race(&cfg, &Course::prepare(&cfg).unwrap()).unwrap();
    assert_eq!(r.outcome, Outcome::Finished);
    assert_eq!(r.crashes(), 0);
    assert_eq!(r.gate_misses(), 0);
    let times: Vec<f64> = r.completed_laps().map(|l| l.lap_time).collect();
    assert_eq!(times.len(), 3);
    let spread = times.iter().cloned().fold(f64::MIN, f64::max)
        - times.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread < 0.05, "{times:?}");
}

#[test]
fn path_length_is_bounded_and_converges_with_tick_rate() {
    let cfg = quiet_mocap(1);
    let course = Course::prepare(&cfg).unwrap();
    let coarse = run_race(&cfg, &course).unwrap();
    let mut fine_cfg = cfg.clone();
    fine_cfg.rates.physics = 2000.0;
    let fine = run_race(&fine_cfg, &course).unwrap();

    let lap = |r: &gaterace::harness::RaceResult| r.completed_laps().next().unwrap().path_length;
    let gates = &course.map.gates;
    let chord: f64 = (0..gates.len())
        .map(|i| (gates[(i + 1) % gates.len()].center - gates[i].center).norm())
        .sum();
    assert!(lap(&coarse) >= chord, "{} < {chord}", lap(&coarse));
    let rel = (lap(&fine) - lap(&coarse)).abs() / lap(&coarse);
    assert!(
        rel < 1e-3,
        "path length moved {rel:.2e} on halving the tick"
    );
}

#[test]
fn ablation_at_higher_random_walk_fails_early() {
    let mut cfg = RaceConfig {
        mode: Mode::AblateKf,
        laps: 3,
        seed: 4,
        ..config()
    };
    cfg.vio.sigma_rw = 0.05;
    let r = run_race(&cfg, &Course::prepare(&cfg).unwrap()).unwrap();
    assert!(r.crashes() > 0 || r.gate_misses() > 0, "{:?}", r.outcome);
}

#[test]
fn outputs_round_trip_through_analyze() {
    let cfg = RaceConfig {
        mode: Mode::Vio,
        laps: 2,
        seed: 9,
        ..config()
    };
    let r = run_race(&cfg, &Course::prepare(&cfg).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    r.write_outputs(dir.path()).unwrap();
    for f in [
        LAPS_FILE,
        SECTORS_FILE,
        TRUTH_LOG,
        ESTIMATE_LOG,
        EVENTS_FILE,
        SOLVES_FILE,
        SUMMARY_FILE,
    ] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let s = analyze_dir(dir.path(), &ColumnMap::default()).unwrap();
    assert_eq!(s.laps, 2);
    let mean = r.completed_laps().map(|l| l.lap_time).sum::<f64>() / 2.0;
    assert!((s.lap_time.mean - mean).abs() < 1e-9);

    let direct = estimator_report(&r.logs.truth, &r.logs.estimate).unwrap();
    let from_disk = s.estimator.unwrap();
    assert_eq!(direct.samples, from_disk.samples);
    for axis in 0..3 {
        assert!(direct.rmse[axis] <= direct.max_abs[axis]);
        assert!((direct.rmse[axis] - from_disk.rmse[axis]).abs() < 1e-9);
    }
}
