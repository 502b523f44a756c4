use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::ControllerConfig;
use crate::drift::DriftKfConfig;
use crate::ekf::EkfConfig;
use crate::quad::QuadParams;
use crate::sensors::{
    DriftModel, ImuNoise, LatencyModel, CAMERA_RATE_HZ, IMU_RATE_HZ, VIO_RATE_HZ,
};
use crate::trajectory::DEFAULT_TWR;
use crate::vision::{CameraRig, DetectionConfig, PnpConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Drift-corrected VIO fused with the IMU.
    #[default]
    Vio,
    /// Motion-capture poses straight to the controller.
    Mocap,
    /// VIO fused with the IMU, without drift correction.
    AblateKf,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vio" => Ok(Self::Vio),
            "mocap" => Ok(Self::Mocap),
            "ablate-kf" => Ok(Self::AblateKf),
            other => Err(format!(
                "unknown mode '{other}' (expected vio, mocap or ablate-kf)"
            )),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Vio => "vio",
            Self::Mocap => "mocap",
            Self::AblateKf => "ablate-kf",
        })
    }
}

/// Event rates, Hz. Slower streams fire on the physics tick where
/// `floor(n · rate / physics)` increments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Rates {
    pub physics: f64,
    pub imu: f64,
    pub vio: f64,
    pub camera: f64,
    pub control: f64,
    pub mocap: f64,
}

impl Default for Rates {
    fn default() -> Self {
        Self {
            physics: 1000.0,
            imu: IMU_RATE_HZ,
            vio: VIO_RATE_HZ,
            camera: CAMERA_RATE_HZ,
            control: 100.0,
            mocap: 275.0,
        }
    }
}

impl Rates {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.physics >= 500.0 && self.physics.is_finite()) {
            return Err(ConfigError::Invalid(format!(
                "physics rate {} Hz must be at least 500 Hz",
                self.physics
            )));
        }
        for (name, r) in [
            ("imu", self.imu),
            ("vio", self.vio),
            ("camera", self.camera),
            ("control", self.control),
            ("mocap", self.mocap),
        ] {
            if !(r > 0.0 && r <= self.physics) {
                return Err(ConfigError::Invalid(format!(
                    "{name} rate {r} Hz must be in (0, physics rate]"
                )));
            }
        }
        Ok(())
    }
}

/// Axis-aligned flight volume, m.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Arena {
    pub min: [f64; 3],
    pub max: [f64; 3],
    /// Height below which the vehicle counts as on the floor, m.
    pub floor: f64,
}

impl Default for Arena {
    fn default() -> Self {
        Self {
            min: [-12.5, -4.85, 0.0],
            max: [12.5, 4.85, 7.0],
            floor: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MocapNoise {
    /// m
    pub sigma_p: f64,
    /// m/s
    pub sigma_v: f64,
    /// rad
    pub sigma_att: f64,
}

impl Default for MocapNoise {
    fn default() -> Self {
        Self {
            sigma_p: 0.001,
            sigma_v: 0.01,
            sigma_att: 0.001,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RaceConfig {
    /// Gate map; relative paths resolve against the config file.
    pub track: PathBuf,
    /// Reference CSV. When absent the reference is generated from the track.
    pub trajectory: Option<PathBuf>,
    pub seed: u64,
    pub laps: usize,
    pub mode: Mode,
    /// Thrust-to-weight cap for generation and loading.
    pub twr: f64,
    /// Command transport delay from controller to vehicle, s.
    pub command_delay: f64,
    /// Per-lap time limit, s.
    pub lap_timeout: f64,
    /// Monte-Carlo samples per measurement covariance.
    pub covariance_samples: usize,
    /// Bin size of the measurement covariance cache, m.
    pub covariance_bin: f64,
    /// Largest bearing mismatch accepted when associating a detection, deg.
    pub max_association_deg: f64,
    pub rates: Rates,
    pub arena: Arena,
    pub quad: QuadParams,
    pub imu: ImuNoise,
    pub vio: DriftModel,
    pub camera: CameraRig,
    pub detection: DetectionConfig,
    pub latency: LatencyModel,
    pub pnp: PnpConfig,
    pub drift_kf: DriftKfConfig,
    pub ekf: EkfConfig,
    pub controller: ControllerConfig,
    pub mocap: MocapNoise,
    /// Write solver wall-clock times to the logs. Breaks byte-identical reruns.
    pub log_solve_time: bool,
}

impl Default for RaceConfig {
    fn default() -> Self {
        Self {
            track: PathBuf::from("tracks/ratm.json"),
            trajectory: None,
            seed: 0,
            laps: 10,
            mode: Mode::Vio,
            twr: DEFAULT_TWR,
            command_delay: 0.03,
            lap_timeout: 120.0,
            covariance_samples: 100,
            covariance_bin: 0.5,
            max_association_deg: 30.0,
            rates: Rates::default(),
            arena: Arena::default(),
            quad: QuadParams::default(),
            imu: ImuNoise::default(),
            vio: DriftModel::default(),
            camera: CameraRig::default(),
            detection: DetectionConfig::default(),
            latency: LatencyModel::default(),
            pnp: PnpConfig::default(),
            drift_kf: DriftKfConfig::default(),
            ekf: EkfConfig::default(),
            controller: ControllerConfig::default(),
            mocap: MocapNoise::default(),
            log_solve_time: false,
        }
    }
}

impl RaceConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        self.rates.validate()?;
        if self.laps == 0 {
            return invalid("laps must be at least 1".into());
        }
        if !(self.twr > 1.0) {
            return invalid(format!("thrust-to-weight cap {} cannot hover", self.twr));
        }
        if !(self.command_delay >= 0.0 && self.command_delay < 1.0) {
            return invalid(format!(
                "command delay {} s outside [0, 1)",
                self.command_delay
            ));
        }
        if !(self.lap_timeout > 0.0) {
            return invalid("lap timeout must be positive".into());
        }
        if self.covariance_samples < 30 {
            return invalid(format!(
                "need at least 30 covariance samples, got {}",
                self.covariance_samples
            ));
        }
        if !(self.covariance_bin > 0.0) {
            return invalid("covariance bin must be positive".into());
        }
        if (0..3).any(|i| !(self.arena.min[i] < self.arena.max[i])) {
            return invalid("arena min must be below max on every axis".into());
        }
        self.quad
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.drift_kf
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.ekf
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.controller
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.rates.physics.recip() > 0.002 + 1e-12 {
            return invalid("physics step exceeds 2 ms".into());
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config and resolves its file references against the config's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_json_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.track = base.join(&cfg.track);
        cfg.trajectory = cfg.trajectory.map(|t| base.join(t));
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
