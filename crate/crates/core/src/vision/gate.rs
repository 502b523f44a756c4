use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::geom::Pose;

/// Half of the 5 ft inner opening, m.
pub const INNER_HALF_SIZE: f64 = 0.762;
/// Half of the 7 ft outer frame, m.
pub const OUTER_HALF_SIZE: f64 = 1.0668;

fn default_half_size() -> f64 {
    INNER_HALF_SIZE
}

/// A square racing gate. Its frame has x along the race direction through
/// the opening and z up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub id: u32,
    pub center: Vector3<f64>,
    pub yaw_rad: f64,
    /// Half the inner opening, m.
    #[serde(default = "default_half_size")]
    pub half_size: f64,
    /// Marks the gate where a Split-S starts; moves its exit waypoint further out.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub split_s: bool,
}

impl Gate {
    pub fn new(id: u32, center: Vector3<f64>, yaw_rad: f64) -> Self {
        Self {
            id,
            center,
            yaw_rad,
            half_size: INNER_HALF_SIZE,
            split_s: false,
        }
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), self.yaw_rad)
    }

    /// `world ← gate`
    pub fn pose(&self) -> Pose {
        Pose::new(self.rotation(), self.center)
    }

    /// Unit vector along the race direction.
    pub fn normal(&self) -> Vector3<f64> {
        Vector3::new(self.yaw_rad.cos(), self.yaw_rad.sin(), 0.0)
    }

    pub fn outer_half_size(&self) -> f64 {
        OUTER_HALF_SIZE.max(self.half_size)
    }

    /// Inner corners in the gate frame, ordered TL, TR, BR, BL as seen when
    /// approaching along +x (left is +y).
    pub fn corners_gate(&self) -> [Vector3<f64>; 4] {
        let h = self.half_size;
        [
            Vector3::new(0.0, h, h),
            Vector3::new(0.0, -h, h),
            Vector3::new(0.0, -h, -h),
            Vector3::new(0.0, h, -h),
        ]
    }

    pub fn corners_world(&self) -> [Vector3<f64>; 4] {
        let pose = self.pose();
        self.corners_gate().map(|c| pose.transform_point(&c))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MapError {
    #[error("cannot read gate map: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed gate map: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid gate map: {0}")]
    Invalid(String),
}

/// The known track: gates in race order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GateMap {
    pub gates: Vec<Gate>,
}

impl GateMap {
    pub fn new(gates: Vec<Gate>) -> Result<Self, MapError> {
        let map = Self { gates };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<(), MapError> {
        if self.gates.is_empty() {
            return Err(MapError::Invalid("no gates".into()));
        }
        for (i, g) in self.gates.iter().enumerate() {
            if !(g.center.iter().all(|c| c.is_finite()) && g.yaw_rad.is_finite()) {
                return Err(MapError::Invalid(format!(
                    "gate {} has non-finite pose",
                    g.id
                )));
            }
            if !(g.half_size > 0.0) {
                return Err(MapError::Invalid(format!(
                    "gate {} has non-positive half size",
                    g.id
                )));
            }
            if self.gates[..i].iter().any(|o| o.id == g.id) {
                return Err(MapError::Invalid(format!("duplicate gate id {}", g.id)));
            }
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self, MapError> {
        let map: Self = serde_json::from_str(s)?;
        map.validate()?;
        Ok(map)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MapError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("gate map serializes")
    }

    pub fn get(&self, id: u32) -> Option<&Gate> {
        self.gates.iter().find(|g| g.id == id)
    }

    pub fn len(&self) -> usize {
        self.gates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gates.is_empty()
    }

    pub fn translated(&self, offset: &Vector3<f64>) -> Self {
        let gates = self
            .gates
            .iter()
            .map(|g| Gate {
                center: g.center + offset,
                ..g.clone()
            })
            .collect();
        Self { gates }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corner_order_and_size() {
        let g = Gate::new(1, Vector3::new(0.0, 0.0, 2.0), 0.0);
        let c = g.corners_world();
        assert_eq!(c[0], Vector3::new(0.0, 0.762, 2.762));
        assert_eq!(c[2], Vector3::new(0.0, -0.762, 2.0 - 0.762));
        assert!(((c[0] - c[1]).norm() - 1.524).abs() < 1e-12);
    }

    #[test]
    fn json_schema_round_trip() {
        let s = r#"[{"id": 3, "center": [1.0, 2.0, 1.5], "yaw_rad": 1.57, "half_size": 0.762},
                    {"id": 4, "center": [5.0, 2.0, 1.5], "yaw_rad": 0.0}]"#;
        let map = GateMap::from_json_str(s).unwrap();
        assert_eq!(map.len(), 2);
        assert_eq!(map.gates[1].half_size, INNER_HALF_SIZE);
        assert_eq!(map.gates[0].center, Vector3::new(1.0, 2.0, 1.5));
        let again = GateMap::from_json_str(&map.to_json()).unwrap();
        assert_eq!(again, map);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let s = r#"[{"id": 3, "center": [1.0, 2.0, 1.5], "yaw_rad": 0.0},
                    {"id": 3, "center": [5.0, 2.0, 1.5], "yaw_rad": 0.0}]"#;
        assert!(GateMap::from_json_str(s).is_err());
        assert!(GateMap::from_json_str("[]").is_err());
    }
}
