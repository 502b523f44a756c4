use std::collections::BTreeSet;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::vision::GateMap;

/// Offset of the approach and exit waypoints from the gate center, m.
pub const GATE_OFFSET: f64 = 0.4;
/// Exit offset after a gate that opens a Split-S, m.
pub const SPLIT_S_EXIT_OFFSET: f64 = 1.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Pre,
    Post,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub position: Vector3<f64>,
    pub gate_id: u32,
    pub side: Side,
}

/// Two waypoints per gate on the line through its center along the race
/// direction, in race order. Gates listed in `split_s_ids` or flagged in the
/// map get the longer exit offset.
pub fn place_waypoints(map: &GateMap, split_s_ids: &BTreeSet<u32>) -> Vec<Waypoint> {
    let mut out = Vec::with_capacity(2 * map.gates.len());
    for gate in &map.gates {
        let n = gate.normal();
        let exit = if gate.split_s || split_s_ids.contains(&gate.id) {
            SPLIT_S_EXIT_OFFSET
        } else {
            GATE_OFFSET
        };
        out.push(Waypoint {
            position: gate.center - n * GATE_OFFSET,
            gate_id: gate.id,
            side: Side::Pre,
        });
        out.push(Waypoint {
            position: gate.center + n * exit,
            gate_id: gate.id,
            side: Side::Post,
        });
    }
    out
}

pub fn waypoints_to_json(wps: &[Waypoint]) -> String {
    serde_json::to_string_pretty(wps).expect("waypoints serialize")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vision::Gate;
    use std::f64::consts::FRAC_PI_2;

    fn one(gate: Gate) -> Vec<Waypoint> {
        place_waypoints(&GateMap::new(vec![gate]).unwrap(), &BTreeSet::new())
    }

    #[test]
    fn yaw_zero() {
        let w = one(Gate::new(1, Vector3::new(0.0, 0.0, 2.0), 0.0));
        assert_eq!(w[0].position, Vector3::new(-0.4, 0.0, 2.0));
        assert_eq!(w[1].position, Vector3::new(0.4, 0.0, 2.0));
        assert_eq!((w[0].side, w[1].side), (Side::Pre, Side::Post));
    }

    #[test]
    fn yaw_quarter_turn() {
        let w = one(Gate::new(1, Vector3::new(1.0, 1.0, 2.0), FRAC_PI_2));
        assert!((w[0].position - Vector3::new(1.0, 0.6, 2.0)).norm() < 1e-15);
        assert!((w[1].position - Vector3::new(1.0, 1.4, 2.0)).norm() < 1e-15);
    }

    #[test]
    fn split_s_exit() {
        let map = GateMap::new(vec![Gate::new(7, Vector3::new(0.0, 0.0, 3.0), 0.0)]).unwrap();
        let w = place_waypoints(&map, &BTreeSet::from([7]));
        assert_eq!(w[0].position.x, -0.4);
        assert_eq!(w[1].position.x, 1.25);
        let flagged = one(Gate {
            split_s: true,
            ..Gate::new(7, Vector3::new(0.0, 0.0, 3.0), 0.0)
        });
        assert_eq!(flagged, w);
    }

    #[test]
    fn translation_invariant() {
        let map = GateMap::new(vec![
            Gate::new(1, Vector3::new(0.0, 0.0, 2.0), 0.3),
            Gate::new(2, Vector3::new(4.0, 1.0, 1.5), -1.2),
        ])
        .unwrap();
        let d = Vector3::new(3.0, -2.0, 0.5);
        let a = place_waypoints(&map, &BTreeSet::new());
        let b = place_waypoints(&map.translated(&d), &BTreeSet::new());
        for (x, y) in a.iter().zip(&b) {
            assert!((y.position - x.position - d).norm() < 1e-12);
        }
    }
}
