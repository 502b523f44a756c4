use nalgebra::{Vector2, Vector3};

use crate::vision::Gate;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateCrossing {
    /// Through the opening in the race direction. `frac` locates the plane
    /// crossing along the segment, in [0, 1]; `offset` is the crossing point
    /// in the gate plane (lateral, vertical), m.
    Pass {
        frac: f64,
        offset: Vector2<f64>,
    },
    /// Through the frame band between the opening and the outer edge, in
    /// either direction. Always a collision.
    Miss {
        frac: f64,
        offset: Vector2<f64>,
    },
    None,
}

impl GateCrossing {
    pub fn is_pass(&self) -> bool {
        matches!(self, Self::Pass { .. })
    }

    pub fn is_miss(&self) -> bool {
        matches!(self, Self::Miss { .. })
    }
}

/// Classifies the straight segment between two consecutive positions against
/// a gate plane.
pub fn detect_gate_pass(prev: &Vector3<f64>, cur: &Vector3<f64>, gate: &Gate) -> GateCrossing {
    let to_gate = gate.pose().inverse();
    let a = to_gate.transform_point(prev);
    let b = to_gate.transform_point(cur);
    // Half-open so a point exactly on the plane is counted once.
    let forward = a.x < 0.0 && b.x >= 0.0;
    let backward = a.x >= 0.0 && b.x < 0.0;
    if !(forward || backward) {
        return GateCrossing::None;
    }
    let frac = a.x / (a.x - b.x);
    let hit = a + (b - a) * frac;
    let offset = Vector2::new(hit.y, hit.z);
    let off = offset.amax();
    if off >= gate.outer_half_size() {
        GateCrossing::None
    } else if off >= gate.half_size {
        GateCrossing::Miss { frac, offset }
    } else if forward {
        GateCrossing::Pass { frac, offset }
    } else {
        GateCrossing::None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gate() -> Gate {
        Gate::new(1, Vector3::new(2.0, 1.0, 1.5), 0.4)
    }

    fn along(g: &Gate, lateral: f64, vertical: f64) -> (Vector3<f64>, Vector3<f64>) {
        let pose = g.pose();
        (
            pose.transform_point(&Vector3::new(-0.3, lateral, vertical)),
            pose.transform_point(&Vector3::new(0.1, lateral, vertical)),
        )
    }

    #[test]
    fn center_pass_and_reverse() {
        let g = gate();
        let (a, b) = along(&g, 0.0, 0.0);
        match detect_gate_pass(&a, &b, &g) {
            GateCrossing::Pass { frac, offset } => {
                assert!((frac - 0.75).abs() < 1e-12);
                assert!(offset.norm() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(detect_gate_pass(&b, &a, &g), GateCrossing::None);
    }

    #[test]
    fn frame_band_is_miss() {
        let g = gate();
        let (a, b) = along(&g, 0.8, 0.0);
        assert!(detect_gate_pass(&a, &b, &g).is_miss());
        assert!(detect_gate_pass(&b, &a, &g).is_miss());
        let (a, b) = along(&g, 0.0, -1.0);
        assert!(detect_gate_pass(&a, &b, &g).is_miss());
    }

    #[test]
    fn outside_frame_and_parallel_are_none() {
        let g = gate();
        let (a, b) = along(&g, 1.2, 0.0);
        assert_eq!(detect_gate_pass(&a, &b, &g), GateCrossing::None);
        let p = g.pose();
        let a = p.transform_point(&Vector3::new(-1.0, 0.0, 0.0));
        let b = p.transform_point(&Vector3::new(-0.5, 0.3, 0.0));
        assert_eq!(detect_gate_pass(&a, &b, &g), GateCrossing::None);
    }
}
