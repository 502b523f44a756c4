//! Pose/velocity rows shared by state logs and trajectory files:
//! `t,qw,qx,qy,qz,px,py,pz,vx,vy,vz`.

use std::io::{Read, Write};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateRow {
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
}

impl StateRow {
    pub fn new(t: f64, q: &UnitQuaternion<f64>, p: &Vector3<f64>, v: &Vector3<f64>) -> Self {
        Self {
            t,
            qw: q.w,
            qx: q.i,
            qy: q.j,
            qz: q.k,
            px: p.x,
            py: p.y,
            pz: p.z,
            vx: v.x,
            vy: v.y,
            vz: v.z,
        }
    }

    pub fn q(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_quaternion(Quaternion::new(self.qw, self.qx, self.qy, self.qz))
    }

    pub fn p(&self) -> Vector3<f64> {
        Vector3::new(self.px, self.py, self.pz)
    }

    pub fn v(&self) -> Vector3<f64> {
        Vector3::new(self.vx, self.vy, self.vz)
    }
}

pub fn write_state_rows<W: Write>(w: W, rows: &[StateRow]) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_state_rows<R: Read>(r: R) -> csv::Result<Vec<StateRow>> {
    csv::Reader::from_reader(r).deserialize().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let rows: Vec<StateRow> = (0..20)
            .map(|i| {
                let t = i as f64 * 0.01;
                let q = UnitQuaternion::from_euler_angles(t.sin(), 0.3 * t, 1.0 / (1.0 + t));
                StateRow::new(
                    t,
                    &q,
                    &Vector3::new(t / 3.0, -t, 1e-17),
                    &Vector3::new(0.1, 0.2, f64::MIN_POSITIVE),
                )
            })
            .collect();
        let mut buf = Vec::new();
        write_state_rows(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,qw,qx,qy,qz,px,py,pz,vx,vy,vz\n"));
        assert_eq!(read_state_rows(buf.as_slice()).unwrap(), rows);
    }
}
