//! Timestamped camera-to-world trajectories in TUM text format.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Quaternion, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::geometry::PoseSE3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stamped {
    pub timestamp: f64,
    /// Camera-to-world.
    pub pose: PoseSE3,
    pub tracked: bool,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Trajectory {
    pub poses: Vec<Stamped>,
}

impl Trajectory {
    /// Rejects non-increasing timestamps.
    pub fn new(poses: Vec<Stamped>) -> Result<Self> {
        if let Some(w) = poses.windows(2).position(|w| w[1].timestamp <= w[0].timestamp) {
            return Err(Error::InvalidInput(format!(
                "timestamps not strictly increasing at index {}: {} then {}",
                w + 1,
                poses[w].timestamp,
                poses[w + 1].timestamp
            )));
        }
        Ok(Self { poses })
    }

    /// Builds from `(timestamp, camera-to-world)` pairs, all tracked.
    pub fn from_poses(poses: impl IntoIterator<Item = (f64, PoseSE3)>) -> Result<Self> {
        Self::new(
            poses
                .into_iter()
                .map(|(timestamp, pose)| Stamped { timestamp, pose, tracked: true })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| p.pose.translation).collect()
    }

    /// Sum of distances between consecutive positions.
    pub fn path_length(&self) -> f64 {
        self.poses.windows(2).map(|w| (w[1].pose.translation - w[0].pose.translation).norm()).sum()
    }

    /// Median spacing of timestamps, zero for fewer than two poses.
    pub fn median_period(&self) -> f64 {
        let mut d: Vec<f64> = self.poses.windows(2).map(|w| w[1].timestamp - w[0].timestamp).collect();
        if d.is_empty() {
            return 0.0;
        }
        d.sort_by(f64::total_cmp);
        d[d.len() / 2]
    }

    /// Tracked poses only, one line each: `t tx ty tz qx qy qz qw`.
    pub fn to_tum(&self) -> String {
        let mut s = String::new();
        for p in self.poses.iter().filter(|p| p.tracked) {
            let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(p.pose.rotation));
            let t = p.pose.translation;
            let _ = writeln!(
                s,
                "{:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
                p.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
            );
        }
        s
    }

    /// Blank lines and `#` comments are skipped; parse errors carry the
    /// 1-based line number as their record.
    pub fn parse_tum(text: &str) -> Result<Self> {
        let mut poses = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse("TUM trajectory", n + 1, e.to_string()))?;
            if vals.len() != 8 {
                return Err(Error::parse("TUM trajectory", n + 1, format!("expected 8 fields, found {}", vals.len())));
            }
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::parse("TUM trajectory", n + 1, "non-finite value"));
            }
            let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
            if q.norm() < 1e-9 {
                return Err(Error::parse("TUM trajectory", n + 1, "zero quaternion"));
            }
            let r = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
            poses.push(Stamped {
                timestamp: vals[0],
                pose: PoseSE3::new(r, Vector3::new(vals[1], vals[2], vals[3])),
                tracked: true,
            });
        }
        Self::new(poses).map_err(|e| Error::parse("TUM trajectory", 0, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tum()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tum(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_exp;

    #[test]
    fn tum_round_trip() {
        let t = Trajectory::from_poses((0..5).map(|i| {
            (
                i as f64 * 0.1,
                PoseSE3::new(so3_exp(&Vector3::new(0.1 * i as f64, -0.2, 0.3)), Vector3::new(i as f64, 2.0, -1.0)),
            )
        }))
        .unwrap();
        let back = Trajectory::parse_tum(&t.to_tum()).unwrap();
        for (a, b) in t.poses.iter().zip(&back.poses) {
            assert!((a.timestamp - b.timestamp).abs() < 1e-6);
            assert!((a.pose.to_matrix() - b.pose.to_matrix()).norm() < 1e-7);
        }
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let e = Trajectory::parse_tum("0 0 0 0 0 0 0 1\n# c\n1 0 0 x 0 0 0 1\n").unwrap_err();
        assert!(matches!(e, Error::Parse { record: 3, .. }), "{e}");
        assert!(Trajectory::parse_tum("0 0 0 0 0 0 0 1\n0 0 0 0 0 0 0 1\n").is_err());
        assert!(Trajectory::parse_tum("0 0 0 0 0 0 0\n").is_err());
    }

    #[test]
    fn lost_poses_are_not_written() {
        let mut t = Trajectory::from_poses((0..3).map(|i| (i as f64, PoseSE3::identity()))).unwrap();
        t.poses[1].tracked = false;
        assert_eq!(t.to_tum().lines().count(), 2);
    }
}
