//! Ground-truth poses, equidistant sampling and revisit criteria.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RADIUS: f64 = 8.0;
pub const DEFAULT_SPACING: f64 = 1.0;

/// Axis convention of a pose file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroundTruthFrame {
    /// KITTI odometry: left camera, `x` right, `y` down, `z` forward.
    #[default]
    Camera,
    /// Sensor frame: `x` forward, `y` left, `z` up.
    Lidar,
}

/// Lidar axes expressed in camera axes.
fn lidar_to_camera() -> Matrix3<f64> {
    Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// Seconds. Pose files carry no clock, so this is the line index.
    pub timestamp: f64,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            timestamp: 0.0,
        }
    }

    pub fn from_row(row: &[f64; 12], timestamp: f64) -> Self {
        Self {
            rotation: Matrix3::new(row[0], row[1], row[2], row[4], row[5], row[6], row[8], row[9], row[10]),
            translation: Vector3::new(row[3], row[7], row[11]),
            timestamp,
        }
    }

    pub fn distance(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// The same pose with lidar axes (`z` up) in place of `frame`.
    pub fn in_lidar_axes(&self, frame: GroundTruthFrame) -> Pose {
        match frame {
            GroundTruthFrame::Lidar => self.clone(),
            GroundTruthFrame::Camera => {
                let c = lidar_to_camera();
                Pose {
                    rotation: c.transpose() * self.rotation * c,
                    translation: c.transpose() * self.translation,
                    timestamp: self.timestamp,
                }
            }
        }
    }

    /// Magnitude of the relative heading about `z`, degrees in `[0, 180]`.
    /// Both poses must use lidar axes.
    pub fn yaw_offset_deg(&self, other: &Pose) -> f64 {
        let rel = other.rotation.transpose() * self.rotation;
        rel[(1, 0)].atan2(rel[(0, 0)]).to_degrees().abs()
    }

    /// `self` expressed in the frame of `map`, converted to lidar axes:
    /// the relative heading in degrees `(-180, 180]` and the offset along
    /// the map's left axis in meters.
    pub fn planar_offset_from(&self, map: &Pose, frame: GroundTruthFrame) -> (f64, f64) {
        let rel_r = map.rotation.transpose() * self.rotation;
        let rel_t = map.rotation.transpose() * (self.translation - map.translation);
        let (r, t) = match frame {
            GroundTruthFrame::Lidar => (rel_r, rel_t),
            GroundTruthFrame::Camera => {
                let c = lidar_to_camera();
                (c.transpose() * rel_r * c, c.transpose() * rel_t)
            }
        };
        let yaw = r[(1, 0)].atan2(r[(0, 0)]).to_degrees();
        let yaw = if yaw <= -180.0 { yaw + 360.0 } else { yaw };
        (yaw, t.y)
    }
}

/// Parses KITTI odometry poses: one row-major 3x4 matrix (12 numbers) per
/// line. Blank lines are skipped.
pub fn parse_kitti_poses(text: &str) -> Result<Vec<Pose>> {
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = [0.0f64; 12];
        let mut n = 0;
        for field in line.split_whitespace() {
            if n == 12 {
                return Err(Error::Parse { line: i + 1, message: "more than 12 values".into() });
            }
            row[n] = field.parse().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("invalid number {field:?}"),
            })?;
            if !row[n].is_finite() {
                return Err(Error::Parse { line: i + 1, message: format!("non-finite value {field}") });
            }
            n += 1;
        }
        if n != 12 {
            return Err(Error::Parse { line: i + 1, message: format!("expected 12 values, found {n}") });
        }
        let pose = Pose::from_row(&row, poses.len() as f64);
        let r = pose.rotation;
        if (r * r.transpose() - Matrix3::identity()).norm() > 1e-3 {
            return Err(Error::Parse { line: i + 1, message: "rotation is not orthonormal".into() });
        }
        poses.push(pose);
    }
    Ok(poses)
}

pub fn load_kitti_poses(path: impl AsRef<Path>) -> Result<Vec<Pose>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    parse_kitti_poses(&text)
}

/// Greedy equidistant subsampling: keeps index 0, then each index at which
/// the travel since the last kept index reaches `spacing`.
pub fn equidistant_sample(poses: &[Pose], spacing: f64) -> Result<Vec<usize>> {
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::InvalidParam(format!("spacing must be positive, got {spacing}")));
    }
    let mut kept = Vec::new();
    if poses.is_empty() {
        return Ok(kept);
    }
    kept.push(0);
    let mut travel = 0.0;
    for i in 1..poses.len() {
        travel += poses[i].distance(&poses[i - 1]);
        if travel >= spacing {
            kept.push(i);
            travel = 0.0;
        }
    }
    Ok(kept)
}

/// A loop closure between two places.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RevisitEvent {
    pub query_id: usize,
    pub map_id: usize,
    /// Meters, `>= 0`.
    pub translation_offset: f64,
    /// Relative heading magnitude, degrees in `[0, 180]`.
    pub rotation_offset: f64,
}

impl RevisitEvent {
    pub fn between(poses: &[Pose], query_id: usize, map_id: usize) -> Result<Self> {
        let (q, m) = (pose_at(poses, query_id)?, pose_at(poses, map_id)?);
        Ok(Self {
            query_id,
            map_id,
            translation_offset: q.distance(m),
            rotation_offset: q.yaw_offset_deg(m),
        })
    }
}

fn pose_at(poses: &[Pose], id: usize) -> Result<&Pose> {
    poses
        .get(id)
        .ok_or_else(|| Error::Range(format!("pose id {id} out of range ({} poses)", poses.len())))
}

/// Closer than `radius` meters and more than `window` ids apart.
pub fn is_revisit(poses: &[Pose], query_id: usize, map_id: usize, radius: f64, window: u64) -> Result<bool> {
    let (q, m) = (pose_at(poses, query_id)?, pose_at(poses, map_id)?);
    Ok(q.distance(m) < radius && (query_id.abs_diff(map_id) as u64) > window)
}

/// For each query, the nearest earlier place that counts as a revisit.
pub fn revisit_events(poses: &[Pose], radius: f64, window: u64) -> Vec<Option<RevisitEvent>> {
    (0..poses.len())
        .map(|q| {
            let mut best: Option<(f64, usize)> = None;
            for m in 0..q {
                let d = poses[q].distance(&poses[m]);
                if d < radius && (q - m) as u64 > window && best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, m));
                }
            }
            best.map(|(_, m)| RevisitEvent::between(poses, q, m).expect("ids in range"))
        })
        .collect()
}
