//! Deterministic synthetic worlds for tests, benchmarks and demos.
//!
//! A world is a straight road along `+x` lined with vertical poles and
//! walls sampled as columns of points. Columns stand at least 1 m apart and
//! their samples sit on a 0.5 m height grid, so a 0.5 m voxel filter keeps
//! every point.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::pointcloud::{Point3, PointCloud};

/// Sensor height above the ground plane, meters.
pub const SENSOR_HEIGHT: f64 = 1.73;
/// Scans include world points within this planar distance of the sensor.
pub const SCAN_RADIUS: f64 = 110.0;

const MIN_SPACING: f64 = 1.0;
const HEIGHT_STEP: f64 = 0.5;

#[derive(Clone, Copy, Debug)]
struct Column {
    x: f64,
    y: f64,
    height: f64,
}

#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    columns: Vec<Column>,
    /// Ground lattice spacing; `None` for no ground points.
    ground: Option<f64>,
    cell: f64,
    grid: std::collections::HashMap<(i64, i64), Vec<usize>>,
}

impl SyntheticWorld {
    /// A road from `x = 0` to `x = length` with structure on both sides,
    /// extending `SCAN_RADIUS` past either end.
    pub fn corridor(seed: u64, length: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x_lo = -SCAN_RADIUS;
        let x_hi = length + SCAN_RADIUS;
        let target = ((x_hi - x_lo) * 0.6) as usize;
        let mut world = Self {
            columns: Vec::with_capacity(target),
            ground: None,
            cell: 4.0,
            grid: Default::default(),
        };
        let mut attempts = 0;
        while world.columns.len() < target && attempts < target * 20 {
            attempts += 1;
            let x = rng.gen_range(x_lo..x_hi);
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            // Most structure hugs the road; some stands far back.
            let y = side * if rng.gen_bool(0.7) { rng.gen_range(4.5..15.0) } else { rng.gen_range(15.0..60.0) };
            let height = HEIGHT_STEP * rng.gen_range(4..30) as f64;
            world.try_add(Column { x, y, height });
        }
        world
    }

    /// Adds a flat ground lattice with the given spacing.
    pub fn with_ground(mut self, spacing: f64) -> Self {
        assert!(spacing > 0.0);
        self.ground = Some(spacing);
        self
    }

    fn key(&self, x: f64, y: f64) -> (i64, i64) {
        ((x / self.cell).floor() as i64, (y / self.cell).floor() as i64)
    }

    fn try_add(&mut self, c: Column) -> bool {
        let (kx, ky) = self.key(c.x, c.y);
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(ids) = self.grid.get(&(kx + dx, ky + dy)) {
                    if ids.iter().any(|&i| {
                        let o = self.columns[i];
                        (o.x - c.x).hypot(o.y - c.y) < MIN_SPACING
                    }) {
                        return false;
                    }
                }
            }
        }
        self.grid.entry((kx, ky)).or_default().push(self.columns.len());
        self.columns.push(c);
        true
    }

    pub fn column_count(&self) -> usize {
        self.columns.len()
    }

    /// The scan seen by a sensor at planar position `(x, y)` with heading
    /// `yaw_deg` (CCW from `+x`), in the sensor frame (`x` forward, `y`
    /// left, `z` up).
    pub fn scan_at(&self, x: f64, y: f64, yaw_deg: f64) -> PointCloud {
        let yaw = yaw_deg * PI / 180.0;
        let (s, c) = yaw.sin_cos();
        let to_sensor = |wx: f64, wy: f64| {
            let (dx, dy) = (wx - x, wy - y);
            (c * dx + s * dy, -s * dx + c * dy)
        };
        let mut points = Vec::new();
        for col in &self.columns {
            if (col.x - x).hypot(col.y - y) > SCAN_RADIUS {
                continue;
            }
            let (px, py) = to_sensor(col.x, col.y);
            let steps = (col.height / HEIGHT_STEP) as usize;
            for k in 1..=steps {
                points.push(Point3::new(px, py, k as f64 * HEIGHT_STEP - SENSOR_HEIGHT));
            }
        }
        if let Some(step) = self.ground {
            let n = (SCAN_RADIUS / step).ceil() as i64;
            let (gx, gy) = ((x / step).round() as i64, (y / step).round() as i64);
            for i in gx - n..=gx + n {
                for j in gy - n..=gy + n {
                    let (wx, wy) = (i as f64 * step, j as f64 * step);
                    if (wx - x).hypot(wy - y) <= SCAN_RADIUS {
                        let (px, py) = to_sensor(wx, wy);
                        points.push(Point3::new(px, py, -SENSOR_HEIGHT));
                    }
                }
            }
        }
        PointCloud::from_points(points).expect("synthetic points are finite")
    }
}

/// A 3x4 row-major KITTI pose row (camera frame: `x` right, `y` down,
/// `z` forward) for a vehicle at planar `(x, y)` with heading `yaw_deg`.
pub fn kitti_pose_row(x: f64, y: f64, yaw_deg: f64) -> [f64; 12] {
    let yaw = yaw_deg * PI / 180.0;
    let (s, c) = yaw.sin_cos();
    // Lidar-frame rotation about z becomes a rotation about camera -y.
    [c, 0.0, -s, -y, 0.0, 1.0, 0.0, 0.0, s, 0.0, c, x]
}
