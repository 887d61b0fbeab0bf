//! Point-cloud model, scan ingestion and the geometric primitives used by the
//! descriptor pipeline.

use rustc_hash::FxHashMap;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::error::{Error, Result};

/// A point in the sensor frame, in meters. `x` points along the direction of
/// travel, `y` to the left and `z` up.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2) + (self.z - other.z).powi(2))
            .sqrt()
    }

    fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    fn from_vector(v: Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }
}

/// An ordered set of points with optional per-point intensity.
///
/// Intensity is carried through ingestion and downsampling but the default
/// height encoder never reads it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    intensity: Option<Vec<f32>>,
}

impl PointCloud {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a cloud from finite points.
    pub fn from_points(points: Vec<Point3>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::Format(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self {
            points,
            intensity: None,
        })
    }

    pub fn with_intensity(points: Vec<Point3>, intensity: Vec<f32>) -> Result<Self> {
        if points.len() != intensity.len() {
            return Err(Error::Shape(format!(
                "{} points but {} intensities",
                points.len(),
                intensity.len()
            )));
        }
        let mut cloud = Self::from_points(points)?;
        cloud.intensity = Some(intensity);
        Ok(cloud)
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn intensity(&self) -> Option<&[f32]> {
        self.intensity.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Point3> {
        self.points.iter()
    }
}

/// A proper rigid motion `p' = R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

const ORTHONORMAL_TOLERANCE: f64 = 1e-9;

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validates that `rotation` is orthonormal with determinant +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidParam("transform has non-finite entries".into()));
        }
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        if gram.amax() > ORTHONORMAL_TOLERANCE {
            return Err(Error::InvalidParam("rotation is not orthonormal".into()));
        }
        if (rotation.determinant() - 1.0).abs() > ORTHONORMAL_TOLERANCE {
            return Err(Error::InvalidParam("rotation determinant is not +1".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::new(x, y, z),
        }
    }

    /// Rotation about +z, counter-clockwise seen from above.
    pub fn from_yaw_degrees(yaw: f64) -> Self {
        Self::from_euler_degrees(0.0, 0.0, yaw)
    }

    /// Roll about x, then pitch about y, then yaw about z (all degrees).
    pub fn from_euler_degrees(roll: f64, pitch: f64, yaw: f64) -> Self {
        let rot = Rotation3::from_euler_angles(roll.to_radians(), pitch.to_radians(), yaw.to_radians());
        Self {
            rotation: *rot.matrix(),
            translation: Vector3::zeros(),
        }
    }

    pub fn with_translation(mut self, x: f64, y: f64, z: f64) -> Self {
        self.translation = Vector3::new(x, y, z);
        self
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from_vector(self.rotation * p.to_vector() + self.translation)
    }
}

/// Maps every point through `transform`, preserving order and intensity.
pub fn transform(cloud: &PointCloud, transform: &RigidTransform) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| transform.apply(p)).collect(),
        intensity: cloud.intensity.clone(),
    }
}

/// Replaces the points of every occupied `leaf`-sized cube by their centroid.
///
/// Cells are half-open, `floor(coord / leaf)` per axis. Output order follows
/// the first appearance of each cell in the input.
pub fn voxel_downsample(cloud: &PointCloud, leaf: f64) -> Result<PointCloud> {
    if !(leaf > 0.0 && leaf.is_finite()) {
        return Err(Error::InvalidParam(format!("voxel leaf must be positive, got {leaf}")));
    }
    if u32::try_from(cloud.len()).is_err() {
        return Err(Error::InvalidParam(format!("cloud of {} points is too large", cloud.len())));
    }
    let cell = |p: &Point3| {
        (
            (p.x / leaf).floor() as i64,
            (p.y / leaf).floor() as i64,
            (p.z / leaf).floor() as i64,
        )
    };
    // Three 21-bit fields when every index fits, which is the common case.
    const HALF: i64 = 1 << 20;
    let fits = |k: i64| (-HALF..HALF).contains(&k);
    let packed: Option<Vec<u64>> = cloud
        .points
        .iter()
        .map(|p| {
            let (x, y, z) = cell(p);
            (fits(x) && fits(y) && fits(z))
                .then(|| ((x + HALF) as u64) << 42 | ((y + HALF) as u64) << 21 | (z + HALF) as u64)
        })
        .collect();
    let slots = match packed {
        Some(keys) => group_cells(keys.into_iter()),
        None => group_cells(cloud.points.iter().map(cell)),
    };

    struct Acc {
        sum: [f64; 3],
        intensity: f64,
        first: u32,
        count: u32,
    }
    let mut accs: Vec<Acc> = Vec::new();
    for (i, (&s, p)) in slots.iter().zip(&cloud.points).enumerate() {
        let s = s as usize;
        if s == accs.len() {
            accs.push(Acc { sum: [0.0; 3], intensity: 0.0, first: i as u32, count: 0 });
        }
        let acc = &mut accs[s];
        acc.sum[0] += p.x;
        acc.sum[1] += p.y;
        acc.sum[2] += p.z;
        acc.count += 1;
        if let Some(int) = &cloud.intensity {
            acc.intensity += f64::from(int[i]);
        }
    }

    let mut points = Vec::with_capacity(accs.len());
    let mut intensity = cloud.intensity.as_ref().map(|_| Vec::with_capacity(accs.len()));
    for acc in &accs {
        let n = f64::from(acc.count);
        let first = cloud.points[acc.first as usize];
        let mut c = Point3::new(acc.sum[0] / n, acc.sum[1] / n, acc.sum[2] / n);
        // Rounding can push a centroid across its cell face; keep it inside.
        if cell(&c) != cell(&first) {
            c = first;
        }
        points.push(c);
        if let Some(out) = intensity.as_mut() {
            out.push((acc.intensity / n) as f32);
        }
    }
    Ok(PointCloud { points, intensity })
}

/// Slot of each key, numbered by first appearance.
fn group_cells<K: std::hash::Hash + Eq>(keys: impl ExactSizeIterator<Item = K>) -> Vec<u32> {
    let mut map: FxHashMap<K, u32> = FxHashMap::default();
    map.reserve(keys.len());
    keys.map(|k| {
        let next = map.len() as u32;
        *map.entry(k).or_insert(next)
    })
    .collect()
}

/// Reads a KITTI velodyne scan: packed little-endian `f32` quadruples
/// `(x, y, z, intensity)`.
pub fn load_kitti_bin(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io_at(path, e))?;
    parse_kitti_bin(&bytes)
}

pub fn parse_kitti_bin(bytes: &[u8]) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(16) {
        return Err(Error::Format(format!(
            "scan length {} is not a multiple of 16 bytes",
            bytes.len()
        )));
    }
    let n = bytes.len() / 16;
    let mut points = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(16).enumerate() {
        let f = |k: usize| f32::from_le_bytes([rec[k], rec[k + 1], rec[k + 2], rec[k + 3]]);
        let (x, y, z, w) = (f(0), f(4), f(8), f(12));
        if !(x.is_finite() && y.is_finite() && z.is_finite() && w.is_finite()) {
            return Err(Error::Format(format!("point {i} has a non-finite value")));
        }
        points.push(Point3::new(x.into(), y.into(), z.into()));
        intensity.push(w);
    }
    Ok(PointCloud {
        points,
        intensity: Some(intensity),
    })
}

/// Writes `cloud` in the KITTI velodyne layout (intensity 0 when absent).
pub fn write_kitti_bin(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(cloud.len() * 16);
    for (i, p) in cloud.points.iter().enumerate() {
        let w = cloud.intensity.as_ref().map_or(0.0, |v| v[i]);
        for v in [p.x as f32, p.y as f32, p.z as f32, w] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io_at(path, e))
}

/// Reads `x,y,z[,intensity]` lines. Blank lines and `#` comments are skipped.
pub fn load_csv(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut intensity: Vec<f32> = Vec::new();
    let mut any_intensity = false;
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 3 or 4 fields, found {}", fields.len()),
            });
        }
        let mut vals = [0.0f64; 4];
        for (k, field) in fields.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("invalid number {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("non-finite value {field:?}"),
                });
            }
            vals[k] = v;
        }
        points.push(Point3::new(vals[0], vals[1], vals[2]));
        any_intensity |= fields.len() == 4;
        intensity.push(vals[3] as f32);
    }
    Ok(PointCloud {
        points,
        intensity: any_intensity.then_some(intensity),
    })
}

/// Loads a scan by extension: `.bin` as KITTI velodyne, anything else as CSV.
pub fn load_scan(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("bin") => load_kitti_bin(path),
        _ => load_csv(path),
    }
}
