//! Scan context descriptors: polar and Cartesian bird's-eye-view matrices of
//! per-bin maximum height, their row/column summary keys, and the
//! augmentations used to widen the set of stored viewpoints.

use std::fmt;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{self, Point3, PointCloud, RigidTransform};

/// Lateral root-shift offsets (meters) used for polar augmentation.
pub const DEFAULT_ROOT_SHIFTS: [f64; 2] = [2.0, -2.0];

/// Height added to `z` before encoding; sensors sit above the ground.
pub const DEFAULT_HEIGHT_OFFSET: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorKind {
    /// Rows are range rings, columns azimuth sectors.
    Polar,
    /// Rows are longitudinal strips, columns lateral strips.
    Cartesian,
}

impl DescriptorKind {
    pub fn name(self) -> &'static str {
        match self {
            DescriptorKind::Polar => "polar",
            DescriptorKind::Cartesian => "cartesian",
        }
    }

    pub(crate) fn to_byte(self) -> u8 {
        match self {
            DescriptorKind::Polar => 0,
            DescriptorKind::Cartesian => 1,
        }
    }

    pub(crate) fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(DescriptorKind::Polar),
            1 => Ok(DescriptorKind::Cartesian),
            _ => Err(Error::Format(format!("unknown descriptor kind {b}"))),
        }
    }
}

impl fmt::Display for DescriptorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Region of interest and resolution of a descriptor.
///
/// `r_range` is in meters for both kinds. `a_range` is in degrees for polar
/// descriptors (and must be `[0, 360]`) and in meters for Cartesian ones.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptorParams {
    pub kind: DescriptorKind,
    pub r_range: (f64, f64),
    pub a_range: (f64, f64),
    pub n_r: usize,
    pub n_a: usize,
    pub height_offset: f64,
}

impl DescriptorParams {
    /// 20x60 polar over 80 m, or 40x40 Cartesian over 200 m x 80 m.
    pub fn default_for(kind: DescriptorKind) -> Self {
        match kind {
            DescriptorKind::Polar => Self {
                kind,
                r_range: (0.0, 80.0),
                a_range: (0.0, 360.0),
                n_r: 20,
                n_a: 60,
                height_offset: DEFAULT_HEIGHT_OFFSET,
            },
            DescriptorKind::Cartesian => Self {
                kind,
                r_range: (-100.0, 100.0),
                a_range: (-40.0, 40.0),
                n_r: 40,
                n_a: 40,
                height_offset: DEFAULT_HEIGHT_OFFSET,
            },
        }
    }

    pub fn delta_r(&self) -> f64 {
        (self.r_range.1 - self.r_range.0) / self.n_r as f64
    }

    pub fn delta_a(&self) -> f64 {
        (self.a_range.1 - self.a_range.0) / self.n_a as f64
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.r_range.0, self.r_range.1, self.a_range.0, self.a_range.1, self.height_offset]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParam("descriptor parameters must be finite".into()));
        }
        if self.r_range.0 >= self.r_range.1 {
            return Err(Error::InvalidParam(format!("empty R range {:?}", self.r_range)));
        }
        if self.a_range.0 >= self.a_range.1 {
            return Err(Error::InvalidParam(format!("empty A range {:?}", self.a_range)));
        }
        if self.n_r == 0 || self.n_a == 0 {
            return Err(Error::InvalidParam("descriptor needs at least one row and column".into()));
        }
        if u32::try_from(self.n_r).is_err() || u32::try_from(self.n_a).is_err() {
            return Err(Error::InvalidParam("descriptor dimensions exceed u32".into()));
        }
        if self.kind == DescriptorKind::Polar {
            if self.a_range != (0.0, 360.0) {
                return Err(Error::InvalidParam("polar A range must be [0, 360]".into()));
            }
            if self.r_range.0 < 0.0 {
                return Err(Error::InvalidParam("polar R range must be non-negative".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AugmentationTag {
    Original,
    /// Built from the cloud re-expressed at a virtual origin displaced this
    /// many meters to the left.
    RootShift(f64),
    DoubleFlip,
}

impl AugmentationTag {
    pub(crate) fn to_parts(self) -> (u8, f32) {
        match self {
            AugmentationTag::Original => (0, 0.0),
            AugmentationTag::RootShift(d) => (1, d as f32),
            AugmentationTag::DoubleFlip => (2, 0.0),
        }
    }

    pub(crate) fn from_parts(tag: u8, offset: f32) -> Result<Self> {
        match tag {
            0 => Ok(AugmentationTag::Original),
            1 => Ok(AugmentationTag::RootShift(offset.into())),
            2 => Ok(AugmentationTag::DoubleFlip),
            _ => Err(Error::Format(format!("unknown augmentation tag {tag}"))),
        }
    }

    pub fn is_original(&self) -> bool {
        matches!(self, AugmentationTag::Original)
    }
}

impl fmt::Display for AugmentationTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugmentationTag::Original => f.write_str("original"),
            AugmentationTag::RootShift(d) => write!(f, "root_shift({d:+})"),
            AugmentationTag::DoubleFlip => f.write_str("double_flip"),
        }
    }
}

/// Maps a point to the value it contributes to its bin. Bins keep the maximum
/// contribution; empty bins are 0 and negative contributions clamp to 0.
pub trait BinEncoder {
    fn encode(&self, point: &Point3, intensity: Option<f32>, params: &DescriptorParams) -> f32;
}

/// Offset height `z + height_offset`.
#[derive(Clone, Copy, Debug, Default)]
pub struct MaxHeight;

impl BinEncoder for MaxHeight {
    fn encode(&self, point: &Point3, _intensity: Option<f32>, params: &DescriptorParams) -> f32 {
        (point.z + params.height_offset) as f32
    }
}

/// An `n_r x n_a` row-major matrix of non-negative bin values.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanContextDescriptor {
    params: DescriptorParams,
    matrix: Vec<f32>,
    tag: AugmentationTag,
}

impl ScanContextDescriptor {
    pub fn zeros(params: DescriptorParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            matrix: vec![0.0; params.n_r * params.n_a],
            tag: AugmentationTag::Original,
        })
    }

    /// Wraps an existing row-major matrix. Entries must be finite and >= 0.
    pub fn from_matrix(params: DescriptorParams, matrix: Vec<f32>) -> Result<Self> {
        params.validate()?;
        if matrix.len() != params.n_r * params.n_a {
            return Err(Error::Shape(format!(
                "matrix has {} entries, expected {}x{}",
                matrix.len(),
                params.n_r,
                params.n_a
            )));
        }
        if let Some(v) = matrix.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Range(format!("descriptor entry {v} is not a finite non-negative value")));
        }
        Ok(Self {
            params,
            matrix,
            tag: AugmentationTag::Original,
        })
    }

    pub fn with_tag(mut self, tag: AugmentationTag) -> Self {
        self.tag = tag;
        self
    }

    pub fn params(&self) -> &DescriptorParams {
        &self.params
    }

    pub fn kind(&self) -> DescriptorKind {
        self.params.kind
    }

    pub fn tag(&self) -> AugmentationTag {
        self.tag
    }

    pub fn rows(&self) -> usize {
        self.params.n_r
    }

    pub fn cols(&self) -> usize {
        self.params.n_a
    }

    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.matrix[row * self.params.n_a + col]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        let n_a = self.params.n_a;
        &self.matrix[row * n_a..(row + 1) * n_a]
    }

    pub fn is_zero(&self) -> bool {
        self.matrix.iter().all(|&v| v == 0.0)
    }

    /// Column `j` of the output is column `(j - n) mod n_a` of `self`.
    pub(crate) fn circular_shift(&self, n: usize) -> Self {
        let n_a = self.params.n_a;
        let mut matrix = vec![0.0; self.matrix.len()];
        for (src, dst) in self.matrix.chunks_exact(n_a).zip(matrix.chunks_exact_mut(n_a)) {
            for (j, v) in src.iter().enumerate() {
                dst[(j + n) % n_a] = *v;
            }
        }
        Self {
            params: self.params,
            matrix,
            tag: self.tag,
        }
    }

    /// Row-major CSV, one matrix row per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.matrix.len() * 6);
        for r in 0..self.rows() {
            let line: Vec<String> = self.row(r).iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, params: DescriptorParams) -> Result<Self> {
        let mut matrix = Vec::with_capacity(params.n_r * params.n_a);
        let mut rows = 0;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let before = matrix.len();
            for field in line.split(',') {
                let v: f32 = field.trim().parse().map_err(|_| Error::Parse {
                    line: i + 1,
                    message: format!("invalid number {field:?}"),
                })?;
                matrix.push(v);
            }
            if matrix.len() - before != params.n_a {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected {} values, found {}", params.n_a, matrix.len() - before),
                });
            }
            rows += 1;
        }
        if rows != params.n_r {
            return Err(Error::Shape(format!("expected {} rows, found {rows}", params.n_r)));
        }
        Self::from_matrix(params, matrix)
    }

    /// Binary record: `u32 n_r, u32 n_a, u8 kind, u8 tag, f32 tag offset`,
    /// then `n_r * n_a` little-endian `f32` in row-major order.
    pub fn write_record<W: Write>(&self, w: &mut W) -> Result<()> {
        let (tag, offset) = self.tag.to_parts();
        w.write_u32::<LittleEndian>(self.params.n_r as u32)?;
        w.write_u32::<LittleEndian>(self.params.n_a as u32)?;
        w.write_u8(self.params.kind.to_byte())?;
        w.write_u8(tag)?;
        w.write_f32::<LittleEndian>(offset)?;
        for v in &self.matrix {
            w.write_f32::<LittleEndian>(*v)?;
        }
        Ok(())
    }

    /// Reads a record written by [`write_record`](Self::write_record). The
    /// record's shape and kind must agree with `params`.
    pub fn read_record<R: Read>(r: &mut R, params: &DescriptorParams) -> Result<Self> {
        let n_r = r.read_u32::<LittleEndian>()? as usize;
        let n_a = r.read_u32::<LittleEndian>()? as usize;
        let kind = DescriptorKind::from_byte(r.read_u8()?)?;
        let tag = r.read_u8()?;
        let offset = r.read_f32::<LittleEndian>()?;
        if (n_r, n_a, kind) != (params.n_r, params.n_a, params.kind) {
            return Err(Error::Shape(format!(
                "record is {kind} {n_r}x{n_a}, expected {} {}x{}",
                params.kind, params.n_r, params.n_a
            )));
        }
        let mut matrix = vec![0.0f32; n_r * n_a];
        r.read_f32_into::<LittleEndian>(&mut matrix)?;
        Ok(Self::from_matrix(*params, matrix)?.with_tag(AugmentationTag::from_parts(tag, offset)?))
    }
}

/// Row summary: the mean of each row. Invariant to any column permutation.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalKey(Vec<f64>);

/// Column summary: the mean of each column. Moves with circular column shifts.
#[derive(Clone, Debug, PartialEq)]
pub struct AligningKey(Vec<f64>);

impl RetrievalKey {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn distance(&self, other: &RetrievalKey) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl AligningKey {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<f64>> for RetrievalKey {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

pub fn default_params(kind: DescriptorKind) -> DescriptorParams {
    DescriptorParams::default_for(kind)
}

/// Builds a descriptor with the max-height encoder.
pub fn make_descriptor(cloud: &PointCloud, params: &DescriptorParams) -> Result<ScanContextDescriptor> {
    make_descriptor_with(cloud, params, &MaxHeight)
}

pub fn make_descriptor_with<E: BinEncoder + ?Sized>(
    cloud: &PointCloud,
    params: &DescriptorParams,
    encoder: &E,
) -> Result<ScanContextDescriptor> {
    let mut desc = ScanContextDescriptor::zeros(*params)?;
    let binner = Binner::new(params);
    let intensity = cloud.intensity();
    for (i, p) in cloud.iter().enumerate() {
        let Some((row, col)) = binner.bin(p) else {
            continue;
        };
        let v = encoder.encode(p, intensity.map(|int| int[i]), params).max(0.0);
        let cell = &mut desc.matrix[row * params.n_a + col];
        if v > *cell {
            *cell = v;
        }
    }
    Ok(desc)
}

struct Binner {
    kind: DescriptorKind,
    r_min: f64,
    r_max: f64,
    a_min: f64,
    a_max: f64,
    delta_r: f64,
    delta_a: f64,
    n_r: usize,
    n_a: usize,
}

impl Binner {
    fn new(p: &DescriptorParams) -> Self {
        Self {
            kind: p.kind,
            r_min: p.r_range.0,
            r_max: p.r_range.1,
            a_min: p.a_range.0,
            a_max: p.a_range.1,
            delta_r: p.delta_r(),
            delta_a: p.delta_a(),
            n_r: p.n_r,
            n_a: p.n_a,
        }
    }

    /// Half-open bins; `None` outside the region of interest.
    fn bin(&self, p: &Point3) -> Option<(usize, usize)> {
        let (r, a) = match self.kind {
            DescriptorKind::Polar => {
                let mut theta = p.y.atan2(p.x).to_degrees();
                if theta < 0.0 {
                    theta += 360.0;
                }
                if theta >= 360.0 {
                    theta -= 360.0;
                }
                (p.x.hypot(p.y), theta)
            }
            DescriptorKind::Cartesian => (p.x, p.y),
        };
        if !(r >= self.r_min && r < self.r_max && a >= self.a_min && a < self.a_max) {
            return None;
        }
        let row = (((r - self.r_min) / self.delta_r).floor() as usize).min(self.n_r - 1);
        let col = (((a - self.a_min) / self.delta_a).floor() as usize).min(self.n_a - 1);
        Some((row, col))
    }
}

/// `v_i = (1/n_a) * sum_j |M_ij|`.
pub fn retrieval_key(scd: &ScanContextDescriptor) -> RetrievalKey {
    let n_a = scd.cols() as f64;
    RetrievalKey(
        scd.matrix
            .chunks_exact(scd.cols())
            .map(|row| row.iter().map(|v| f64::from(v.abs())).sum::<f64>() / n_a)
            .collect(),
    )
}

/// `w_j = (1/n_r) * sum_i |M_ij|`.
pub fn aligning_key(scd: &ScanContextDescriptor) -> AligningKey {
    let mut sums = vec![0.0f64; scd.cols()];
    for row in scd.matrix.chunks_exact(scd.cols()) {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += f64::from(v.abs());
        }
    }
    let n_r = scd.rows() as f64;
    sums.iter_mut().for_each(|s| *s /= n_r);
    AligningKey(sums)
}

/// Reverses both rows and columns of a Cartesian descriptor, which is the
/// descriptor of the same scene seen with the opposite heading.
pub fn double_flip(cc: &ScanContextDescriptor) -> Result<ScanContextDescriptor> {
    if cc.kind() != DescriptorKind::Cartesian {
        return Err(Error::Kind("polar"));
    }
    let mut matrix = cc.matrix.clone();
    matrix.reverse();
    Ok(ScanContextDescriptor {
        params: cc.params,
        matrix,
        tag: AugmentationTag::DoubleFlip,
    })
}

/// The cloud as seen from virtual origins displaced `+offset` meters to the
/// left, one cloud per offset.
pub fn root_shift_clouds(cloud: &PointCloud, lateral_offsets: &[f64]) -> Result<Vec<PointCloud>> {
    if let Some(d) = lateral_offsets.iter().find(|d| !d.is_finite()) {
        return Err(Error::InvalidParam(format!("root shift offset {d} is not finite")));
    }
    Ok(lateral_offsets
        .iter()
        .map(|&d| pointcloud::transform(cloud, &RigidTransform::from_translation(0.0, -d, 0.0)))
        .collect())
}
