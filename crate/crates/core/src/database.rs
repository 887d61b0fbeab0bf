//! Place database and the three-stage recognition pipeline.
//!
//! Every stored place contributes one original entry and, when augmentation
//! is enabled, extra entries built from virtual viewpoints. All entries share
//! one k-d tree over their retrieval keys. A query
//!
//! 1. retrieves the `k` nearest retrieval keys outside the exclusion window,
//! 2. pre-aligns each candidate with the aligning keys,
//! 3. scores the candidate with the full descriptor near that shift and
//!    accepts the best one if its distance is below `tau`.
//!
//! The tree is rebuilt in bulk (every `n` insertions or on a wall-clock
//! interval); entries added since the last rebuild are scanned linearly, so
//! nothing is ever invisible to a query.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::Serialize;

use crate::descriptor::{
    self, AligningKey, AugmentationTag, DescriptorKind, DescriptorParams, RetrievalKey,
    ScanContextDescriptor, DEFAULT_ROOT_SHIFTS,
};
use crate::distance::{self, Columns, SemiMetricPose};
use crate::error::{Error, Result};
use crate::kdtree::{self, KdTree, Neighbor};
use crate::pointcloud::{self, PointCloud};

pub type PlaceId = u64;

pub const DEFAULT_TAU: f64 = 0.15;
pub const DEFAULT_EXCLUSION_WINDOW: u64 = 50;
pub const DEFAULT_REBUILD_EVERY: usize = 10;
pub const DEFAULT_VOXEL_LEAF: f64 = 0.5;

const MAGIC: [u8; 4] = *b"SCDB";
const FORMAT_VERSION: u32 = 1;

/// Extra viewpoints stored alongside each place.
#[derive(Clone, Debug, PartialEq)]
pub enum Augmentation {
    None,
    /// Polar only: descriptors of the cloud re-rooted at these lateral
    /// offsets (meters, positive to the left).
    RootShift(Vec<f64>),
    /// Cartesian only: the descriptor with both axes reversed.
    DoubleFlip,
}

impl Augmentation {
    /// The standard augmentation for `kind`: +-2 m root shifts for polar,
    /// double flip for Cartesian.
    pub fn default_for(kind: DescriptorKind) -> Self {
        match kind {
            DescriptorKind::Polar => Augmentation::RootShift(DEFAULT_ROOT_SHIFTS.to_vec()),
            DescriptorKind::Cartesian => Augmentation::DoubleFlip,
        }
    }

    fn extra_entries(&self) -> usize {
        match self {
            Augmentation::None => 0,
            Augmentation::RootShift(offsets) => offsets.len(),
            Augmentation::DoubleFlip => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RebuildPolicy {
    /// Rebuild after this many `add_place` calls.
    EveryInsertions(usize),
    /// Rebuild on the first insertion after this much wall-clock time.
    Interval(Duration),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatabaseConfig {
    pub params: DescriptorParams,
    /// Candidates taken from the tree.
    pub k: usize,
    /// Acceptance threshold on the aligned descriptor distance.
    pub tau: f64,
    /// Entries whose place id is within this many ids of the query are
    /// never candidates.
    pub exclusion_window: u64,
    pub augmentation: Augmentation,
    pub rebuild: RebuildPolicy,
    /// Shifts searched on each side of the pre-aligned shift.
    pub half_width: usize,
    /// Voxel size applied to every cloud before description; `None` keeps
    /// the raw cloud.
    pub voxel_leaf: Option<f64>,
}

impl DatabaseConfig {
    pub fn new(kind: DescriptorKind) -> Self {
        Self {
            params: DescriptorParams::default_for(kind),
            k: 1,
            tau: DEFAULT_TAU,
            exclusion_window: DEFAULT_EXCLUSION_WINDOW,
            augmentation: Augmentation::None,
            rebuild: RebuildPolicy::EveryInsertions(DEFAULT_REBUILD_EVERY),
            half_width: 0,
            voxel_leaf: Some(DEFAULT_VOXEL_LEAF),
        }
    }

    pub fn with_default_augmentation(mut self) -> Self {
        self.augmentation = Augmentation::default_for(self.params.kind);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.k == 0 {
            return Err(Error::InvalidParam("k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidParam(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        match &self.augmentation {
            Augmentation::None => {}
            Augmentation::RootShift(offsets) => {
                if self.params.kind != DescriptorKind::Polar {
                    return Err(Error::InvalidParam("root-shift augmentation needs polar descriptors".into()));
                }
                if offsets.iter().any(|d| !d.is_finite()) {
                    return Err(Error::InvalidParam("root-shift offsets must be finite".into()));
                }
            }
            Augmentation::DoubleFlip => {
                if self.params.kind != DescriptorKind::Cartesian {
                    return Err(Error::InvalidParam("double-flip augmentation needs Cartesian descriptors".into()));
                }
            }
        }
        match self.rebuild {
            RebuildPolicy::EveryInsertions(0) => {
                return Err(Error::InvalidParam("rebuild interval must be at least 1 insertion".into()))
            }
            RebuildPolicy::Interval(d) if d.is_zero() => {
                return Err(Error::InvalidParam("rebuild interval must be positive".into()))
            }
            _ => {}
        }
        if let Some(leaf) = self.voxel_leaf {
            if !(leaf > 0.0 && leaf.is_finite()) {
                return Err(Error::InvalidParam(format!("voxel leaf must be positive, got {leaf}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PlaceEntry {
    pub place_id: PlaceId,
    pub descriptor: ScanContextDescriptor,
    pub retrieval_key: RetrievalKey,
    pub aligning_key: AligningKey,
}

impl PlaceEntry {
    fn new(place_id: PlaceId, descriptor: ScanContextDescriptor) -> Self {
        Self {
            place_id,
            retrieval_key: descriptor::retrieval_key(&descriptor),
            aligning_key: descriptor::aligning_key(&descriptor),
            descriptor,
        }
    }

    pub fn augmentation(&self) -> AugmentationTag {
        self.descriptor.tag()
    }
}

/// Descriptors and keys of one scan, ready to query with or insert.
#[derive(Clone, Debug)]
pub struct QueryDescriptor {
    pub descriptor: ScanContextDescriptor,
    pub retrieval_key: RetrievalKey,
    pub aligning_key: AligningKey,
}

impl QueryDescriptor {
    pub fn new(descriptor: ScanContextDescriptor) -> Self {
        Self {
            retrieval_key: descriptor::retrieval_key(&descriptor),
            aligning_key: descriptor::aligning_key(&descriptor),
            descriptor,
        }
    }
}

/// The original descriptor of a scan plus its augmented variants. Building
/// one is pure, so callers may prepare many scans in parallel.
#[derive(Clone, Debug)]
pub struct PreparedPlace {
    pub descriptors: Vec<ScanContextDescriptor>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Candidate {
    pub entry: usize,
    pub place_id: PlaceId,
    /// Euclidean retrieval-key distance.
    pub key_distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub place_id: PlaceId,
    pub distance: f64,
    pub shift: usize,
    pub pose: SemiMetricPose,
    /// Which stored variant matched. For a root-shifted polar entry the yaw
    /// is relative to that virtual viewpoint; for a double-flipped Cartesian
    /// entry the map is seen with the opposite heading.
    pub augmentation: AugmentationTag,
    pub entry: usize,
    pub candidates: Vec<Candidate>,
}

impl MatchResult {
    /// Lateral offset (meters, positive left) of the matched virtual
    /// viewpoint, for root-shifted polar entries.
    pub fn root_offset(&self) -> Option<f64> {
        match self.augmentation {
            AugmentationTag::RootShift(d) => Some(d),
            _ => None,
        }
    }
}

/// A double-flipped entry sees the map with both axes reversed, so its
/// lateral estimate is negated back into the map frame. Root shifts only
/// move the viewpoint and leave the yaw unchanged.
fn augmented_pose(pose: SemiMetricPose, tag: AugmentationTag) -> SemiMetricPose {
    match (pose, tag) {
        (SemiMetricPose::Lateral(v), AugmentationTag::DoubleFlip) if v != 0.0 => SemiMetricPose::Lateral(-v),
        _ => pose,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum QueryOutcome {
    Match(MatchResult),
    /// Nothing under `tau`; `closest` is the best candidate, if any survived
    /// the exclusion window.
    NoMatch { closest: Option<MatchResult> },
}

impl QueryOutcome {
    pub fn matched(&self) -> Option<&MatchResult> {
        match self {
            QueryOutcome::Match(m) => Some(m),
            QueryOutcome::NoMatch { .. } => None,
        }
    }

    /// The best candidate regardless of the threshold.
    pub fn best(&self) -> Option<&MatchResult> {
        match self {
            QueryOutcome::Match(m) => Some(m),
            QueryOutcome::NoMatch { closest } => closest.as_ref(),
        }
    }
}

/// Wall-clock time spent in each query stage.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimings {
    pub describe: Duration,
    pub tree: Duration,
    pub align: Duration,
    pub total: Duration,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RebuildStats {
    pub count: usize,
    pub total: Duration,
}

#[derive(Debug)]
pub struct PlaceDatabase {
    config: DatabaseConfig,
    entries: Vec<PlaceEntry>,
    /// Built over `entries[..indexed]`.
    index: Arc<KdTree>,
    indexed: usize,
    insertions_since_rebuild: usize,
    last_rebuild: Instant,
    last_id: Option<PlaceId>,
    stats: RebuildStats,
}

impl PlaceDatabase {
    pub fn new(config: DatabaseConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            index: Arc::new(KdTree::empty(config.params.n_r)),
            config,
            entries: Vec::new(),
            indexed: 0,
            insertions_since_rebuild: 0,
            last_rebuild: Instant::now(),
            last_id: None,
            stats: RebuildStats::default(),
        })
    }

    pub fn config(&self) -> &DatabaseConfig {
        &self.config
    }

    /// Changes the query-time knobs; descriptor parameters and augmentation
    /// are fixed once entries exist.
    pub fn set_query_options(&mut self, k: usize, tau: f64, half_width: usize) -> Result<()> {
        let mut next = self.config.clone();
        next.k = k;
        next.tau = tau;
        next.half_width = half_width;
        next.validate()?;
        self.config = next;
        Ok(())
    }

    pub fn set_exclusion_window(&mut self, window: u64) {
        self.config.exclusion_window = window;
    }

    pub fn entries(&self) -> &[PlaceEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn original_count(&self) -> usize {
        self.entries.iter().filter(|e| e.augmentation().is_original()).count()
    }

    pub fn augmented_count(&self) -> usize {
        self.len() - self.original_count()
    }

    pub fn pending(&self) -> usize {
        self.entries.len() - self.indexed
    }

    pub fn indexed(&self) -> usize {
        self.index.len()
    }

    pub fn rebuild_stats(&self) -> RebuildStats {
        self.stats
    }

    fn preprocess(&self, cloud: &PointCloud) -> Result<PointCloud> {
        match self.config.voxel_leaf {
            Some(leaf) => pointcloud::voxel_downsample(cloud, leaf),
            None => Ok(cloud.clone()),
        }
    }

    /// Downsamples and describes a scan for querying.
    pub fn describe(&self, cloud: &PointCloud) -> Result<QueryDescriptor> {
        let cloud = self.preprocess(cloud)?;
        Ok(QueryDescriptor::new(descriptor::make_descriptor(&cloud, &self.config.params)?))
    }

    /// Downsamples a scan and builds its original and augmented descriptors.
    pub fn prepare(&self, cloud: &PointCloud) -> Result<PreparedPlace> {
        let cloud = self.preprocess(cloud)?;
        let params = &self.config.params;
        let original = descriptor::make_descriptor(&cloud, params)?;
        let mut descriptors = Vec::with_capacity(1 + self.config.augmentation.extra_entries());
        match &self.config.augmentation {
            Augmentation::None => descriptors.push(original),
            Augmentation::RootShift(offsets) => {
                descriptors.push(original);
                for (shifted, &d) in descriptor::root_shift_clouds(&cloud, offsets)?.iter().zip(offsets) {
                    descriptors.push(
                        descriptor::make_descriptor(shifted, params)?.with_tag(AugmentationTag::RootShift(d)),
                    );
                }
            }
            Augmentation::DoubleFlip => {
                let flipped = descriptor::double_flip(&original)?;
                descriptors.push(original);
                descriptors.push(flipped);
            }
        }
        Ok(PreparedPlace { descriptors })
    }

    pub fn add_place(&mut self, cloud: &PointCloud, place_id: PlaceId) -> Result<()> {
        self.check_order(place_id)?;
        let prepared = self.prepare(cloud)?;
        self.insert_prepared(prepared, place_id)
    }

    /// Inserts descriptors built by [`prepare`](Self::prepare) (or by hand;
    /// they must match the database's descriptor parameters).
    pub fn insert_prepared(&mut self, place: PreparedPlace, place_id: PlaceId) -> Result<()> {
        self.check_order(place_id)?;
        if let Some(d) = place.descriptors.iter().find(|d| d.params() != &self.config.params) {
            return Err(Error::Shape(format!(
                "descriptor {} {}x{} does not match the database parameters",
                d.kind(),
                d.rows(),
                d.cols()
            )));
        }
        self.entries
            .extend(place.descriptors.into_iter().map(|d| PlaceEntry::new(place_id, d)));
        self.last_id = Some(place_id);
        self.insertions_since_rebuild += 1;
        let due = match self.config.rebuild {
            RebuildPolicy::EveryInsertions(n) => self.insertions_since_rebuild >= n,
            RebuildPolicy::Interval(d) => self.last_rebuild.elapsed() >= d,
        };
        if due {
            self.rebuild_index();
        }
        Ok(())
    }

    fn check_order(&self, place_id: PlaceId) -> Result<()> {
        match self.last_id {
            Some(last) if place_id <= last => Err(Error::Order { got: place_id, last }),
            _ => Ok(()),
        }
    }

    /// Rebuilds the tree over every entry and swaps it in whole.
    pub fn rebuild_index(&mut self) {
        let start = Instant::now();
        let dim = self.config.params.n_r;
        let tree = KdTree::build(
            dim,
            self.entries
                .iter()
                .enumerate()
                .map(|(i, e)| (i, e.retrieval_key.values())),
        );
        self.index = Arc::new(tree);
        self.indexed = self.entries.len();
        self.insertions_since_rebuild = 0;
        self.last_rebuild = Instant::now();
        self.stats.count += 1;
        self.stats.total += start.elapsed();
    }

    pub fn query(&self, cloud: &PointCloud, query_id: Option<PlaceId>) -> Result<QueryOutcome> {
        Ok(self.query_timed(cloud, query_id)?.0)
    }

    pub fn query_timed(
        &self,
        cloud: &PointCloud,
        query_id: Option<PlaceId>,
    ) -> Result<(QueryOutcome, StageTimings)> {
        if self.entries.is_empty() {
            return Err(Error::EmptyDatabase);
        }
        let start = Instant::now();
        let q = self.describe(cloud)?;
        let describe = start.elapsed();
        let (outcome, mut timings) = self.query_descriptor_timed(&q, query_id)?;
        timings.describe = describe;
        timings.total = start.elapsed();
        Ok((outcome, timings))
    }

    /// Queries with an already-built descriptor. With `query_id` set, places
    /// within the exclusion window of it are skipped.
    pub fn query_descriptor(&self, q: &QueryDescriptor, query_id: Option<PlaceId>) -> Result<QueryOutcome> {
        Ok(self.query_descriptor_timed(q, query_id)?.0)
    }

    fn query_descriptor_timed(
        &self,
        q: &QueryDescriptor,
        query_id: Option<PlaceId>,
    ) -> Result<(QueryOutcome, StageTimings)> {
        if self.entries.is_empty() {
            return Err(Error::EmptyDatabase);
        }
        if q.descriptor.params() != &self.config.params {
            return Err(Error::Shape("query descriptor parameters differ from the database".into()));
        }
        let mut timings = StageTimings::default();
        let t0 = Instant::now();
        let candidates = self.retrieve(&q.retrieval_key, query_id);
        timings.tree = t0.elapsed();

        let t1 = Instant::now();
        let mut best: Option<MatchResult> = None;
        if !candidates.is_empty() {
            let qc = Columns::new(&q.descriptor);
            for cand in &candidates {
                let entry = &self.entries[cand.entry];
                let mc = Columns::new(&entry.descriptor);
                let aligned = distance::fast_align_prepared(
                    &qc,
                    &mc,
                    &q.aligning_key,
                    &entry.aligning_key,
                    self.config.half_width,
                )?;
                if best.as_ref().is_none_or(|b| aligned.distance < b.distance) {
                    best = Some(MatchResult {
                        place_id: entry.place_id,
                        distance: aligned.distance,
                        shift: aligned.shift,
                        pose: augmented_pose(
                            distance::shift_to_pose(aligned.shift, &self.config.params)?,
                            entry.augmentation(),
                        ),
                        augmentation: entry.augmentation(),
                        entry: cand.entry,
                        candidates: Vec::new(),
                    });
                }
            }
        }
        timings.align = t1.elapsed();
        timings.total = t0.elapsed();

        let outcome = match best {
            Some(mut m) => {
                m.candidates = candidates;
                if m.distance < self.config.tau {
                    QueryOutcome::Match(m)
                } else {
                    QueryOutcome::NoMatch { closest: Some(m) }
                }
            }
            None => QueryOutcome::NoMatch { closest: None },
        };
        Ok((outcome, timings))
    }

    fn retrieve(&self, key: &RetrievalKey, query_id: Option<PlaceId>) -> Vec<Candidate> {
        let window = self.config.exclusion_window;
        let entries = &self.entries;
        let keep = |i: usize| match query_id {
            Some(q) => entries[i].place_id.abs_diff(q) > window,
            None => true,
        };
        let k = self.config.k;
        let mut best: Vec<Neighbor> = self.index.knn(key.values(), k, keep);
        for (i, entry) in entries.iter().enumerate().skip(self.indexed) {
            if keep(i) {
                let d: f64 = entry
                    .retrieval_key
                    .values()
                    .iter()
                    .zip(key.values())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                kdtree::push_bounded(&mut best, k, (d, i));
            }
        }
        best.into_iter()
            .map(|(d, i)| Candidate {
                entry: i,
                place_id: entries[i].place_id,
                key_distance: d.sqrt(),
            })
            .collect()
    }

    /// Writes the configuration and every entry; the index is rebuilt on load.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf).map_err(|e| Error::io_at(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io_at(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        write_config(w, &self.config)?;
        w.write_u64::<LittleEndian>(self.entries.len() as u64)?;
        for e in &self.entries {
            w.write_u64::<LittleEndian>(e.place_id)?;
            e.descriptor.write_record(w)?;
        }
        Ok(())
    }

    /// Reads a complete database; trailing bytes are an error.
    pub fn read_from(r: &mut &[u8]) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(Error::Version("not a place database file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version(format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let config = read_config(r)?;
        let mut db = PlaceDatabase::new(config)?;
        let count = r.read_u64::<LittleEndian>()?;
        let record = 8 + 14 + 4 * db.config.params.n_r * db.config.params.n_a;
        if count.saturating_mul(record as u64) > r.len() as u64 {
            return Err(Error::Io(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated entry table")));
        }
        let mut last: Option<PlaceId> = None;
        for _ in 0..count {
            let place_id = r.read_u64::<LittleEndian>()?;
            if last.is_some_and(|l| place_id < l) {
                return Err(Error::Format("entry place ids are not sorted".into()));
            }
            last = Some(place_id);
            let d = ScanContextDescriptor::read_record(r, &db.config.params)?;
            db.entries.push(PlaceEntry::new(place_id, d));
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", r.len())));
        }
        db.last_id = last;
        db.rebuild_index();
        db.stats = RebuildStats::default();
        Ok(db)
    }
}

fn write_config<W: Write>(w: &mut W, c: &DatabaseConfig) -> Result<()> {
    let p = &c.params;
    w.write_u8(p.kind.to_byte())?;
    for v in [p.r_range.0, p.r_range.1, p.a_range.0, p.a_range.1] {
        w.write_f64::<LittleEndian>(v)?;
    }
    w.write_u32::<LittleEndian>(p.n_r as u32)?;
    w.write_u32::<LittleEndian>(p.n_a as u32)?;
    w.write_f64::<LittleEndian>(p.height_offset)?;
    w.write_u32::<LittleEndian>(u32::try_from(c.k).map_err(|_| Error::InvalidParam("k too large".into()))?)?;
    w.write_f64::<LittleEndian>(c.tau)?;
    w.write_u64::<LittleEndian>(c.exclusion_window)?;
    match &c.augmentation {
        Augmentation::None => w.write_u8(0)?,
        Augmentation::RootShift(offsets) => {
            w.write_u8(1)?;
            w.write_u32::<LittleEndian>(offsets.len() as u32)?;
            for d in offsets {
                w.write_f64::<LittleEndian>(*d)?;
            }
        }
        Augmentation::DoubleFlip => w.write_u8(2)?,
    }
    match c.rebuild {
        RebuildPolicy::EveryInsertions(n) => {
            w.write_u8(0)?;
            w.write_u64::<LittleEndian>(n as u64)?;
        }
        RebuildPolicy::Interval(d) => {
            w.write_u8(1)?;
            w.write_u64::<LittleEndian>(d.as_millis() as u64)?;
        }
    }
    w.write_u32::<LittleEndian>(
        u32::try_from(c.half_width).map_err(|_| Error::InvalidParam("half width too large".into()))?,
    )?;
    match c.voxel_leaf {
        Some(leaf) => {
            w.write_u8(1)?;
            w.write_f64::<LittleEndian>(leaf)?;
        }
        None => {
            w.write_u8(0)?;
            w.write_f64::<LittleEndian>(0.0)?;
        }
    }
    Ok(())
}

fn read_config(r: &mut &[u8]) -> Result<DatabaseConfig> {
    let kind = DescriptorKind::from_byte(r.read_u8()?)?;
    let mut ranges = [0.0f64; 4];
    r.read_f64_into::<LittleEndian>(&mut ranges)?;
    let n_r = r.read_u32::<LittleEndian>()? as usize;
    let n_a = r.read_u32::<LittleEndian>()? as usize;
    let height_offset = r.read_f64::<LittleEndian>()?;
    let params = DescriptorParams {
        kind,
        r_range: (ranges[0], ranges[1]),
        a_range: (ranges[2], ranges[3]),
        n_r,
        n_a,
        height_offset,
    };
    let k = r.read_u32::<LittleEndian>()? as usize;
    let tau = r.read_f64::<LittleEndian>()?;
    let exclusion_window = r.read_u64::<LittleEndian>()?;
    let augmentation = match r.read_u8()? {
        0 => Augmentation::None,
        1 => {
            let n = r.read_u32::<LittleEndian>()? as usize;
            if n * 8 > r.len() {
                return Err(Error::Io(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated config")));
            }
            let mut offsets = vec![0.0; n];
            r.read_f64_into::<LittleEndian>(&mut offsets)?;
            Augmentation::RootShift(offsets)
        }
        2 => Augmentation::DoubleFlip,
        t => return Err(Error::Format(format!("unknown augmentation {t}"))),
    };
    let rebuild = match (r.read_u8()?, r.read_u64::<LittleEndian>()?) {
        (0, n) => RebuildPolicy::EveryInsertions(n as usize),
        (1, ms) => RebuildPolicy::Interval(Duration::from_millis(ms)),
        (t, _) => return Err(Error::Format(format!("unknown rebuild policy {t}"))),
    };
    let half_width = r.read_u32::<LittleEndian>()? as usize;
    let voxel_leaf = match (r.read_u8()?, r.read_f64::<LittleEndian>()?) {
        (0, _) => None,
        (1, leaf) => Some(leaf),
        (t, _) => return Err(Error::Format(format!("unknown voxel flag {t}"))),
    };
    let config = DatabaseConfig {
        params,
        k,
        tau,
        exclusion_window,
        augmentation,
        rebuild,
        half_width,
        voxel_leaf,
    };
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distance::brute_force_align;
    use crate::pointcloud::{Point3, RigidTransform};
    use crate::synth::SyntheticWorld;

    fn polar_config() -> DatabaseConfig {
        let mut c = DatabaseConfig::new(DescriptorKind::Polar);
        c.exclusion_window = 0;
        c
    }

    fn world() -> SyntheticWorld {
        SyntheticWorld::corridor(42, 400.0)
    }

    #[test]
    fn config_validation() {
        let mut c = polar_config();
        assert!(c.validate().is_ok());
        c.k = 0;
        assert!(c.validate().is_err());
        c = polar_config();
        c.tau = 1.5;
        assert!(c.validate().is_err());
        c = polar_config();
        c.augmentation = Augmentation::DoubleFlip;
        assert!(c.validate().is_err());
        c = DatabaseConfig::new(DescriptorKind::Cartesian);
        c.augmentation = Augmentation::RootShift(vec![2.0]);
        assert!(c.validate().is_err());
        c = polar_config();
        c.rebuild = RebuildPolicy::EveryInsertions(0);
        assert!(PlaceDatabase::new(c).is_err());
    }

    #[test]
    fn augmentation_entry_counts() {
        let scan = world().scan_at(10.0, 0.0, 0.0);
        let mut db = PlaceDatabase::new(polar_config().with_default_augmentation()).unwrap();
        db.add_place(&scan, 0).unwrap();
        assert_eq!((db.len(), db.original_count(), db.augmented_count()), (3, 1, 2));
        assert!(db.entries().iter().all(|e| e.place_id == 0));

        let mut db = PlaceDatabase::new(DatabaseConfig::new(DescriptorKind::Cartesian).with_default_augmentation()).unwrap();
        db.add_place(&scan, 0).unwrap();
        assert_eq!(db.len(), 2);
        assert_eq!(db.entries()[1].augmentation(), AugmentationTag::DoubleFlip);

        let mut db = PlaceDatabase::new(polar_config()).unwrap();
        db.add_place(&scan, 0).unwrap();
        assert_eq!(db.len(), 1);
    }

    #[test]
    fn reversed_cartesian_query_hits_flipped_entry() {
        let w = world();
        let mut config = DatabaseConfig::new(DescriptorKind::Cartesian).with_default_augmentation();
        config.exclusion_window = 0;
        let mut plain = config.clone();
        plain.augmentation = Augmentation::None;
        let mut db = PlaceDatabase::new(config).unwrap();
        let mut db_plain = PlaceDatabase::new(plain).unwrap();
        for (i, x) in [40.0, 120.0, 200.0].into_iter().enumerate() {
            db.add_place(&w.scan_at(x, 0.0, 0.0), i as u64).unwrap();
            db_plain.add_place(&w.scan_at(x, 0.0, 0.0), i as u64).unwrap();
        }
        // Driving the other way, 4 m to the map's left.
        let q = w.scan_at(120.0, 4.0, 180.0);
        let m = db.query(&q, None).unwrap();
        let m = m.best().unwrap();
        assert_eq!((m.place_id, m.augmentation), (1, AugmentationTag::DoubleFlip));
        assert_eq!(m.pose, SemiMetricPose::Lateral(4.0));
        let plain_best = db_plain.query(&q, None).unwrap().best().unwrap().distance;
        assert!(m.distance <= plain_best);

        // A half-turn of a stored scan lands exactly on its flipped entry.
        let turned = w.scan_at(40.0, 0.0, 180.0);
        let m = db.query(&turned, None).unwrap();
        let m = m.matched().expect("match");
        assert_eq!((m.place_id, m.distance, m.augmentation), (0, 0.0, AugmentationTag::DoubleFlip));
        assert!(m.distance <= db_plain.query(&turned, None).unwrap().best().unwrap().distance);
    }

    #[test]
    fn root_shift_entry_reports_its_offset() {
        let w = world();
        let mut db = PlaceDatabase::new(polar_config().with_default_augmentation()).unwrap();
        db.add_place(&w.scan_at(100.0, 0.0, 0.0), 0).unwrap();
        let q = w.scan_at(100.0, 2.0, 30.0);
        let m = db.query(&q, None).unwrap();
        let m = m.matched().expect("match");
        assert_eq!(m.distance, 0.0);
        assert_eq!(m.root_offset(), Some(2.0));
        assert_eq!(m.pose, SemiMetricPose::Yaw(30.0));
    }

    #[test]
    fn place_ids_must_increase() {
        let scan = world().scan_at(10.0, 0.0, 0.0);
        let mut db = PlaceDatabase::new(polar_config()).unwrap();
        db.add_place(&scan, 5).unwrap();
        assert!(matches!(db.add_place(&scan, 5), Err(Error::Order { got: 5, last: 5 })));
        assert!(matches!(db.add_place(&scan, 2), Err(Error::Order { .. })));
        db.add_place(&scan, 6).unwrap();
    }

    #[test]
    fn entries_keys_are_consistent() {
        let mut db = PlaceDatabase::new(polar_config().with_default_augmentation()).unwrap();
        db.add_place(&world().scan_at(30.0, 0.0, 0.0), 1).unwrap();
        for e in db.entries() {
            assert_eq!(e.retrieval_key, descriptor::retrieval_key(&e.descriptor));
            assert_eq!(e.aligning_key, descriptor::aligning_key(&e.descriptor));
        }
    }

    #[test]
    fn query_on_empty_database_fails() {
        let db = PlaceDatabase::new(polar_config()).unwrap();
        assert!(matches!(db.query(&PointCloud::new(), Some(0)), Err(Error::EmptyDatabase)));
    }

    #[test]
    fn identical_scan_is_found() {
        let w = world();
        let mut db = PlaceDatabase::new(polar_config()).unwrap();
        for i in 0..8u64 {
            db.add_place(&w.scan_at(i as f64 * 20.0, 0.0, 0.0), i).unwrap();
        }
        let m = db.query(&w.scan_at(60.0, 0.0, 0.0), None).unwrap();
        let m = m.matched().expect("match");
        assert_eq!((m.place_id, m.distance, m.shift), (3, 0.0, 0));
        assert_eq!(m.pose, SemiMetricPose::Yaw(0.0));
    }

    #[test]
    fn rotated_place_reports_shift_and_yaw() {
        let w = world();
        let mut config = polar_config();
        config.voxel_leaf = None;
        let mut db = PlaceDatabase::new(config).unwrap();
        let base = w.scan_at(100.0, 0.0, 0.0);
        let stored = pointcloud::transform(&base, &RigidTransform::from_yaw_degrees(12.0));
        db.add_place(&w.scan_at(20.0, 0.0, 0.0), 0).unwrap();
        db.add_place(&stored, 1).unwrap();
        db.add_place(&w.scan_at(180.0, 0.0, 0.0), 2).unwrap();

        let m = db.query(&base, None).unwrap();
        let m = m.matched().expect("match");
        assert_eq!((m.place_id, m.shift), (1, 2));
        assert_eq!(m.pose, SemiMetricPose::Yaw(12.0));

        let oracle = brute_force_align(&db.describe(&base).unwrap().descriptor, &db.entries()[1].descriptor).unwrap();
        assert_eq!((oracle.shift, oracle.distance), (m.shift, m.distance));
    }

    #[test]
    fn threshold_rejects_far_matches() {
        let w = world();
        let mut config = polar_config();
        config.tau = 0.15;
        let mut db = PlaceDatabase::new(config).unwrap();
        db.add_place(&w.scan_at(0.0, 0.0, 0.0), 0).unwrap();
        // A sparse unrelated scan sits far from anything stored.
        let other = PointCloud::from_points(vec![Point3::new(5.0, 5.0, 3.0), Point3::new(-30.0, 2.0, 8.0)]).unwrap();
        match db.query(&other, None).unwrap() {
            QueryOutcome::NoMatch { closest: Some(c) } => assert!(c.distance >= 0.15),
            other => panic!("unexpected {other:?}"),
        }
        db.set_query_options(1, 0.0, 0).unwrap();
        let same = db.query(&w.scan_at(0.0, 0.0, 0.0), None).unwrap();
        assert!(same.matched().is_none(), "tau = 0 never accepts");
        assert_eq!(same.best().unwrap().distance, 0.0);
    }

    #[test]
    fn exclusion_window_is_respected() {
        let w = world();
        let mut config = polar_config();
        config.exclusion_window = 3;
        config.k = 4;
        let mut db = PlaceDatabase::new(config).unwrap();
        for i in 0..10u64 {
            db.add_place(&w.scan_at(30.0 + i as f64, 0.0, 0.0), i).unwrap();
        }
        for q in 0..14u64 {
            let out = db.query(&w.scan_at(35.0, 0.0, 0.0), Some(q)).unwrap();
            if let Some(best) = out.best() {
                assert!(best.place_id.abs_diff(q) > 3);
                assert!(best.candidates.iter().all(|c| c.place_id.abs_diff(q) > 3));
            }
        }
        // Everything excluded: no candidates at all.
        let mut config = polar_config();
        config.exclusion_window = 100;
        let mut db = PlaceDatabase::new(config).unwrap();
        db.add_place(&w.scan_at(0.0, 0.0, 0.0), 0).unwrap();
        assert_eq!(db.query(&w.scan_at(0.0, 0.0, 0.0), Some(5)).unwrap(), QueryOutcome::NoMatch { closest: None });
    }

    #[test]
    fn pending_entries_are_searched_and_rebuild_is_stable() {
        let w = world();
        let mut config = polar_config();
        config.rebuild = RebuildPolicy::EveryInsertions(1000);
        config.k = 3;
        let mut db = PlaceDatabase::new(config).unwrap();
        for i in 0..5u64 {
            db.add_place(&w.scan_at(i as f64 * 25.0, 0.0, 0.0), i).unwrap();
        }
        assert_eq!((db.pending(), db.indexed()), (5, 0));
        let q = w.scan_at(50.0, 0.0, 0.0);
        let before = db.query(&q, None).unwrap();
        assert_eq!(before.matched().unwrap().place_id, 2);
        db.rebuild_index();
        assert_eq!((db.pending(), db.indexed()), (0, 5));
        let after = db.query(&q, None).unwrap();
        assert_eq!(before, after);
        db.rebuild_index();
        assert_eq!(db.query(&q, None).unwrap(), after);
    }

    #[test]
    fn count_based_rebuild_fires() {
        let w = world();
        let mut config = polar_config();
        config.rebuild = RebuildPolicy::EveryInsertions(3);
        let mut db = PlaceDatabase::new(config).unwrap();
        let mut empty = PlaceDatabase::new(polar_config()).unwrap();
        empty.rebuild_index();
        assert_eq!(empty.indexed(), 0);
        for i in 0..7u64 {
            db.add_place(&w.scan_at(i as f64 * 10.0, 0.0, 0.0), i).unwrap();
        }
        assert_eq!(db.rebuild_stats().count, 2);
        assert_eq!((db.indexed(), db.pending()), (6, 1));
    }

    #[test]
    fn interval_rebuild_fires() {
        let w = world();
        let mut config = polar_config();
        config.rebuild = RebuildPolicy::Interval(Duration::from_millis(1));
        let mut db = PlaceDatabase::new(config).unwrap();
        std::thread::sleep(Duration::from_millis(3));
        db.add_place(&w.scan_at(0.0, 0.0, 0.0), 0).unwrap();
        assert_eq!(db.pending(), 0);
    }

    #[test]
    fn insert_prepared_checks_parameters() {
        let mut db = PlaceDatabase::new(polar_config()).unwrap();
        let cart = ScanContextDescriptor::zeros(DescriptorParams::default_for(DescriptorKind::Cartesian)).unwrap();
        assert!(matches!(
            db.insert_prepared(PreparedPlace { descriptors: vec![cart] }, 0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let w = world();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.scdb");

        let empty = PlaceDatabase::new(polar_config()).unwrap();
        empty.save(&path).unwrap();
        let back = PlaceDatabase::load(&path).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.config(), empty.config());

        let mut config = polar_config().with_default_augmentation();
        config.k = 2;
        config.rebuild = RebuildPolicy::Interval(Duration::from_secs(10));
        let mut db = PlaceDatabase::new(config).unwrap();
        for i in 0..6u64 {
            db.add_place(&w.scan_at(i as f64 * 30.0, 0.0, 0.0), i * 2).unwrap();
        }
        db.save(&path).unwrap();
        let back = PlaceDatabase::load(&path).unwrap();
        assert_eq!(back.config(), db.config());
        assert_eq!(back.len(), db.len());
        for (a, b) in back.entries().iter().zip(db.entries()) {
            assert_eq!(a.place_id, b.place_id);
            assert_eq!(a.descriptor, b.descriptor);
        }
        assert_eq!(back.pending(), 0);
        let q = w.scan_at(61.0, 0.5, 0.0);
        assert_eq!(back.query(&q, Some(100)).unwrap(), db.query(&q, Some(100)).unwrap());
        // Ordering continues from the restored ids.
        let mut back = back;
        assert!(back.add_place(&q, 10).is_err());
        back.add_place(&q, 11).unwrap();
    }

    #[test]
    fn load_rejects_damaged_files() {
        let w = world();
        let mut db = PlaceDatabase::new(polar_config()).unwrap();
        db.add_place(&w.scan_at(0.0, 0.0, 0.0), 0).unwrap();
        db.add_place(&w.scan_at(40.0, 0.0, 0.0), 1).unwrap();
        let mut bytes = Vec::new();
        db.write_to(&mut bytes).unwrap();

        for cut in [0, 3, 7, 20, 60, bytes.len() / 2, bytes.len() - 1] {
            let err = PlaceDatabase::read_from(&mut &bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Io(_) | Error::Version(_)), "cut {cut}: {err:?}");
        }
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(PlaceDatabase::read_from(&mut bad_magic.as_slice()), Err(Error::Version(_))));
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(PlaceDatabase::read_from(&mut bad_version.as_slice()), Err(Error::Version(_))));
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(PlaceDatabase::read_from(&mut trailing.as_slice()).is_err());
    }
}
