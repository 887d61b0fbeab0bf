//! End-to-end benchmark over a scan sequence with ground-truth poses.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::Serialize;
use serde_json::json;

use super::ground_truth::{self, GroundTruthFrame, Pose, DEFAULT_RADIUS, DEFAULT_SPACING};
use super::metrics::{self, CurveRow, EvalCurve, QueryRecord};
use crate::database::{DatabaseConfig, PlaceDatabase, StageTimings};
use crate::descriptor::AugmentationTag;
use crate::distance::SemiMetricPose;
use crate::error::{Error, Result};
use crate::pointcloud::{self, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TauSweep {
    pub min: f64,
    pub max: f64,
    pub steps: usize,
}

impl Default for TauSweep {
    fn default() -> Self {
        Self { min: 0.0, max: 1.0, steps: 50 }
    }
}

impl TauSweep {
    pub fn values(&self) -> Result<Vec<f64>> {
        metrics::tau_sweep(self.min, self.max, self.steps)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkConfig {
    pub database: DatabaseConfig,
    /// Equidistant sampling step, meters.
    pub spacing: f64,
    /// Correctness radius, meters.
    pub radius: f64,
    pub sweep: TauSweep,
    pub frame: GroundTruthFrame,
}

impl BenchmarkConfig {
    pub fn new(database: DatabaseConfig) -> Self {
        Self {
            database,
            spacing: DEFAULT_SPACING,
            radius: DEFAULT_RADIUS,
            sweep: TauSweep::default(),
            frame: GroundTruthFrame::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.database.validate()?;
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::InvalidParam(format!("radius must be positive, got {}", self.radius)));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::InvalidParam(format!("spacing must be positive, got {}", self.spacing)));
        }
        self.sweep.values().map(|_| ())
    }
}

/// One sampled query and its best candidate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatchRow {
    /// Sample ordinal, also the place id given to the database.
    pub query_id: usize,
    /// Index of the scan in the input sequence.
    pub frame: usize,
    pub match_id: Option<usize>,
    pub distance: Option<f64>,
    pub shift: Option<usize>,
    pub pose: Option<SemiMetricPose>,
    #[serde(skip)]
    pub augmentation: Option<AugmentationTag>,
    /// Whether the candidate is a true revisit.
    pub correct: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TimingRow {
    pub query_id: usize,
    pub describe_ms: f64,
    pub tree_ms: f64,
    pub align_ms: f64,
    pub total_ms: f64,
}

impl TimingRow {
    fn new(query_id: usize, t: &StageTimings) -> Self {
        let ms = |d: Duration| d.as_secs_f64() * 1e3;
        Self {
            query_id,
            describe_ms: ms(t.describe),
            tree_ms: ms(t.tree),
            align_ms: ms(t.align),
            total_ms: ms(t.total),
        }
    }
}

/// Mean absolute semi-metric pose error over true positives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PoseError {
    pub unit: &'static str,
    pub mean: Option<f64>,
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct Report {
    pub curve: EvalCurve,
    pub matches: Vec<MatchRow>,
    pub timings: Vec<TimingRow>,
    pub auc: f64,
    pub pose_error: PoseError,
    pub rebuilds: usize,
    pub rebuild_time: Duration,
    /// Wall-clock time spent adding places (including rebuilds).
    pub insert_time: Duration,
}

impl Report {
    pub fn max_f1(&self) -> Option<&CurveRow> {
        self.curve.max_f1()
    }

    pub fn pr_curve_csv(&self) -> String {
        let mut s = String::from("tau,precision,recall,f1,kld\n");
        for r in &self.curve.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.tau, r.precision, r.recall, r.f1, r.kld);
        }
        s
    }

    pub fn matches_csv(&self) -> String {
        let mut s = String::from("query_id,match_id,distance,shift,pose,correct\n");
        let opt = |v: Option<String>| v.unwrap_or_default();
        for m in &self.matches {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                m.query_id,
                opt(m.match_id.map(|v| v.to_string())),
                opt(m.distance.map(|v| v.to_string())),
                opt(m.shift.map(|v| v.to_string())),
                opt(m.pose.map(|p| p.value().to_string())),
                m.correct
            );
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("query_id,describe_ms,tree_ms,align_ms,total_ms\n");
        for t in &self.timings {
            let _ = writeln!(s, "{},{},{},{},{}", t.query_id, t.describe_ms, t.tree_ms, t.align_ms, t.total_ms);
        }
        s
    }

    pub fn report_json(&self) -> serde_json::Value {
        let stat = |f: fn(&TimingRow) -> f64| {
            let n = self.timings.len().max(1) as f64;
            let mean = self.timings.iter().map(f).sum::<f64>() / n;
            let max = self.timings.iter().map(f).fold(0.0, f64::max);
            json!({ "mean": mean, "max": max })
        };
        json!({
            "auc": self.auc,
            "max_f1": self.max_f1(),
            "queries": self.matches.len(),
            "timing_ms": {
                "describe": stat(|t| t.describe_ms),
                "tree": stat(|t| t.tree_ms),
                "align": stat(|t| t.align_ms),
                "total": stat(|t| t.total_ms),
            },
            "pose_error": self.pose_error,
            "rebuild": {
                "count": self.rebuilds,
                "total_ms": self.rebuild_time.as_secs_f64() * 1e3,
                "share_of_insert": if self.insert_time.is_zero() { 0.0 } else {
                    self.rebuild_time.as_secs_f64() / self.insert_time.as_secs_f64()
                },
            },
        })
    }

    /// Writes `pr_curve.csv`, `matches.csv`, `timing.csv` and `report.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
        let json = serde_json::to_string_pretty(&self.report_json()).map_err(|e| Error::Format(e.to_string()))?;
        for (name, body) in [
            ("pr_curve.csv", self.pr_curve_csv()),
            ("matches.csv", self.matches_csv()),
            ("timing.csv", self.timing_csv()),
            ("report.json", json + "\n"),
        ] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io_at(&path, e))?;
        }
        Ok(())
    }
}

/// Regular, non-hidden files of `dir` in lexicographic order.
pub fn list_scans(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io_at(dir, e))? {
        let entry = entry.map_err(|e| Error::io_at(dir, e))?;
        let path = entry.path();
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if !hidden && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads a scan directory and pose file and runs [`run_online`].
pub fn run_benchmark(scan_dir: impl AsRef<Path>, pose_file: impl AsRef<Path>, config: &BenchmarkConfig) -> Result<Report> {
    config.validate()?;
    let scans = list_scans(scan_dir)?;
    let poses = ground_truth::load_kitti_poses(pose_file)?;
    if scans.len() != poses.len() {
        return Err(Error::Alignment { scans: scans.len(), poses: poses.len() });
    }
    run_online(|i| pointcloud::load_scan(&scans[i]), &poses, config)
}

/// Online evaluation in SLAM order: each sampled scan is queried against
/// everything before it and then added. `load(i)` returns scan `i`; only
/// sampled scans are loaded.
pub fn run_online(
    mut load: impl FnMut(usize) -> Result<PointCloud>,
    poses: &[Pose],
    config: &BenchmarkConfig,
) -> Result<Report> {
    config.validate()?;
    let frames = ground_truth::equidistant_sample(poses, config.spacing)?;
    let sampled: Vec<Pose> = frames.iter().map(|&f| poses[f].in_lidar_axes(config.frame)).collect();
    let mut db = PlaceDatabase::new(config.database.clone())?;
    let mut outcomes = Vec::with_capacity(frames.len());
    let mut timings = Vec::with_capacity(frames.len());
    let mut insert_time = Duration::ZERO;
    for (q, &frame) in frames.iter().enumerate() {
        let cloud = load(frame)?;
        let (best, t) = timed_query(&db, &cloud, q as u64)?;
        outcomes.push(best);
        timings.push(TimingRow::new(q, &t));
        let start = Instant::now();
        db.add_place(&cloud, q as u64)?;
        insert_time += start.elapsed();
    }
    let window = config.database.exclusion_window;
    let records = records_from(&outcomes, 0);
    let curve = metrics::pr_curve(&records, &sampled, &config.sweep.values()?, config.radius, window)?;
    let stats = db.rebuild_stats();
    finish(config, &sampled, &frames, 0, outcomes, timings, curve, window, (stats.count, stats.total, insert_time))
}

/// Multi-session evaluation: every sampled map scan is added first, then
/// each sampled query scan is looked up without being added.
pub fn run_split(
    mut load_map: impl FnMut(usize) -> Result<PointCloud>,
    map_poses: &[Pose],
    mut load_query: impl FnMut(usize) -> Result<PointCloud>,
    query_poses: &[Pose],
    config: &BenchmarkConfig,
) -> Result<Report> {
    config.validate()?;
    let map_frames = ground_truth::equidistant_sample(map_poses, config.spacing)?;
    let query_frames = ground_truth::equidistant_sample(query_poses, config.spacing)?;
    let mut db_config = config.database.clone();
    db_config.exclusion_window = 0;
    let mut db = PlaceDatabase::new(db_config)?;
    let start = Instant::now();
    for (i, &f) in map_frames.iter().enumerate() {
        db.add_place(&load_map(f)?, i as u64)?;
    }
    db.rebuild_index();
    let insert_time = start.elapsed();
    let m = map_frames.len();
    let mut poses: Vec<Pose> = map_frames.iter().map(|&f| map_poses[f].in_lidar_axes(config.frame)).collect();
    poses.extend(query_frames.iter().map(|&f| query_poses[f].in_lidar_axes(config.frame)));
    let mut outcomes = Vec::with_capacity(query_frames.len());
    let mut timings = Vec::with_capacity(query_frames.len());
    for (j, &f) in query_frames.iter().enumerate() {
        let (best, t) = timed_query(&db, &load_query(f)?, (m + j) as u64)?;
        outcomes.push(best);
        timings.push(TimingRow::new(m + j, &t));
    }
    let records = records_from(&outcomes, m);
    let curve = metrics::pr_curve_split(&records, &poses, m, &config.sweep.values()?, config.radius)?;
    let stats = db.rebuild_stats();
    finish(config, &poses, &query_frames, m, outcomes, timings, curve, 0, (stats.count, stats.total, insert_time))
}

type Best = Option<(usize, f64, usize, SemiMetricPose, AugmentationTag)>;

fn timed_query(db: &PlaceDatabase, cloud: &PointCloud, id: u64) -> Result<(Best, StageTimings)> {
    if db.is_empty() {
        let start = Instant::now();
        db.describe(cloud)?;
        let describe = start.elapsed();
        return Ok((None, StageTimings { describe, total: describe, ..Default::default() }));
    }
    let (outcome, t) = db.query_timed(cloud, Some(id))?;
    let best = outcome
        .best()
        .map(|m| (m.place_id as usize, m.distance, m.shift, m.pose, m.augmentation));
    Ok((best, t))
}

fn records_from(outcomes: &[Best], first_id: usize) -> Vec<QueryRecord> {
    outcomes
        .iter()
        .enumerate()
        .map(|(i, b)| match b {
            Some((m, d, ..)) => QueryRecord { query_id: first_id + i, distance: *d, match_id: Some(*m) },
            None => QueryRecord::none(first_id + i),
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn finish(
    config: &BenchmarkConfig,
    poses: &[Pose],
    frames: &[usize],
    first_id: usize,
    outcomes: Vec<Best>,
    timings: Vec<TimingRow>,
    curve: EvalCurve,
    window: u64,
    (rebuilds, rebuild_time, insert_time): (usize, Duration, Duration),
) -> Result<Report> {
    let tau_star = curve.max_f1().map(|r| r.tau);
    let mut matches = Vec::with_capacity(outcomes.len());
    let (mut err_sum, mut err_count) = (0.0, 0);
    for (i, best) in outcomes.into_iter().enumerate() {
        let q = first_id + i;
        let mut row = MatchRow {
            query_id: q,
            frame: frames[i],
            match_id: None,
            distance: None,
            shift: None,
            pose: None,
            augmentation: None,
            correct: false,
        };
        if let Some((m, d, shift, pose, tag)) = best {
            row.correct = ground_truth::is_revisit(poses, q, m, config.radius, window)?;
            if row.correct && tau_star.is_some_and(|t| d < t) {
                err_sum += pose_error(&poses[q], &poses[m], pose, GroundTruthFrame::Lidar);
                err_count += 1;
            }
            row.match_id = Some(m);
            row.distance = Some(d);
            row.shift = Some(shift);
            row.pose = Some(pose);
            row.augmentation = Some(tag);
        }
        matches.push(row);
    }
    let unit = match config.database.params.kind {
        crate::descriptor::DescriptorKind::Polar => "deg",
        crate::descriptor::DescriptorKind::Cartesian => "m",
    };
    Ok(Report {
        auc: curve.auc(),
        curve,
        matches,
        timings,
        pose_error: PoseError {
            unit,
            mean: (err_count > 0).then(|| err_sum / err_count as f64),
            count: err_count,
        },
        rebuilds,
        rebuild_time,
        insert_time,
    })
}

/// Absolute error of an estimated pose against the ground-truth relative
/// pose of `query` with respect to `map`.
pub fn pose_error(query: &Pose, map: &Pose, estimate: SemiMetricPose, frame: GroundTruthFrame) -> f64 {
    let (yaw, lateral) = query.planar_offset_from(map, frame);
    match estimate {
        SemiMetricPose::Yaw(est) => {
            let d = (est - yaw).rem_euclid(360.0);
            d.min(360.0 - d)
        }
        SemiMetricPose::Lateral(est) => (est - lateral).abs(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::DescriptorKind;
    use crate::synth::{kitti_pose_row, SyntheticWorld};

    /// Ten scans: five places along a road, then the same five again.
    fn loop_fixture() -> (Vec<PointCloud>, Vec<Pose>) {
        let w = SyntheticWorld::corridor(11, 200.0);
        let xs = [0.0, 40.0, 80.0, 120.0, 160.0];
        let mut scans = Vec::new();
        let mut poses = Vec::new();
        for (i, &x) in xs.iter().chain(xs.iter()).enumerate() {
            scans.push(w.scan_at(x, 0.0, 0.0));
            poses.push(Pose::from_row(&kitti_pose_row(x, 0.0, 0.0), i as f64));
        }
        (scans, poses)
    }

    fn config() -> BenchmarkConfig {
        let mut db = DatabaseConfig::new(DescriptorKind::Polar);
        db.exclusion_window = 2;
        BenchmarkConfig::new(db)
    }

    #[test]
    fn loop_fixture_is_fully_recalled() {
        let (scans, poses) = loop_fixture();
        let report = run_online(|i| Ok(scans[i].clone()), &poses, &config()).unwrap();
        assert_eq!(report.timings.len(), 10);
        assert_eq!(report.matches.len(), 10);
        let tp: Vec<_> = report.matches.iter().filter(|m| m.correct).collect();
        assert_eq!(tp.len(), 5);
        for m in &tp {
            assert_eq!((m.match_id, m.distance), (Some(m.query_id - 5), Some(0.0)));
        }
        assert!(report.curve.rows.iter().any(|r| r.recall == 1.0 && r.tp == 5));
        assert!((report.auc - 1.0).abs() < 1e-12);
        assert_eq!(report.pose_error.mean, Some(0.0));
        assert_eq!(report.pose_error.count, 5);
    }

    #[test]
    fn outputs_have_expected_rows() {
        let (scans, poses) = loop_fixture();
        let report = run_online(|i| Ok(scans[i].clone()), &poses, &config()).unwrap();
        assert_eq!(report.pr_curve_csv().lines().count(), 51);
        assert_eq!(report.matches_csv().lines().count(), 11);
        assert_eq!(report.timing_csv().lines().count(), 11);
        let again = run_online(|i| Ok(scans[i].clone()), &poses, &config()).unwrap();
        assert_eq!(report.pr_curve_csv(), again.pr_curve_csv());
        assert_eq!(report.matches_csv(), again.matches_csv());
        let dir = tempfile::tempdir().unwrap();
        report.write(dir.path()).unwrap();
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(json["auc"], 1.0);
    }

    #[test]
    fn split_mode_matches_map_places() {
        let (scans, poses) = loop_fixture();
        let report = run_split(
            |i| Ok(scans[i].clone()),
            &poses[..5],
            |i| Ok(scans[5 + i].clone()),
            &poses[5..],
            &config(),
        )
        .unwrap();
        assert_eq!(report.matches.len(), 5);
        assert!(report.matches.iter().all(|m| m.correct && m.distance == Some(0.0)));
        assert!((report.auc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn count_mismatch_is_an_alignment_error() {
        let dir = tempfile::tempdir().unwrap();
        let (scans, _) = loop_fixture();
        for (i, s) in scans.iter().take(3).enumerate() {
            pointcloud::write_kitti_bin(dir.path().join(format!("{i:06}.bin")), s).unwrap();
        }
        let pose_file = dir.path().join("poses.txt");
        fs::write(&pose_file, "1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 1 0 1 0 0 0 0 1 0\n").unwrap();
        let scan_dir = dir.path().to_path_buf();
        // The pose file itself sits in another directory.
        let scans_only = tempfile::tempdir().unwrap();
        for f in list_scans(&scan_dir).unwrap().iter().filter(|p| p.extension().is_some_and(|e| e == "bin")) {
            fs::copy(f, scans_only.path().join(f.file_name().unwrap())).unwrap();
        }
        assert!(matches!(
            run_benchmark(scans_only.path(), &pose_file, &config()),
            Err(Error::Alignment { scans: 3, poses: 2 })
        ));
    }

    #[test]
    fn pose_error_wraps_yaw() {
        let map = Pose::from_row(&kitti_pose_row(0.0, 0.0, 175.0), 0.0);
        let q = Pose::from_row(&kitti_pose_row(0.0, 0.0, -175.0), 1.0);
        let e = pose_error(&q, &map, SemiMetricPose::Yaw(12.0), GroundTruthFrame::Camera);
        assert!((e - 2.0).abs() < 1e-9, "{e}");
        let e = pose_error(&q, &map, SemiMetricPose::Yaw(-348.0), GroundTruthFrame::Camera);
        assert!((e - 2.0).abs() < 1e-9, "{e}");
    }
}
