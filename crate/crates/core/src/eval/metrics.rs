//! Precision/recall curves, recall-distribution histograms and divergence.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::ground_truth::{self, Pose, RevisitEvent};
use crate::error::{Error, Result};

/// Additive smoothing applied to every histogram cell before KL divergence.
pub const KL_EPSILON: f64 = 1e-9;
/// Histogram cell size: meters and degrees.
pub const DEFAULT_GRID: (f64, f64) = (0.5, 10.0);

/// The best candidate a query produced, if any.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryRecord {
    pub query_id: usize,
    pub distance: f64,
    pub match_id: Option<usize>,
}

impl QueryRecord {
    pub fn none(query_id: usize) -> Self {
        Self { query_id, distance: f64::INFINITY, match_id: None }
    }

    pub fn accepted(&self, tau: f64) -> bool {
        self.match_id.is_some() && self.distance < tau
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurveRow {
    pub tau: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub kld: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalCurve {
    pub rows: Vec<CurveRow>,
}

impl EvalCurve {
    pub fn max_f1(&self) -> Option<&CurveRow> {
        self.rows
            .iter()
            .fold(None, |best: Option<&CurveRow>, r| match best {
                Some(b) if b.f1 >= r.f1 => Some(b),
                _ => Some(r),
            })
    }

    /// Area under the precision-recall curve by the trapezoid rule. At equal
    /// recall the highest precision counts; the curve is extended flat to
    /// recall 0.
    pub fn auc(&self) -> f64 {
        let mut by_recall: BTreeMap<u64, f64> = BTreeMap::new();
        for r in &self.rows {
            let p = by_recall.entry(r.recall.to_bits()).or_insert(r.precision);
            *p = p.max(r.precision);
        }
        let pts: Vec<(f64, f64)> = by_recall.into_iter().map(|(k, p)| (f64::from_bits(k), p)).collect();
        let Some(&(r0, p0)) = pts.first() else {
            return 0.0;
        };
        let mut area = r0 * p0;
        for w in pts.windows(2) {
            area += (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0;
        }
        area
    }
}

/// `n` evenly spaced thresholds from `min` to `max` inclusive.
pub fn tau_sweep(min: f64, max: f64, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 || !(min.is_finite() && max.is_finite()) || min > max {
        return Err(Error::InvalidParam(format!("bad tau sweep {min}..{max} in {steps} steps")));
    }
    if steps == 1 {
        return Ok(vec![min]);
    }
    Ok((0..steps)
        .map(|i| min + (max - min) * i as f64 / (steps - 1) as f64)
        .collect())
}

/// Precision, recall and F1 per threshold, plus the divergence of the
/// detected-revisit distribution from the ground-truth one.
///
/// `records[i]` must describe query `i`; ids index `poses`, which use lidar
/// axes (see [`Pose::in_lidar_axes`]).
pub fn pr_curve(
    records: &[QueryRecord],
    poses: &[Pose],
    taus: &[f64],
    radius: f64,
    window: u64,
) -> Result<EvalCurve> {
    if records.len() != poses.len() || records.iter().enumerate().any(|(i, r)| r.query_id != i) {
        return Err(Error::Shape(format!(
            "{} query records for {} poses, or records out of order",
            records.len(),
            poses.len()
        )));
    }
    let truth = ground_truth::revisit_events(poses, radius, window);
    score(records, &truth, poses, taus, radius, window)
}

/// Multi-session variant: places `0..map_count` form the map and every
/// record is a query against it. Query ids index `poses` and must be at
/// least `map_count`.
pub fn pr_curve_split(
    records: &[QueryRecord],
    poses: &[Pose],
    map_count: usize,
    taus: &[f64],
    radius: f64,
) -> Result<EvalCurve> {
    if records.iter().any(|r| r.query_id < map_count || r.query_id >= poses.len()) {
        return Err(Error::Shape("query ids must follow the map places".into()));
    }
    let mut truth = Vec::with_capacity(records.len());
    for r in records {
        let q = &poses[r.query_id];
        let nearest = (0..map_count)
            .map(|m| (q.distance(&poses[m]), m))
            .filter(|&(d, _)| d < radius)
            .min_by(|a, b| a.0.total_cmp(&b.0));
        truth.push(match nearest {
            Some((_, m)) => Some(RevisitEvent::between(poses, r.query_id, m)?),
            None => None,
        });
    }
    score(records, &truth, poses, taus, radius, 0)
}

fn score(
    records: &[QueryRecord],
    truth: &[Option<RevisitEvent>],
    poses: &[Pose],
    taus: &[f64],
    radius: f64,
    window: u64,
) -> Result<EvalCurve> {
    let truth_hist = recall_histogram(truth.iter().flatten(), DEFAULT_GRID)?;
    let mut correct = Vec::with_capacity(records.len());
    for r in records {
        correct.push(match r.match_id {
            Some(m) => ground_truth::is_revisit(poses, r.query_id, m, radius, window)?,
            None => false,
        });
    }

    let mut rows = Vec::with_capacity(taus.len());
    for &tau in taus {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        let mut detected = Vec::new();
        for (i, r) in records.iter().enumerate() {
            if r.accepted(tau) {
                if correct[i] {
                    tp += 1;
                    detected.push(RevisitEvent::between(poses, r.query_id, r.match_id.expect("accepted"))?);
                } else {
                    fp += 1;
                }
            } else if truth[i].is_some() {
                fn_ += 1;
            }
        }
        let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        let kld = kl_divergence(&truth_hist, &recall_histogram(detected.iter(), DEFAULT_GRID)?)?;
        rows.push(CurveRow { tau, precision, recall, f1, kld, tp, fp, fn_ });
    }
    Ok(EvalCurve { rows })
}

/// Normalized 2D histogram over (translational, rotational) offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram2D {
    grid: (f64, f64),
    cells: BTreeMap<(i64, i64), f64>,
}

impl Histogram2D {
    pub fn grid(&self) -> (f64, f64) {
        self.grid
    }

    /// Non-empty cells, keyed by `(meter bin, degree bin)`.
    pub fn cells(&self) -> &BTreeMap<(i64, i64), f64> {
        &self.cells
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.cells.values().sum()
    }

    /// A histogram with explicit cell masses, normalized to sum to 1.
    pub fn from_cells(grid: (f64, f64), cells: impl IntoIterator<Item = ((i64, i64), f64)>) -> Result<Self> {
        check_grid(grid)?;
        let mut map = BTreeMap::new();
        for (k, v) in cells {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParam(format!("cell mass {v} is not a finite non-negative number")));
            }
            *map.entry(k).or_insert(0.0) += v;
        }
        let total: f64 = map.values().sum();
        if total > 0.0 {
            map.values_mut().for_each(|v| *v /= total);
        }
        Ok(Self { grid, cells: map })
    }
}

fn check_grid(grid: (f64, f64)) -> Result<()> {
    if !(grid.0 > 0.0 && grid.1 > 0.0 && grid.0.is_finite() && grid.1.is_finite()) {
        return Err(Error::InvalidParam(format!("histogram grid must be positive, got {grid:?}")));
    }
    Ok(())
}

pub fn recall_histogram<'a>(
    events: impl IntoIterator<Item = &'a RevisitEvent>,
    grid: (f64, f64),
) -> Result<Histogram2D> {
    check_grid(grid)?;
    let cells = events.into_iter().map(|e| {
        let key = (
            (e.translation_offset / grid.0).floor() as i64,
            (e.rotation_offset / grid.1).floor() as i64,
        );
        (key, 1.0)
    });
    Histogram2D::from_cells(grid, cells)
}

/// `KL(p_ref || q)` over the union of both supports, each cell smoothed by
/// [`KL_EPSILON`] and renormalized.
pub fn kl_divergence(p_ref: &Histogram2D, q: &Histogram2D) -> Result<f64> {
    if p_ref.grid != q.grid {
        return Err(Error::Shape(format!("histogram grids differ: {:?} vs {:?}", p_ref.grid, q.grid)));
    }
    let support: BTreeSet<&(i64, i64)> = p_ref.cells.keys().chain(q.cells.keys()).collect();
    if support.is_empty() {
        return Ok(0.0);
    }
    let n = support.len() as f64;
    let p_total = p_ref.total() + n * KL_EPSILON;
    let q_total = q.total() + n * KL_EPSILON;
    let mut kl = 0.0;
    for key in support {
        let p = (p_ref.cells.get(key).copied().unwrap_or(0.0) + KL_EPSILON) / p_total;
        let qv = (q.cells.get(key).copied().unwrap_or(0.0) + KL_EPSILON) / q_total;
        kl += p * (p / qv).ln();
    }
    Ok(kl.max(0.0))
}
