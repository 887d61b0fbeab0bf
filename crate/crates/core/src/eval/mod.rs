//! Ground truth, loop-closure metrics and the benchmark harness.
//!
//! Place ids in this module are sample ordinals after equidistant
//! subsampling, which is also how the benchmark numbers places in the
//! database, so the exclusion window counts sampled places.

mod benchmark;
mod ground_truth;
mod metrics;

pub use benchmark::{
    list_scans, pose_error, run_benchmark, run_online, run_split, BenchmarkConfig, MatchRow, PoseError, Report,
    TauSweep, TimingRow,
};
pub use ground_truth::{
    equidistant_sample, is_revisit, load_kitti_poses, parse_kitti_poses, revisit_events, GroundTruthFrame, Pose,
    RevisitEvent, DEFAULT_RADIUS, DEFAULT_SPACING,
};
pub use metrics::{
    kl_divergence, pr_curve, pr_curve_split, recall_histogram, tau_sweep, CurveRow, EvalCurve, Histogram2D,
    QueryRecord, DEFAULT_GRID, KL_EPSILON,
};
