//! Structural place recognition for range scans.
//!
//! A scan is summarized as a bird's-eye-view matrix (a *scan context*) whose
//! rows index range (polar) or longitudinal distance (Cartesian) and whose
//! columns index azimuth or lateral offset. Heading changes and lane changes
//! show up as circular column shifts, so matching reduces to finding the best
//! column alignment between two matrices.
//!
//! Recognition runs in three stages:
//!
//! 1. a k-d tree over column-order-invariant *retrieval keys* proposes
//!    candidate places,
//! 2. per-column *aligning keys* pre-estimate the column shift, which doubles
//!    as a 1-DOF pose (yaw or lateral offset),
//! 3. the full descriptor distance at that shift accepts or rejects the
//!    candidate.
//!
//! The [`eval`] module turns a sequence of scans and ground-truth poses into
//! precision/recall curves, recall-distribution histograms and timing tables.

pub mod database;
pub mod descriptor;
pub mod distance;
mod error;
pub mod eval;
mod kdtree;
pub mod pointcloud;
pub mod synth;

pub use database::{
    Augmentation, Candidate, DatabaseConfig, MatchResult, PlaceDatabase, PlaceEntry, PlaceId,
    PreparedPlace, QueryDescriptor, QueryOutcome, RebuildPolicy, RebuildStats, StageTimings,
};
pub use descriptor::{
    AligningKey, AugmentationTag, DescriptorKind, DescriptorParams, RetrievalKey,
    ScanContextDescriptor,
};
pub use distance::{AlignedDistance, SemiMetricPose};
pub use error::{Error, Result};
pub use pointcloud::{Point3, PointCloud, RigidTransform};
