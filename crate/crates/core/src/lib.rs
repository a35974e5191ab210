//! Anchor-free cooperative relative localization from pairwise ranges.
//!
//! Every unordered node pair is used once as a coordinate basis, producing a
//! redundant family of layouts. Layouts are moved into a common frame, fused
//! by least-squares agreement, and compared against each other to expose
//! nodes whose ranges are systematically wrong. A gradient-descent
//! positioning baseline and a seeded scenario simulator complete the
//! evaluation loop.

pub mod anomaly;
pub mod error;
pub mod fusion;
pub mod gd;
pub mod geometry;
pub mod harness;
pub mod layouts;
pub mod sim;

pub use anomaly::{
    detect, dispersion, dispersion_after_removal, per_node_error, per_node_spread, prune, AnomalyReport,
    DetectorParams, ThresholdMode,
};
pub use error::{Error, Result};
pub use fusion::{fuse, fuse_with_layouts, FusedEstimate, FusionParams, LayoutScore};
pub use gd::{
    gd_configuration_dispersion, gd_configurations, gd_gradient, gd_loss, gd_optimize, GdParams,
    GdResult,
};
pub use geometry::{
    best_rigid_align, lse, resolve_mirror, tof_distance, trilaterate, Point2, RigidTransform2,
    TimingPair, Trilateration, SPEED_OF_LIGHT,
};
pub use harness::{
    confusion, run_pipeline, trajectory_error, Confusion, Decision, EstimatorParams, EvalReport,
    Methods, PipelineConfig, TrajectoryError,
};
pub use layouts::{
    aligned_layouts, build_layout, enumerate_layouts, to_common_frame, AlignedLayoutSet,
    CommonFrame, Layout, RangeTable,
};
pub use sim::{
    generate_ranges, generate_truth, AnomalyConfig, AnomalyMode, Arena, GroundTruthLog,
    NlosConfig, SimScenario,
};
