//! Parameter-vector layout with pinning, maneuver-split views, and the
//! assembled weighted-maneuver trajectory program.

pub mod layout;
pub mod problem;

pub use layout::{
    shift_warm_start, Layout, ManeuverId, ParameterVector, SupportPoint, PT_DIM,
};
pub use problem::{
    cover_circles, ChanceMargins, ConstraintReport, EllipseObstacle, FallbackNoise,
    HardConstraintScene, ModelKind, PlannerConfig, PlannerNlp,
};
