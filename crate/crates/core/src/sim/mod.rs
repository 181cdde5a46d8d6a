//! Receding-horizon simulation: scenario files, scripted world, the
//! closed planning loop, and executed-trajectory traces.

pub mod harness;
pub mod scenario;
pub mod trace;
pub mod world;

pub use harness::{
    assign_weights, branch_objects, build_nlp, build_zplan, crossing_probability,
    footprints_overlap, hard_scene, run_receding_horizon, yield_bound, BranchSelection,
    CycleOutcome, PlannerKind, Simulation,
};
pub use scenario::{ManeuverSpec, Scenario};
pub use trace::{metrics, CycleRecord, Metrics, SimTrace, TraceStep};
pub use world::{Scene, SceneObject, World};
