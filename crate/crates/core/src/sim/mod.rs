//! Two-lane roundabout simulator.

pub mod collision;
pub mod control;
pub mod geometry;
pub mod idm;
pub mod vehicle;
pub mod world;

pub use control::{Action, EgoControl, N_ACTIONS};
pub use geometry::{Arm, GeometryParams, LaneGeometry, LaneId, LaneKind, LaneRef, Vec2};
pub use vehicle::{Role, Vehicle};
pub use world::{
    build_scenario, build_scenario_with, InteractCount, ScenarioOptions, StepOutcome, SubstepTrace,
    WorldState, MAX_DECISIONS,
};
