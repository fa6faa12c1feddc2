//! High-level action to continuous control translation for the ego vehicle.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::world::WorldState;

/// Speed setpoint change per `acc`/`dec` action (m/s).
pub const SETPOINT_STEP: f64 = 2.0;
pub const SETPOINT_MAX: f64 = 16.0;
/// Proportional speed-tracking gain (1/s).
pub const SPEED_GAIN: f64 = 0.5;
/// Pure-pursuit lookahead distance (m).
pub const LOOKAHEAD: f64 = 10.0;
pub const ACCEL_LIMIT: f64 = 1.0;
pub const STEER_LIMIT: f64 = PI / 36.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Llc = 0,
    Rlc = 1,
    Acc = 2,
    Dec = 3,
    Cruise = 4,
}

pub const N_ACTIONS: usize = 5;

impl Action {
    pub const ALL: [Action; N_ACTIONS] = [
        Action::Llc,
        Action::Rlc,
        Action::Acc,
        Action::Dec,
        Action::Cruise,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    pub fn is_lane_change(self) -> bool {
        matches!(self, Action::Llc | Action::Rlc)
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Llc => "llc",
            Action::Rlc => "rlc",
            Action::Acc => "acc",
            Action::Dec => "dec",
            Action::Cruise => "cruise",
        }
    }
}

/// Continuous command: longitudinal acceleration (m/s²) and steering angle
/// relative to the lane tangent (rad).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EgoControl {
    pub accel: f64,
    pub steer: f64,
}

/// Latches `action` into the ego's setpoint / target lane and returns the
/// resulting control. Infeasible lane changes leave the lane untouched.
pub fn apply_high_level_action(action: Action, world: &mut WorldState) -> EgoControl {
    match action {
        Action::Acc => world.ego_setpoint = (world.ego_setpoint + SETPOINT_STEP).min(SETPOINT_MAX),
        Action::Dec => world.ego_setpoint = (world.ego_setpoint - SETPOINT_STEP).max(0.0),
        Action::Llc => world.change_ego_lane(true),
        Action::Rlc => world.change_ego_lane(false),
        Action::Cruise => {}
    }
    ego_control(world)
}

/// Tracking control for the currently latched setpoint and lane.
pub fn ego_control(world: &WorldState) -> EgoControl {
    let ego = world.ego();
    let accel = (SPEED_GAIN * (world.ego_setpoint - ego.speed)).clamp(-ACCEL_LIMIT, ACCEL_LIMIT);
    let steer = pursuit_steer(ego.lateral, STEER_LIMIT);
    EgoControl { accel, steer }
}

/// Pure pursuit toward the lane centerline `LOOKAHEAD` metres ahead.
pub(crate) fn pursuit_steer(lateral: f64, limit: f64) -> f64 {
    if lateral == 0.0 {
        return 0.0;
    }
    (-lateral).atan2(LOOKAHEAD).clamp(-limit, limit)
}
