use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::control::{self, apply_high_level_action, Action, EgoControl};
use super::geometry::{
    wrap_tau, Arm, GeometryParams, LaneGeometry, LaneId, LaneKind, LaneRef, LaneShape, Vec2,
};
use super::idm::{idm_acceleration, IdmParams, Leader};
use super::vehicle::{Role, Vehicle, VEHICLE_LENGTH, VEHICLE_WIDTH};
use crate::error::{Error, Result};
use crate::reward::{step_reward, RewardIndicators, RewardWeights};

pub const PHYSICS_HZ: f64 = 15.0;
pub const DECISION_HZ: f64 = 2.0;
pub const MAX_DECISIONS: u32 = 22;
pub const MAX_VEHICLES: usize = 16;

const EGO_SPAWN_OFFSET: f64 = 125.0;
const EGO_SPAWN_SPEED: f64 = 8.0;
const BACKGROUND_SPEED_MEAN: f64 = 16.0;
const BACKGROUND_SPEED_STD: f64 = 0.1;
const POSITION_JITTER: f64 = 1.0;
const IDM_PERTURBATION: f64 = 0.1;
const EXITING_OFFSET: f64 = 50.0;
const EXITING_SPACING: f64 = 20.0;
const CIRCULATING_BACKOFF: f64 = 10.0;
const CIRCULATING_SPACING: f64 = 22.0;

/// Background lane changes are not bound by the ego's actuator limits.
const BACKGROUND_STEER_LIMIT: f64 = PI / 12.0;
const LEADER_HORIZON: f64 = 100.0;
/// Entering background vehicles wait this far before the merge point.
const STOP_LINE_BACKOFF: f64 = 6.0;
const YIELD_TIME: f64 = 3.0;
const YIELD_MIN_DISTANCE: f64 = 8.0;
const LANE_CHANGE_CLEARANCE: f64 = 10.0;

/// How many interacting vehicles a scenario contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InteractCount {
    Fixed(u8),
    /// Uniform over `0..=max`.
    Uniform { max: u8 },
}

impl InteractCount {
    /// The training distribution `U{0, ..., 4}`.
    pub const SAMPLE: InteractCount = InteractCount::Uniform { max: 4 };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOptions {
    pub interact: InteractCount,
    /// Overrides the sampled circulating count.
    pub circulating: Option<u8>,
    pub exiting: bool,
    pub geometry: GeometryParams,
}

impl ScenarioOptions {
    pub fn new(interact: InteractCount) -> Self {
        Self {
            interact,
            circulating: None,
            exiting: true,
            geometry: GeometryParams::default(),
        }
    }

    /// Ego alone on the road.
    pub fn empty() -> Self {
        Self {
            interact: InteractCount::Fixed(0),
            circulating: Some(0),
            exiting: false,
            geometry: GeometryParams::default(),
        }
    }
}

/// Independent random sub-streams of one world.
#[derive(Debug, Clone, PartialEq)]
pub struct RngStreams {
    pub spawn: ChaCha8Rng,
    pub idm_perturb: ChaCha8Rng,
    pub policy: ChaCha8Rng,
}

impl RngStreams {
    pub fn from_seed(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            rng
        };
        Self {
            spawn: stream(0),
            idm_perturb: stream(1),
            policy: stream(2),
        }
    }
}

/// Ego samples recorded at the end of each physics sub-step of a decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubstepTrace {
    pub len: usize,
    pub speed: [f64; 8],
    pub position: [Vec2; 8],
}

impl Default for SubstepTrace {
    fn default() -> Self {
        Self {
            len: 0,
            speed: [0.0; 8],
            position: [Vec2::default(); 8],
        }
    }
}

impl SubstepTrace {
    fn push(&mut self, speed: f64, position: Vec2) {
        self.speed[self.len] = speed;
        self.position[self.len] = position;
        self.len += 1;
    }

    pub fn speeds(&self) -> &[f64] {
        &self.speed[..self.len]
    }

    pub fn positions(&self) -> &[Vec2] {
        &self.position[..self.len]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub raw_reward: f64,
    pub reward: f64,
    pub indicators: RewardIndicators,
    pub control: EgoControl,
    pub trace: SubstepTrace,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub geometry: Arc<LaneGeometry>,
    pub seed: u64,
    pub t_sim: f64,
    pub decision_step: u32,
    pub substeps: u32,
    /// Ego first.
    pub vehicles: Vec<Vehicle>,
    pub ego_setpoint: f64,
    pub rng: RngStreams,
    pub collided: bool,
    pub ego_exited: bool,
    pub n_interact: u8,
    pub n_circulating: u8,
    pub rewards: RewardWeights,
}

pub fn build_scenario(seed: u64, interact: InteractCount) -> Result<WorldState> {
    build_scenario_with(seed, &ScenarioOptions::new(interact))
}

pub fn build_scenario_with(seed: u64, opts: &ScenarioOptions) -> Result<WorldState> {
    match opts.interact {
        InteractCount::Fixed(n) if n > 4 => {
            return Err(Error::invalid(format!("n_interact {n} outside [0, 4]")))
        }
        InteractCount::Uniform { max } if max > 4 => {
            return Err(Error::invalid(format!("n_interact range 0..={max} exceeds 4")))
        }
        _ => {}
    }
    if opts.circulating.is_some_and(|n| n > 2) {
        return Err(Error::invalid("circulating count outside [0, 2]"));
    }
    let geometry = Arc::new(LaneGeometry::new(opts.geometry));
    let mut rng = RngStreams::from_seed(seed);
    let n_interact = match opts.interact {
        InteractCount::Fixed(n) => n,
        InteractCount::Uniform { max } => rng.spawn.random_range(0..=max),
    };
    let n_circulating = match opts.circulating {
        Some(n) => n,
        None => rng.spawn.random_range(0..=2u8),
    };
    let speed_dist = Normal::new(BACKGROUND_SPEED_MEAN, BACKGROUND_SPEED_STD).expect("valid normal");
    let jitter = Normal::new(0.0, POSITION_JITTER).expect("valid normal");
    let exits = [Arm::North, Arm::East, Arm::West];

    let mut vehicles = Vec::with_capacity(1 + 2 + 4 + 2);
    let ego_lane = geometry.inbound(Arm::South);
    vehicles.push(Vehicle {
        id: 0,
        role: Role::Ego,
        lane_ref: LaneRef {
            lane: ego_lane,
            s: EGO_SPAWN_OFFSET,
        },
        lateral: 0.0,
        rel_heading: 0.0,
        position: Vec2::default(),
        heading: 0.0,
        speed: EGO_SPAWN_SPEED,
        length: VEHICLE_LENGTH,
        width: VEHICLE_WIDTH,
        destination: Some(Arm::North),
        prefers_inner: false,
        idm: IdmParams::default(),
        finished: false,
    });

    let background = |role: Role, lane_ref: LaneRef, destination: Arm, prefers_inner: bool, rng: &mut RngStreams| {
        let speed = speed_dist.sample(&mut rng.spawn);
        let mut idm = IdmParams::default();
        idm.max_accel *= rng.idm_perturb.random_range(1.0 - IDM_PERTURBATION..=1.0 + IDM_PERTURBATION);
        idm.time_gap *= rng.idm_perturb.random_range(1.0 - IDM_PERTURBATION..=1.0 + IDM_PERTURBATION);
        Vehicle {
            id: 0,
            role,
            lane_ref,
            lateral: 0.0,
            rel_heading: 0.0,
            position: Vec2::default(),
            heading: 0.0,
            speed,
            length: VEHICLE_LENGTH,
            width: VEHICLE_WIDTH,
            destination: Some(destination),
            prefers_inner,
            idm,
            finished: false,
        }
    };

    let west_in = geometry.inbound(Arm::West);
    let west_len = geometry.lane(west_in).length();
    for j in 0..n_circulating {
        let s = west_len - CIRCULATING_BACKOFF - CIRCULATING_SPACING * j as f64
            + jitter.sample(&mut rng.spawn);
        let dest = exits[rng.spawn.random_range(0..exits.len())];
        let inner = rng.spawn.random_bool(0.5);
        let lane_ref = LaneRef {
            lane: west_in,
            s: s.clamp(0.0, west_len - 1e-6),
        };
        vehicles.push(background(Role::Circulating, lane_ref, dest, inner, &mut rng));
    }

    let merge = geometry.merge_angle(Arm::South);
    for j in 0..n_interact {
        let upstream = (40.0 + 70.0 * j as f64 + rng.spawn.random_range(0.0..40.0)).to_radians();
        let outer = rng.spawn.random_bool(0.5);
        let radius = geometry.ring_radius(outer);
        let theta = merge - upstream + jitter.sample(&mut rng.spawn) / radius;
        let dest = exits[rng.spawn.random_range(0..exits.len())];
        let lane_ref = ring_ref(&geometry, outer, theta);
        vehicles.push(background(Role::Interacting, lane_ref, dest, !outer, &mut rng));
    }

    if opts.exiting {
        let east_out = geometry.outbound(Arm::East);
        for j in 0..2 {
            let s = EXITING_OFFSET + EXITING_SPACING * j as f64 + jitter.sample(&mut rng.spawn);
            let lane_ref = LaneRef { lane: east_out, s };
            vehicles.push(background(Role::Exiting, lane_ref, Arm::East, false, &mut rng));
        }
    }

    for (i, v) in vehicles.iter_mut().enumerate() {
        v.id = i as u32;
        v.refresh_pose(&geometry);
    }

    Ok(WorldState {
        geometry,
        seed,
        t_sim: 0.0,
        decision_step: 0,
        substeps: 0,
        vehicles,
        ego_setpoint: EGO_SPAWN_SPEED,
        rng,
        collided: false,
        ego_exited: false,
        n_interact,
        n_circulating,
        rewards: RewardWeights::default(),
    })
}

/// Lane reference of a ring position given by its world angle.
pub fn ring_ref(geometry: &LaneGeometry, outer: bool, theta: f64) -> LaneRef {
    for section in 0..8 {
        let id = geometry.ring(outer, section);
        if let LaneShape::Arc {
            radius,
            start_angle,
            sweep,
            ..
        } = geometry.lane(id).shape
        {
            let delta = wrap_tau(theta - start_angle);
            if delta < sweep {
                return LaneRef {
                    lane: id,
                    s: delta * radius,
                };
            }
        }
    }
    unreachable!("ring sections cover the full circle")
}

impl WorldState {
    pub fn ego(&self) -> &Vehicle {
        &self.vehicles[0]
    }

    pub fn is_terminal(&self) -> bool {
        self.collided || self.decision_step >= MAX_DECISIONS
    }

    /// Sub-steps executed by decision `k`: alternating 8 and 7 so that 22
    /// decisions take exactly 165 sub-steps.
    pub fn substeps_for(decision: u32) -> u32 {
        if decision % 2 == 0 {
            8
        } else {
            7
        }
    }

    pub(crate) fn change_ego_lane(&mut self, left: bool) {
        let geometry = Arc::clone(&self.geometry);
        let ego = &mut self.vehicles[0];
        let Some(target) = geometry.adjacent(ego.lane_ref.lane, left) else {
            return;
        };
        let (from, to) = (geometry.lane(ego.lane_ref.lane), geometry.lane(target));
        if let (LaneShape::Arc { radius: r0, .. }, LaneShape::Arc { radius: r1, .. }) = (from.shape, to.shape) {
            ego.lane_ref = LaneRef {
                lane: target,
                s: ego.lane_ref.s * r1 / r0,
            };
            // ccw ring: left-positive offset points inward, radius = R - d
            ego.lateral += r1 - r0;
        }
    }

    /// Advances one decision period under `action`.
    pub fn step_decision(&mut self, action: Action) -> Result<StepOutcome> {
        if self.is_terminal() {
            return Err(Error::InvalidState(format!(
                "step on terminal world (step {}, collided {})",
                self.decision_step, self.collided
            )));
        }
        let control = apply_high_level_action(action, self);
        let mut trace = SubstepTrace::default();
        for _ in 0..Self::substeps_for(self.decision_step) {
            self.physics_substep();
            let ego = self.ego();
            trace.push(ego.speed, ego.position);
            if self.collided {
                break;
            }
        }
        self.decision_step += 1;
        let indicators = RewardIndicators {
            collision: self.collided,
            speed: self.rewards.in_speed_band(self.ego().speed),
            lane_change: action.is_lane_change(),
        };
        let (raw_reward, reward) = step_reward(indicators, &self.rewards);
        Ok(StepOutcome {
            raw_reward,
            reward,
            indicators,
            control,
            trace,
            terminal: self.is_terminal(),
        })
    }

    fn physics_substep(&mut self) {
        let dt = 1.0 / PHYSICS_HZ;
        let n = self.vehicles.len();
        debug_assert!(n <= MAX_VEHICLES);
        let mut commands = [(0.0f64, 0.0f64); MAX_VEHICLES];
        for i in 0..n {
            if !self.vehicles[i].is_active() {
                continue;
            }
            commands[i] = if i == 0 {
                let c = control::ego_control(self);
                (c.accel, c.steer)
            } else {
                self.maybe_change_lane(i);
                self.background_command(i)
            };
        }
        let geometry = Arc::clone(&self.geometry);
        for (i, v) in self.vehicles.iter_mut().enumerate() {
            if v.is_active() {
                let dest = if i == 0 { Some(Arm::North) } else { v.destination };
                integrate(v, commands[i], dest, &geometry, dt);
            }
        }
        self.substeps += 1;
        self.t_sim = self.substeps as f64 / PHYSICS_HZ;
        if !self.ego_exited {
            self.collided = self.check_collision();
            if !self.collided && self.reached_exit() {
                self.ego_exited = true;
            }
        }
    }

    /// Ego footprint overlaps any other active vehicle.
    pub fn check_collision(&self) -> bool {
        let ego = self.ego();
        let fp = ego.footprint();
        let reach = (ego.length.hypot(ego.width)) / 2.0;
        self.vehicles[1..].iter().filter(|v| v.is_active()).any(|v| {
            let r = reach + v.length.hypot(v.width) / 2.0;
            (v.position - ego.position).norm() <= r && fp.overlaps(&v.footprint())
        })
    }

    /// Ego is on the north exit arm beyond the ring junction.
    pub fn reached_exit(&self) -> bool {
        matches!(
            self.geometry.lane(self.ego().lane_ref.lane).kind,
            LaneKind::Exit(Arm::North) | LaneKind::Outbound(Arm::North)
        )
    }

    fn background_command(&self, i: usize) -> (f64, f64) {
        let v = &self.vehicles[i];
        let mut leader = self.find_leader(i);
        if let Some(stop) = self.yield_stop(i) {
            if leader.is_none_or(|l| stop.gap < l.gap) {
                leader = Some(stop);
            }
        }
        let accel = idm_acceleration(v.speed, leader, &v.idm);
        let steer = control::pursuit_steer(v.lateral, BACKGROUND_STEER_LIMIT);
        (accel, steer)
    }

    /// Longitudinal position of vehicle `j` on `lane`, if it occupies it.
    fn occupancy(&self, j: usize, lane: LaneId) -> Option<f64> {
        let o = &self.vehicles[j];
        if o.lane_ref.lane == lane {
            return Some(o.lane_ref.s);
        }
        let target = self.geometry.lane(lane);
        let (LaneKind::Ring { .. }, LaneKind::Ring { .. }) =
            (target.kind, self.geometry.lane(o.lane_ref.lane).kind)
        else {
            return None;
        };
        let LaneShape::Arc { radius, .. } = target.shape else {
            return None;
        };
        let band = self.geometry.params.lane_width / 2.0 + o.width / 2.0;
        if (self.geometry.ring_distance(o.position) - radius).abs() >= band {
            return None;
        }
        let (s, _) = target.project(o.position);
        (s >= 0.0 && s < target.length()).then_some(s)
    }

    /// Nearest vehicle ahead along `i`'s route.
    fn find_leader(&self, i: usize) -> Option<Leader> {
        let me = &self.vehicles[i];
        let mut lane = me.lane_ref.lane;
        let mut base = -me.lane_ref.s;
        let mut best: Option<Leader> = None;
        while base < LEADER_HORIZON {
            for (j, o) in self.vehicles.iter().enumerate() {
                if j == i || !o.is_active() {
                    continue;
                }
                if let Some(s) = self.occupancy(j, lane) {
                    let dist = base + s;
                    if dist > 0.0 {
                        let gap = dist - (me.length + o.length) / 2.0;
                        if best.is_none_or(|b| gap < b.gap) {
                            best = Some(Leader { speed: o.speed, gap });
                        }
                    }
                }
            }
            if best.is_some() {
                break;
            }
            base += self.geometry.lane(lane).length();
            match self.geometry.next_lane(lane, me.destination) {
                Some(n) => lane = n,
                None => break,
            }
        }
        best
    }

    /// Virtual stopped leader at the stop line when ring traffic is about to pass the merge point.
    fn yield_stop(&self, i: usize) -> Option<Leader> {
        let me = &self.vehicles[i];
        let g = &self.geometry;
        let (arm, to_merge) = match g.lane(me.lane_ref.lane).kind {
            LaneKind::Entry(arm) => (arm, g.lane(me.lane_ref.lane).length() - me.lane_ref.s),
            LaneKind::Inbound(arm) => {
                let lane = g.lane(me.lane_ref.lane);
                (arm, lane.length() - me.lane_ref.s + g.lane(g.entry(arm)).length())
            }
            _ => return None,
        };
        let stop_gap = to_merge - STOP_LINE_BACKOFF - me.length / 2.0;
        if stop_gap < 0.5 || stop_gap > LEADER_HORIZON {
            return None;
        }
        let merge = g.merge_angle(arm);
        let ro = g.params.outer_radius;
        let band = g.params.lane_width / 2.0 + 1.0;
        let conflict = self.vehicles.iter().enumerate().any(|(j, o)| {
            if j == i || !o.is_active() {
                return false;
            }
            if !matches!(g.lane(o.lane_ref.lane).kind, LaneKind::Ring { .. }) {
                return false;
            }
            if (g.ring_distance(o.position) - ro).abs() >= band {
                return false;
            }
            let upstream = ro * wrap_tau(merge - g.ring_angle(o.position));
            let downstream = ro * TAU - upstream;
            upstream < (o.speed * YIELD_TIME).max(YIELD_MIN_DISTANCE) || downstream < o.length
        });
        conflict.then_some(Leader {
            speed: 0.0,
            gap: stop_gap,
        })
    }

    /// Background vehicles drift to their preferred ring lane and back to the
    /// outer lane ahead of their exit.
    fn maybe_change_lane(&mut self, i: usize) {
        let g = Arc::clone(&self.geometry);
        let v = &self.vehicles[i];
        let LaneKind::Ring { outer, section } = g.lane(v.lane_ref.lane).kind else {
            return;
        };
        if v.lateral.abs() > 0.3 {
            return;
        }
        let exiting_soon = v
            .destination
            .is_some_and(|d| g.sections_to_exit(section, d) <= 1);
        let want_outer = !v.prefers_inner || exiting_soon;
        if want_outer == outer {
            return;
        }
        let target = g.ring(want_outer, section);
        let (r0, r1) = (g.ring_radius(outer), g.ring_radius(want_outer));
        let s_target = v.lane_ref.s * r1 / r0;
        let tl = g.lane(target);
        let blocked = self.vehicles.iter().enumerate().any(|(j, o)| {
            if j == i || !o.is_active() {
                return false;
            }
            if (g.ring_distance(o.position) - r1).abs() >= g.params.lane_width / 2.0 + o.width / 2.0 {
                return false;
            }
            let (s, _) = tl.project(o.position);
            // compare along the ring in the target lane's frame
            let delta = s - s_target;
            let circ = TAU * r1;
            let delta = (delta + circ / 2.0).rem_euclid(circ) - circ / 2.0;
            delta.abs() < LANE_CHANGE_CLEARANCE
        });
        if blocked {
            return;
        }
        let v = &mut self.vehicles[i];
        v.lane_ref = LaneRef {
            lane: target,
            s: s_target,
        };
        v.lateral += r1 - r0;
    }
}

/// Moves a vehicle along its lanes for one sub-step.
fn integrate(v: &mut Vehicle, (accel, steer): (f64, f64), dest: Option<Arm>, g: &LaneGeometry, dt: f64) {
    let v0 = v.speed;
    let v1 = v0 + accel * dt;
    let dist = if v1 >= 0.0 {
        (v0 + v1) / 2.0 * dt
    } else {
        // stops inside the sub-step
        v0 * v0 / (-2.0 * accel)
    };
    v.speed = v1.max(0.0);
    v.rel_heading = steer;
    v.lateral += dist * steer.sin();
    let mut remaining = dist * steer.cos();
    loop {
        let lane = g.lane(v.lane_ref.lane);
        let factor = lane.progress_factor(v.lateral);
        let room = (lane.length() - v.lane_ref.s) / factor;
        if remaining < room {
            v.lane_ref.s += remaining * factor;
            break;
        }
        remaining -= room;
        match g.next_lane(v.lane_ref.lane, dest) {
            Some(next) => {
                v.lane_ref = LaneRef { lane: next, s: 0.0 };
            }
            None => {
                v.lane_ref.s = lane.length();
                if v.role == Role::Ego {
                    v.speed = 0.0;
                } else {
                    v.finished = true;
                }
                break;
            }
        }
    }
    v.refresh_pose(g);
}
