//! Four-arm, two-lane roundabout laid out as a directed graph of lane primitives.
//!
//! Every lane is a straight segment or a circular arc parameterised by arc
//! length `s` along its centerline and a signed lateral offset `d` (positive
//! to the left of the travel direction). Circulation is counter-clockwise.
//! Each arm has an inbound line, an entry arc that joins the outer ring lane
//! tangentially, an exit arc leaving the outer ring lane tangentially, and an
//! outbound line. Both ring lanes are split into eight sections at the
//! junction angles so that lane ids stay aligned between inner and outer lane.

use std::f64::consts::{PI, TAU};
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(theta: f64) -> Self {
        Self::new(theta.cos(), theta.sin())
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3D cross product; positive when `o` is to the left of `self`.
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    /// Counter-clockwise rotation by `theta`.
    pub fn rotate(self, theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn perp(self) -> Self {
        Self::new(-self.y, self.x)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Wraps an angle into `[0, 2π)`.
pub fn wrap_tau(theta: f64) -> f64 {
    let t = theta.rem_euclid(TAU);
    if t >= TAU {
        0.0
    } else {
        t
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_pi(theta: f64) -> f64 {
    let t = wrap_tau(theta);
    if t > PI {
        t - TAU
    } else {
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    South = 0,
    East = 1,
    North = 2,
    West = 3,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::South, Arm::East, Arm::North, Arm::West];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LaneKind {
    Inbound(Arm),
    Entry(Arm),
    Exit(Arm),
    Outbound(Arm),
    Ring { outer: bool, section: u8 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LaneId(pub u8);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LaneShape {
    Line {
        start: Vec2,
        dir: Vec2,
        length: f64,
    },
    /// `ccw` arcs sweep with increasing angle.
    Arc {
        center: Vec2,
        radius: f64,
        start_angle: f64,
        sweep: f64,
        ccw: bool,
    },
}

/// Pose of a point on a lane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LanePose {
    pub position: Vec2,
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lane {
    pub id: LaneId,
    pub kind: LaneKind,
    pub shape: LaneShape,
}

impl Lane {
    pub fn length(&self) -> f64 {
        match self.shape {
            LaneShape::Line { length, .. } => length,
            LaneShape::Arc { radius, sweep, .. } => radius * sweep,
        }
    }

    pub fn pose(&self, s: f64, d: f64) -> LanePose {
        match self.shape {
            LaneShape::Line { start, dir, .. } => LanePose {
                position: start + dir * s + dir.perp() * d,
                heading: dir.angle(),
            },
            LaneShape::Arc {
                center,
                radius,
                start_angle,
                ccw,
                ..
            } => {
                let sign = if ccw { 1.0 } else { -1.0 };
                let theta = start_angle + sign * s / radius;
                // left of travel is toward the center on a ccw arc
                let r = if ccw { radius - d } else { radius + d };
                LanePose {
                    position: center + Vec2::from_angle(theta) * r,
                    heading: wrap_pi(theta + sign * PI / 2.0),
                }
            }
        }
    }

    /// Ratio between centerline arc length and travelled distance at offset `d`.
    pub fn progress_factor(&self, d: f64) -> f64 {
        match self.shape {
            LaneShape::Line { .. } => 1.0,
            LaneShape::Arc { radius, ccw, .. } => {
                let r = if ccw { radius - d } else { radius + d };
                radius / r.max(1e-3)
            }
        }
    }

    /// Projects a world point onto this lane: `(s, d)` with `s` possibly outside `[0, length)`.
    pub fn project(&self, p: Vec2) -> (f64, f64) {
        match self.shape {
            LaneShape::Line { start, dir, .. } => {
                let v = p - start;
                (v.dot(dir), dir.cross(v))
            }
            LaneShape::Arc {
                center,
                radius,
                start_angle,
                sweep,
                ccw,
            } => {
                let v = p - center;
                let r = v.norm();
                let delta = if ccw {
                    wrap_tau(v.angle() - start_angle)
                } else {
                    wrap_tau(start_angle - v.angle())
                };
                // points just before the start map to small negative s
                let delta = if delta > sweep + (TAU - sweep) / 2.0 {
                    delta - TAU
                } else {
                    delta
                };
                let d = if ccw { radius - r } else { r - radius };
                (delta * radius, d)
            }
        }
    }
}

/// Position on the lane graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneRef {
    pub lane: LaneId,
    pub s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryParams {
    pub ring_center: Vec2,
    /// Rigid rotation applied to the whole layout (south arm points along `-y` at 0).
    pub rotation: f64,
    pub inner_radius: f64,
    pub outer_radius: f64,
    pub lane_width: f64,
    pub arm_length: f64,
    pub connector_radius: f64,
}

impl Default for GeometryParams {
    fn default() -> Self {
        Self {
            ring_center: Vec2::default(),
            rotation: 0.0,
            inner_radius: 20.0,
            outer_radius: 24.0,
            lane_width: 4.0,
            arm_length: 150.0,
            connector_radius: 15.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaneGeometry {
    pub params: GeometryParams,
    lanes: Vec<Lane>,
    /// Ring junction angles in the local (unrotated) frame, sorted ascending in `[0, 2π)`.
    junctions: [f64; 8],
    entry_section: [u8; 4],
    exit_section: [u8; 4],
}

impl Default for LaneGeometry {
    fn default() -> Self {
        Self::new(GeometryParams::default())
    }
}

const LANES_PER_ARM: usize = 4;

impl LaneGeometry {
    pub fn new(params: GeometryParams) -> Self {
        assert!(params.inner_radius < params.outer_radius);
        let a = params.lane_width / 2.0;
        let rho = params.connector_radius;
        let ro = params.outer_radius;
        let yc = -((ro + rho).powi(2) - (a + rho).powi(2)).sqrt();
        // local south-arm angles (seen from the ring center) of the tangent points
        let theta_in = yc.atan2(a + rho);
        let theta_out = yc.atan2(-(a + rho));
        let alpha = theta_in + PI;
        let sweep = PI - alpha;

        let place = |p: Vec2, arm: Arm| -> Vec2 {
            params.ring_center + p.rotate(params.rotation + arm.index() as f64 * PI / 2.0)
        };
        let turn = |arm: Arm| params.rotation + arm.index() as f64 * PI / 2.0;

        let mut lanes = Vec::with_capacity(32);
        for arm in Arm::ALL {
            let rot = turn(arm);
            let base = lanes.len() as u8;
            lanes.push(Lane {
                id: LaneId(base),
                kind: LaneKind::Inbound(arm),
                shape: LaneShape::Line {
                    start: place(Vec2::new(a, yc - params.arm_length), arm),
                    dir: Vec2::new(0.0, 1.0).rotate(rot),
                    length: params.arm_length,
                },
            });
            lanes.push(Lane {
                id: LaneId(base + 1),
                kind: LaneKind::Entry(arm),
                shape: LaneShape::Arc {
                    center: place(Vec2::new(a + rho, yc), arm),
                    radius: rho,
                    start_angle: wrap_tau(PI + rot),
                    sweep,
                    ccw: false,
                },
            });
            lanes.push(Lane {
                id: LaneId(base + 2),
                kind: LaneKind::Exit(arm),
                shape: LaneShape::Arc {
                    center: place(Vec2::new(-(a + rho), yc), arm),
                    radius: rho,
                    start_angle: wrap_tau(PI - alpha + rot),
                    sweep,
                    ccw: false,
                },
            });
            lanes.push(Lane {
                id: LaneId(base + 3),
                kind: LaneKind::Outbound(arm),
                shape: LaneShape::Line {
                    start: place(Vec2::new(-a, yc), arm),
                    dir: Vec2::new(0.0, -1.0).rotate(rot),
                    length: params.arm_length,
                },
            });
        }

        let mut junctions = [0.0; 8];
        for arm in Arm::ALL {
            let k = arm.index() as f64 * PI / 2.0;
            junctions[2 * arm.index()] = wrap_tau(theta_in + k);
            junctions[2 * arm.index() + 1] = wrap_tau(theta_out + k);
        }
        junctions.sort_by(|x, y| x.total_cmp(y));
        let find = |theta: f64| -> u8 {
            let t = wrap_tau(theta);
            junctions
                .iter()
                .position(|&j| (wrap_pi(j - t)).abs() < 1e-9)
                .expect("junction angle") as u8
        };
        let mut entry_section = [0u8; 4];
        let mut exit_section = [0u8; 4];
        for arm in Arm::ALL {
            let k = arm.index() as f64 * PI / 2.0;
            // the section starting at the entry tangent point
            entry_section[arm.index()] = find(theta_in + k);
            // the outer section ending at the exit tangent point
            exit_section[arm.index()] = (find(theta_out + k) + 7) % 8;
        }

        for outer in [true, false] {
            let radius = if outer {
                params.outer_radius
            } else {
                params.inner_radius
            };
            for i in 0..8 {
                let start = junctions[i];
                let end = if i == 7 { junctions[0] + TAU } else { junctions[i + 1] };
                let id = LaneId(lanes.len() as u8);
                lanes.push(Lane {
                    id,
                    kind: LaneKind::Ring {
                        outer,
                        section: i as u8,
                    },
                    shape: LaneShape::Arc {
                        center: params.ring_center,
                        radius,
                        start_angle: wrap_tau(start + params.rotation),
                        sweep: end - start,
                        ccw: true,
                    },
                });
            }
        }

        Self {
            params,
            lanes,
            junctions,
            entry_section,
            exit_section,
        }
    }

    pub fn lanes(&self) -> &[Lane] {
        &self.lanes
    }

    pub fn lane(&self, id: LaneId) -> &Lane {
        &self.lanes[id.0 as usize]
    }

    pub fn arm_lane(&self, arm: Arm, kind: usize) -> LaneId {
        LaneId((arm.index() * LANES_PER_ARM + kind) as u8)
    }

    pub fn inbound(&self, arm: Arm) -> LaneId {
        self.arm_lane(arm, 0)
    }

    pub fn entry(&self, arm: Arm) -> LaneId {
        self.arm_lane(arm, 1)
    }

    pub fn exit(&self, arm: Arm) -> LaneId {
        self.arm_lane(arm, 2)
    }

    pub fn outbound(&self, arm: Arm) -> LaneId {
        self.arm_lane(arm, 3)
    }

    pub fn ring(&self, outer: bool, section: u8) -> LaneId {
        let base = 4 * LANES_PER_ARM + if outer { 0 } else { 8 };
        LaneId((base + section as usize % 8) as u8)
    }

    /// Ring angle (world frame) of the merge point of `arm`'s entry.
    pub fn merge_angle(&self, arm: Arm) -> f64 {
        wrap_tau(self.junctions[self.entry_section[arm.index()] as usize] + self.params.rotation)
    }

    pub fn ring_radius(&self, outer: bool) -> f64 {
        if outer {
            self.params.outer_radius
        } else {
            self.params.inner_radius
        }
    }

    /// Successor of `lane` for a vehicle heading to `destination` (`None` = keep circulating).
    pub fn next_lane(&self, lane: LaneId, destination: Option<Arm>) -> Option<LaneId> {
        match self.lane(lane).kind {
            LaneKind::Inbound(arm) => Some(self.entry(arm)),
            LaneKind::Entry(arm) => Some(self.ring(true, self.entry_section[arm.index()])),
            LaneKind::Exit(arm) => Some(self.outbound(arm)),
            LaneKind::Outbound(_) => None,
            LaneKind::Ring { outer, section } => match destination {
                Some(dest) if outer && self.exit_section[dest.index()] == section => {
                    Some(self.exit(dest))
                }
                _ => Some(self.ring(outer, (section + 1) % 8)),
            },
        }
    }

    /// Lateral neighbour: `left = true` moves toward the ring center.
    pub fn adjacent(&self, lane: LaneId, left: bool) -> Option<LaneId> {
        match self.lane(lane).kind {
            LaneKind::Ring { outer, section } if outer == left => {
                Some(self.ring(!outer, section))
            }
            _ => None,
        }
    }

    /// Number of ring sections between `section` and the exit toward `dest` (0 = exit at its end).
    pub fn sections_to_exit(&self, section: u8, dest: Arm) -> u8 {
        (self.exit_section[dest.index()] + 8 - section) % 8
    }

    /// Ordered lane list from `lane` to the end of the route toward `destination`,
    /// truncated after `max_lanes`.
    pub fn route(&self, lane: LaneId, destination: Option<Arm>, max_lanes: usize) -> Vec<LaneId> {
        let mut out = vec![lane];
        let mut cur = lane;
        while out.len() < max_lanes {
            match self.next_lane(cur, destination) {
                Some(n) => {
                    out.push(n);
                    cur = n;
                }
                None => break,
            }
        }
        out
    }

    /// Finds the lane whose surface contains `p`, preferring the smallest lateral offset.
    pub fn locate(&self, p: Vec2) -> Option<(LaneRef, f64)> {
        let half = self.params.lane_width / 2.0;
        let mut best: Option<(LaneRef, f64)> = None;
        for lane in &self.lanes {
            let (s, d) = lane.project(p);
            if s < 0.0 || s >= lane.length() || d.abs() > half {
                continue;
            }
            if best.is_none_or(|(_, bd)| d.abs() < bd.abs()) {
                best = Some((LaneRef { lane: lane.id, s }, d));
            }
        }
        best
    }

    /// True when `p` lies on any lane surface. Shared lane edges get a small
    /// tolerance so rounding cannot open a gap between adjacent lanes.
    pub fn on_road(&self, p: Vec2) -> bool {
        const EDGE_TOL: f64 = 1e-9;
        let half = self.params.lane_width / 2.0 + EDGE_TOL;
        self.lanes.iter().any(|lane| {
            let (s, d) = lane.project(p);
            s >= -EDGE_TOL && s <= lane.length() + EDGE_TOL && d.abs() <= half
        })
    }

    /// Ring angle of a world point in `[0, 2π)`, measured in the world frame.
    pub fn ring_angle(&self, p: Vec2) -> f64 {
        wrap_tau((p - self.params.ring_center).angle())
    }

    pub fn ring_distance(&self, p: Vec2) -> f64 {
        (p - self.params.ring_center).norm()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn junctions_are_continuous() {
        for rot in [0.0, 0.7, -2.1] {
            let g = LaneGeometry::new(GeometryParams {
                ring_center: Vec2::new(13.0, -4.0),
                rotation: rot,
                ..Default::default()
            });
            for lane in g.lanes() {
                for dest in [None, Some(Arm::North), Some(Arm::East), Some(Arm::West), Some(Arm::South)] {
                    if let Some(next) = g.next_lane(lane.id, dest) {
                        let end = lane.pose(lane.length(), 0.0);
                        let start = g.lane(next).pose(0.0, 0.0);
                        let gap = (end.position - start.position).norm();
                        assert!(gap < 1e-6, "{:?} -> {:?}: gap {gap}", lane.kind, g.lane(next).kind);
                        let dh = wrap_pi(end.heading - start.heading).abs();
                        assert!(dh < 1e-9, "{:?} heading jump {dh}", lane.kind);
                    }
                }
            }
        }
    }

    #[test]
    fn radii_and_lane_count() {
        let g = LaneGeometry::default();
        assert_eq!(g.lanes().len(), 32);
        let outer = g.lane(g.ring(true, 0));
        let inner = g.lane(g.ring(false, 0));
        assert!((g.ring_distance(outer.pose(1.0, 0.0).position) - 24.0).abs() < 1e-12);
        assert!((g.ring_distance(inner.pose(1.0, 0.0).position) - 20.0).abs() < 1e-12);
        let total: f64 = (0..8).map(|i| g.lane(g.ring(true, i)).length()).sum();
        assert!((total - TAU * 24.0).abs() < 1e-9);
    }

    #[test]
    fn centerline_points_locate_to_their_lane() {
        let g = LaneGeometry::default();
        for lane in g.lanes() {
            for k in 1..10 {
                let s = lane.length() * k as f64 / 10.0;
                let p = lane.pose(s, 0.0).position;
                let (found, d) = g.locate(p).expect("on road");
                assert_eq!(found.lane, lane.id, "{:?} at s={s}", lane.kind);
                assert!((found.s - s).abs() < 1e-9);
                assert!(d.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn project_inverts_pose() {
        let g = LaneGeometry::default();
        for lane in g.lanes() {
            for (s, d) in [(0.3, 0.5), (lane.length() / 2.0, -1.2), (lane.length() - 0.2, 1.9)] {
                let p = lane.pose(s, d).position;
                let (s2, d2) = lane.project(p);
                assert!((s - s2).abs() < 1e-9 && (d - d2).abs() < 1e-9, "{:?}", lane.kind);
            }
        }
    }

    #[test]
    fn south_to_north_route_uses_outer_ring() {
        let g = LaneGeometry::default();
        let route = g.route(g.inbound(Arm::South), Some(Arm::North), 20);
        assert_eq!(route.last(), Some(&g.outbound(Arm::North)));
        assert!(route.iter().all(|&l| !matches!(
            g.lane(l).kind,
            LaneKind::Ring { outer: false, .. }
        )));
        // inbound, entry, four outer sections (E exit, E entry, N exit boundaries), exit, outbound
        assert_eq!(route.len(), 7);
    }

    #[test]
    fn inner_ring_never_exits() {
        let g = LaneGeometry::default();
        let route = g.route(g.ring(false, 3), Some(Arm::North), 17);
        assert_eq!(route.len(), 17);
        assert!(route.iter().all(|&l| matches!(g.lane(l).kind, LaneKind::Ring { outer: false, .. })));
    }
}
