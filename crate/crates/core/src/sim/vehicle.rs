use serde::{Deserialize, Serialize};

use super::collision::OrientedRect;
use super::geometry::{Arm, LaneGeometry, LaneRef, Vec2};
use super::idm::IdmParams;

pub const VEHICLE_LENGTH: f64 = 5.0;
pub const VEHICLE_WIDTH: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Ego,
    Circulating,
    Interacting,
    Exiting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub id: u32,
    pub role: Role,
    pub lane_ref: LaneRef,
    /// Lateral offset from the lane centerline, positive to the left.
    pub lateral: f64,
    /// Heading relative to the lane tangent (the applied steering angle).
    pub rel_heading: f64,
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
    pub length: f64,
    pub width: f64,
    /// Exit arm; `None` keeps circulating.
    pub destination: Option<Arm>,
    /// Background vehicles prefer the inner ring lane while not about to exit.
    pub prefers_inner: bool,
    pub idm: IdmParams,
    /// Reached the end of its last lane and left the scene.
    pub finished: bool,
}

impl Vehicle {
    pub fn footprint(&self) -> OrientedRect {
        OrientedRect {
            center: self.position,
            heading: self.heading,
            length: self.length,
            width: self.width,
        }
    }

    pub fn velocity(&self) -> Vec2 {
        Vec2::from_angle(self.heading) * self.speed
    }

    pub fn is_active(&self) -> bool {
        !self.finished
    }

    pub(crate) fn refresh_pose(&mut self, geometry: &LaneGeometry) {
        let pose = geometry.lane(self.lane_ref.lane).pose(self.lane_ref.s, self.lateral);
        self.position = pose.position;
        self.heading = pose.heading + self.rel_heading;
    }

    pub fn route(&self, geometry: &LaneGeometry, max_lanes: usize) -> Vec<super::geometry::LaneId> {
        geometry.route(self.lane_ref.lane, self.destination, max_lanes)
    }
}
