use super::geometry::Vec2;

/// Oriented rectangle: center, heading of the long axis, full length and width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedRect {
    pub center: Vec2,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedRect {
    pub fn axes(&self) -> [Vec2; 2] {
        let u = Vec2::from_angle(self.heading);
        [u, u.perp()]
    }

    pub fn corners(&self) -> [Vec2; 4] {
        let [u, v] = self.axes();
        let hl = u * (self.length / 2.0);
        let hw = v * (self.width / 2.0);
        [
            self.center + hl + hw,
            self.center + hl - hw,
            self.center - hl - hw,
            self.center - hl + hw,
        ]
    }

    /// Closed containment test.
    pub fn contains(&self, p: Vec2) -> bool {
        let [u, v] = self.axes();
        let r = p - self.center;
        r.dot(u).abs() <= self.length / 2.0 && r.dot(v).abs() <= self.width / 2.0
    }

    /// Separating-axis test; touching rectangles count as overlapping.
    pub fn overlaps(&self, other: &OrientedRect) -> bool {
        let ca = self.corners();
        let cb = other.corners();
        for axis in self.axes().into_iter().chain(other.axes()) {
            let (amin, amax) = extent(&ca, axis);
            let (bmin, bmax) = extent(&cb, axis);
            if amax < bmin || bmax < amin {
                return false;
            }
        }
        true
    }
}

fn extent(corners: &[Vec2; 4], axis: Vec2) -> (f64, f64) {
    corners.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
        let p = c.dot(axis);
        (lo.min(p), hi.max(p))
    })
}
