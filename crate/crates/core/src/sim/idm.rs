use serde::{Deserialize, Serialize};

/// Intelligent Driver Model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    /// Desired speed `v0` (m/s).
    pub desired_speed: f64,
    /// Safe time headway `T` (s).
    pub time_gap: f64,
    /// Jam distance `s0` (m).
    pub min_gap: f64,
    /// Maximum acceleration `a` (m/s²).
    pub max_accel: f64,
    /// Comfortable deceleration `b` (m/s²).
    pub comfort_decel: f64,
    /// Acceleration exponent `δ`.
    pub exponent: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            desired_speed: 16.0,
            time_gap: 1.5,
            min_gap: 5.0,
            max_accel: 3.0,
            comfort_decel: 3.0,
            exponent: 4.0,
        }
    }
}

impl IdmParams {
    pub fn is_valid(&self) -> bool {
        self.desired_speed > 0.0
            && self.time_gap > 0.0
            && self.min_gap > 0.0
            && self.max_accel > 0.0
            && self.comfort_decel > 0.0
            && self.exponent >= 1.0
    }
}

/// Leader as seen by the follower: its speed and the bumper-to-bumper gap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leader {
    pub speed: f64,
    pub gap: f64,
}

/// IDM acceleration, clamped to `[-2b, a]`.
///
/// The dynamic part of the desired gap is floored at zero so the result is
/// monotonically non-decreasing in the gap. A non-positive gap behind a
/// leader is an imminent collision and returns the braking floor.
pub fn idm_acceleration(v: f64, leader: Option<Leader>, p: &IdmParams) -> f64 {
    let floor = -2.0 * p.comfort_decel;
    let free = p.max_accel * (1.0 - (v.max(0.0) / p.desired_speed).powf(p.exponent));
    let acc = match leader {
        None => free,
        Some(Leader { gap, .. }) if gap <= 0.0 => return floor,
        Some(Leader { speed, gap }) => {
            let dv = v - speed;
            let dynamic = v * p.time_gap + v * dv / (2.0 * (p.max_accel * p.comfort_decel).sqrt());
            let s_star = p.min_gap + dynamic.max(0.0);
            free - p.max_accel * (s_star / gap).powi(2)
        }
    };
    acc.clamp(floor, p.max_accel)
}
