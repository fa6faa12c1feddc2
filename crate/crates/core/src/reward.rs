//! Per-step reward: a linear combination of collision, speed-band and
//! lane-change indicators, affinely rescaled to `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub collision: f64,
    pub speed: f64,
    pub lane_change: f64,
    /// Closed speed band (m/s) that earns the speed indicator.
    pub speed_band: (f64, f64),
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            collision: -1.0,
            speed: 0.2,
            lane_change: -0.05,
            speed_band: (8.0, 16.0),
        }
    }
}

impl RewardWeights {
    pub fn is_valid(&self) -> bool {
        self.collision < 0.0 && self.lane_change < 0.0 && self.speed > 0.0
    }

    fn floor(&self) -> f64 {
        self.collision + self.lane_change
    }

    pub fn in_speed_band(&self, v: f64) -> bool {
        v >= self.speed_band.0 && v <= self.speed_band.1
    }
}

/// Binary indicators for one decision step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RewardIndicators {
    pub collision: bool,
    pub speed: bool,
    pub lane_change: bool,
}

pub fn raw_reward(ind: RewardIndicators, w: &RewardWeights) -> f64 {
    let b = |x: bool| if x { 1.0 } else { 0.0 };
    w.collision * b(ind.collision) + w.speed * b(ind.speed) + w.lane_change * b(ind.lane_change)
}

/// Maps a raw reward from `[w_c + w_l, w_v]` onto `[0, 1]`.
pub fn scale_reward(raw: f64, w: &RewardWeights) -> Result<f64> {
    let lo = w.floor();
    let hi = w.speed;
    let tol = 1e-12;
    if !(raw >= lo - tol && raw <= hi + tol) {
        return Err(Error::invalid(format!(
            "raw reward {raw} outside [{lo}, {hi}]"
        )));
    }
    Ok(((raw - lo) / (hi - lo)).clamp(0.0, 1.0))
}

/// Raw and scaled reward for a set of indicators.
pub fn step_reward(ind: RewardIndicators, w: &RewardWeights) -> (f64, f64) {
    let raw = raw_reward(ind, w);
    let scaled = scale_reward(raw, w).expect("indicator rewards stay in range");
    (raw, scaled)
}
