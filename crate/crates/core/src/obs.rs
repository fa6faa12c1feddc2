//! Ego-centric occupancy grid.
//!
//! Layout is channel-major `[channel][lateral][longitudinal]`. Cell centers
//! sit at `x = -49 + 2j` metres ahead of the ego (`j < 50`) and
//! `y = -40 + 2i` metres to its left (`i < 41`).

use crate::error::{Error, Result};
use crate::sim::collision::OrientedRect;
use crate::sim::geometry::Vec2;
use crate::sim::world::WorldState;

pub const CHANNELS: usize = 4;
pub const ROWS: usize = 41;
pub const COLS: usize = 50;
pub const PLANE: usize = ROWS * COLS;
pub const GRID_LEN: usize = CHANNELS * PLANE;
pub const RESOLUTION: f64 = 2.0;
pub const VELOCITY_CLIP: f64 = 20.0;

pub const PRESENCE: usize = 0;
pub const VX: usize = 1;
pub const VY: usize = 2;
pub const ON_ROAD: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub data: Vec<f32>,
}

impl Default for OccupancyGrid {
    fn default() -> Self {
        Self {
            data: vec![0.0; GRID_LEN],
        }
    }
}

impl OccupancyGrid {
    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        if data.len() != GRID_LEN {
            return Err(Error::invalid(format!(
                "grid has {} values, expected {GRID_LEN}",
                data.len()
            )));
        }
        Ok(Self { data })
    }

    pub fn index(channel: usize, row: usize, col: usize) -> usize {
        channel * PLANE + row * COLS + col
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.data[Self::index(channel, row, col)]
    }

    pub fn channel(&self, channel: usize) -> &[f32] {
        &self.data[channel * PLANE..(channel + 1) * PLANE]
    }

    pub fn quantize(&self) -> Vec<i8> {
        quantize(&self.data)
    }

    pub fn dequantize(q: &[i8]) -> Result<Self> {
        Self::from_vec(dequantize(q))
    }
}

/// Cell center in the ego frame.
pub fn cell_center(row: usize, col: usize) -> Vec2 {
    Vec2::new(
        -(COLS as f64 - 1.0) + RESOLUTION * col as f64,
        -(ROWS as f64 - 1.0) + RESOLUTION * row as f64,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridOptions {
    pub mark_ego: bool,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self { mark_ego: true }
    }
}

pub fn render_grid(world: &WorldState) -> OccupancyGrid {
    render_grid_with(world, GridOptions::default())
}

pub fn render_grid_with(world: &WorldState, opts: GridOptions) -> OccupancyGrid {
    let mut grid = OccupancyGrid::default();
    let ego = world.ego();
    let origin = ego.position;
    let heading = ego.heading;

    for (k, v) in world.vehicles.iter().enumerate() {
        if !v.is_active() || (k == 0 && !opts.mark_ego) {
            continue;
        }
        let rel_heading = v.heading - heading;
        let rect = OrientedRect {
            center: (v.position - origin).rotate(-heading),
            heading: rel_heading,
            length: v.length,
            width: v.width,
        };
        let vel = Vec2::from_angle(rel_heading) * v.speed;
        let vx = (vel.x.clamp(-VELOCITY_CLIP, VELOCITY_CLIP) / VELOCITY_CLIP) as f32;
        let vy = (vel.y.clamp(-VELOCITY_CLIP, VELOCITY_CLIP) / VELOCITY_CLIP) as f32;

        let (lo, hi) = rect.corners().iter().fold(
            (Vec2::new(f64::INFINITY, f64::INFINITY), Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY)),
            |(lo, hi), c| (Vec2::new(lo.x.min(c.x), lo.y.min(c.y)), Vec2::new(hi.x.max(c.x), hi.y.max(c.y))),
        );
        let Some((c0, c1)) = cell_span(lo.x, hi.x, COLS) else {
            continue;
        };
        let Some((r0, r1)) = cell_span(lo.y, hi.y, ROWS) else {
            continue;
        };
        for row in r0..=r1 {
            for col in c0..=c1 {
                if !rect.contains(cell_center(row, col)) {
                    continue;
                }
                let i = OccupancyGrid::index(PRESENCE, row, col);
                // earlier vehicles (ego first) keep the cell
                if grid.data[i] != 0.0 {
                    continue;
                }
                grid.data[i] = 1.0;
                grid.data[OccupancyGrid::index(VX, row, col)] = vx;
                grid.data[OccupancyGrid::index(VY, row, col)] = vy;
            }
        }
    }

    let g = &world.geometry;
    for row in 0..ROWS {
        for col in 0..COLS {
            let p = origin + cell_center(row, col).rotate(heading);
            if g.on_road(p) {
                grid.data[OccupancyGrid::index(ON_ROAD, row, col)] = 1.0;
            }
        }
    }
    grid
}

/// Inclusive index range of cells whose centers may fall inside `[lo, hi]`.
fn cell_span(lo: f64, hi: f64, n: usize) -> Option<(usize, usize)> {
    let offset = n as f64 - 1.0;
    let a = ((lo + offset) / RESOLUTION).floor().max(0.0);
    let b = ((hi + offset) / RESOLUTION).ceil().min(n as f64 - 1.0);
    (a <= b).then_some((a as usize, b as usize))
}

pub fn quantize(x: &[f32]) -> Vec<i8> {
    x.iter()
        .map(|&v| (v.clamp(-1.0, 1.0) * 127.0).round() as i8)
        .collect()
}

pub fn dequantize(q: &[i8]) -> Vec<f32> {
    q.iter().map(|&v| v as f32 / 127.0).collect()
}
