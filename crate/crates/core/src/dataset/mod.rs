//! Recorded trajectories, returns-to-go, context windows and mini-batches.

mod format;

pub use format::{inspect, read_dataset, write_dataset, DatasetSummary, EpisodeSummary, MAGIC, VERSION};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::obs::{OccupancyGrid, GRID_LEN};
use crate::sim::control::N_ACTIONS;
use crate::sim::world::MAX_DECISIONS;

pub const CONTEXT: usize = 20;
/// Action id used for `a_0` and for padded timesteps.
pub const PAD_ACTION: u8 = N_ACTIONS as u8;
pub const RTG_GAMMA: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerminalCause {
    Collision = 0,
    Exit = 1,
    Horizon = 2,
}

impl TerminalCause {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Collision),
            1 => Some(Self::Exit),
            2 => Some(Self::Horizon),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Collision => "collision",
            Self::Exit => "exit",
            Self::Horizon => "horizon",
        }
    }
}

/// One trajectory with grids held in their quantized storage form.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub grids: Vec<i8>,
    pub actions: Vec<u8>,
    pub rewards: Vec<f32>,
    pub cause: TerminalCause,
}

impl Episode {
    pub fn new(cause: TerminalCause) -> Self {
        Self {
            grids: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            cause,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn push(&mut self, grid: &OccupancyGrid, action: u8, reward: f32) {
        self.grids.extend(grid.quantize());
        self.actions.push(action);
        self.rewards.push(reward);
    }

    pub fn grid(&self, t: usize) -> &[i8] {
        &self.grids[t * GRID_LEN..(t + 1) * GRID_LEN]
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().map(|&r| r as f64).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.actions.len();
        if t == 0 || t > MAX_DECISIONS as usize {
            return Err(Error::invalid(format!("episode length {t} outside [1, {MAX_DECISIONS}]")));
        }
        if self.rewards.len() != t || self.grids.len() != t * GRID_LEN {
            return Err(Error::invalid("episode arrays have mismatched lengths"));
        }
        if self.actions.iter().any(|&a| a as usize >= N_ACTIONS) {
            return Err(Error::invalid("action id out of range"));
        }
        if self.rewards.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::invalid("reward outside [0, 1]"));
        }
        Ok(())
    }
}

/// Discounted return-to-go for every step.
pub fn compute_rtg(rewards: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::invalid("empty reward sequence"));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::invalid(format!("gamma {gamma} outside [0, 1)")));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    Ok(out)
}

/// A context window ending at timestep `end` of an episode. Timesteps are
/// left-padded: slot `k` holds episode step `end + 1 - K + k` when valid.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenWindow {
    pub episode: usize,
    pub end: usize,
    pub returns: Vec<f32>,
    pub prev_actions: Vec<u8>,
    pub targets: Vec<u8>,
    pub timesteps: Vec<u8>,
    pub mask: Vec<bool>,
    /// Episode step behind each slot, `None` for padding.
    pub steps: Vec<Option<usize>>,
}

impl TokenWindow {
    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

pub fn make_windows(ep: &Episode, episode_index: usize, k: usize) -> Result<Vec<TokenWindow>> {
    if k == 0 {
        return Err(Error::invalid("context length must be at least 1"));
    }
    let rewards: Vec<f64> = ep.rewards.iter().map(|&r| r as f64).collect();
    let rtg = compute_rtg(&rewards, RTG_GAMMA)?;
    let mut out = Vec::with_capacity(ep.len());
    for end in 0..ep.len() {
        let mut w = TokenWindow {
            episode: episode_index,
            end,
            returns: vec![0.0; k],
            prev_actions: vec![PAD_ACTION; k],
            targets: vec![0; k],
            timesteps: vec![0; k],
            mask: vec![false; k],
            steps: vec![None; k],
        };
        for slot in 0..k {
            let Some(t) = (end + 1 + slot).checked_sub(k) else {
                continue;
            };
            w.returns[slot] = rtg[t] as f32;
            w.prev_actions[slot] = if t == 0 { PAD_ACTION } else { ep.actions[t - 1] };
            w.targets[slot] = ep.actions[t];
            w.timesteps[slot] = t as u8;
            w.mask[slot] = true;
            w.steps[slot] = Some(t);
        }
        out.push(w);
    }
    Ok(out)
}

/// Episodes with their precomputed windows.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub episodes: Vec<Episode>,
    pub windows: Vec<TokenWindow>,
    pub context: usize,
}

impl Dataset {
    pub fn new(episodes: Vec<Episode>, context: usize) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::invalid("dataset has no episodes"));
        }
        let mut windows = Vec::new();
        for (i, ep) in episodes.iter().enumerate() {
            ep.validate().map_err(|e| Error::Episode {
                index: i,
                source: Box::new(e),
            })?;
            windows.extend(make_windows(ep, i, context)?);
        }
        Ok(Self {
            episodes,
            windows,
            context,
        })
    }

    pub fn n_windows(&self) -> usize {
        self.windows.len()
    }

    /// Dequantized grid of a step, or zeros for padding.
    pub fn grid(&self, episode: usize, step: Option<usize>, out: &mut [f32]) {
        match step {
            Some(t) => {
                for (o, &q) in out.iter_mut().zip(self.episodes[episode].grid(t)) {
                    *o = q as f32 / 127.0;
                }
            }
            None => out.fill(0.0),
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch::from_windows(self, indices)
    }

    pub fn sample_batch<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Batch {
        let idx: Vec<usize> = (0..batch_size)
            .map(|_| rng.random_range(0..self.windows.len()))
            .collect();
        self.batch(&idx)
    }
}

/// Flattened mini-batch, row-major over `(window, slot)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub context: usize,
    pub returns: Vec<f32>,
    pub grids: Vec<f32>,
    pub prev_actions: Vec<u8>,
    pub targets: Vec<u8>,
    pub timesteps: Vec<u8>,
    pub mask: Vec<bool>,
    pub window_ids: Vec<usize>,
}

impl Batch {
    pub fn from_windows(ds: &Dataset, indices: &[usize]) -> Self {
        let k = ds.context;
        let n = indices.len() * k;
        let mut b = Batch {
            size: indices.len(),
            context: k,
            returns: Vec::with_capacity(n),
            grids: vec![0.0; n * GRID_LEN],
            prev_actions: Vec::with_capacity(n),
            targets: Vec::with_capacity(n),
            timesteps: Vec::with_capacity(n),
            mask: Vec::with_capacity(n),
            window_ids: indices.to_vec(),
        };
        for (row, &wi) in indices.iter().enumerate() {
            let w = &ds.windows[wi];
            b.returns.extend(&w.returns);
            b.prev_actions.extend(&w.prev_actions);
            b.targets.extend(&w.targets);
            b.timesteps.extend(&w.timesteps);
            b.mask.extend(&w.mask);
            for (slot, &step) in w.steps.iter().enumerate() {
                let off = (row * k + slot) * GRID_LEN;
                ds.grid(w.episode, step, &mut b.grids[off..off + GRID_LEN]);
            }
        }
        b
    }

    /// Flat indices of the valid tokens (`B_val`).
    pub fn valid_indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn n_valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn synthetic(t: usize, seed: u64) -> Episode {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ep = Episode::new(TerminalCause::Horizon);
        for k in 0..t {
            let mut g = OccupancyGrid::default();
            for v in g.data.iter_mut() {
                *v = rng.random_range(-1.0..=1.0);
            }
            ep.push(&g, (k % N_ACTIONS) as u8, rng.random_range(0.0..=1.0));
        }
        ep
    }

    fn brute_rtg(r: &[f64], gamma: f64) -> Vec<f64> {
        (0..r.len())
            .map(|t| (t..r.len()).map(|k| gamma.powi((k - t) as i32) * r[k]).sum())
            .collect()
    }

    #[test]
    fn rtg_examples() {
        let out = compute_rtg(&[1.0, 0.5, 0.2], 0.99).unwrap();
        let expect = [1.0 + 0.99 * 0.5 + 0.99 * 0.99 * 0.2, 0.5 + 0.99 * 0.2, 0.2];
        for (a, b) in out.iter().zip(expect) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((out[0] - 1.691_02).abs() < 1e-9);
        assert_eq!(compute_rtg(&[1.0], 0.7).unwrap(), vec![1.0]);
        assert_eq!(compute_rtg(&[0.3, 0.1, 0.9], 0.0).unwrap(), vec![0.3, 0.1, 0.9]);
        assert!(matches!(compute_rtg(&[], 0.99), Err(Error::InvalidArgument(_))));
    }

    proptest! {
        #[test]
        fn rtg_recurrence(r in prop::collection::vec(0.0f64..=1.0, 1..=22), gamma in 0.0f64..0.999) {
            let out = compute_rtg(&r, gamma).unwrap();
            let n = r.len();
            prop_assert_eq!(out[n - 1], r[n - 1]);
            for t in 0..n - 1 {
                prop_assert!((out[t] - (r[t] + gamma * out[t + 1])).abs() < 1e-12);
            }
            for (a, b) in out.iter().zip(brute_rtg(&r, gamma)) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_step_window() {
        let ep = synthetic(1, 0);
        let w = make_windows(&ep, 0, 20).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].valid_count(), 1);
        assert_eq!(w[0].mask.iter().filter(|&&m| !m).count(), 19);
        assert_eq!(w[0].prev_actions[19], PAD_ACTION);
    }

    #[test]
    fn full_length_window_indices() {
        let ep = synthetic(22, 1);
        let w = make_windows(&ep, 0, 20).unwrap();
        assert_eq!(w.len(), 22);
        let last = &w[21];
        // 1-based steps 3..22 are 0-based 2..21
        let steps: Vec<usize> = last.steps.iter().map(|s| s.unwrap()).collect();
        assert_eq!(steps, (2..22).collect::<Vec<_>>());
        assert_eq!(last.timesteps[0], 2);
    }

    #[test]
    fn targets_are_current_actions() {
        let mut ep = synthetic(5, 2);
        ep.actions = vec![0, 1, 2, 3, 4];
        let w = make_windows(&ep, 0, 3).unwrap();
        let last = &w[4];
        assert_eq!(last.targets, vec![2, 3, 4]);
        assert_eq!(last.prev_actions, vec![1, 2, 3]);
        let first = &w[0];
        assert_eq!(first.mask, vec![false, false, true]);
        assert_eq!(first.targets[2], 0);
        assert_eq!(first.prev_actions[2], PAD_ACTION);
    }

    #[test]
    fn batch_from_single_window() {
        let ds = Dataset::new(vec![synthetic(1, 3)], 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = ds.sample_batch(16, &mut rng);
        assert_eq!(b.window_ids, vec![0; 16]);
        assert_eq!(b.n_valid(), 16);
    }

    #[test]
    fn full_windows_fill_the_batch() {
        let eps: Vec<Episode> = (0..3).map(|s| synthetic(22, s)).collect();
        let ds = Dataset::new(eps, 20).unwrap();
        let full: Vec<usize> = (0..ds.n_windows()).filter(|&i| ds.windows[i].end >= 19).collect();
        let b = ds.batch(&full[..16.min(full.len())].iter().cycle().take(16).cloned().collect::<Vec<_>>());
        assert_eq!(b.n_valid(), 16 * 20);
    }

    #[test]
    fn sampling_is_reproducible() {
        let ds = Dataset::new((0..4).map(|s| synthetic(7, s)).collect(), 20).unwrap();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            (0..5).map(|_| ds.sample_batch(16, &mut rng).window_ids).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn padded_grids_are_zero() {
        let ds = Dataset::new(vec![synthetic(2, 9)], 20).unwrap();
        let b = ds.batch(&[1]);
        assert!(b.grids[..18 * GRID_LEN].iter().all(|&v| v == 0.0));
        let q = ds.episodes[0].grid(1);
        let tail = &b.grids[19 * GRID_LEN..];
        assert!(tail.iter().zip(q).all(|(&v, &q)| v == q as f32 / 127.0));
    }
}
