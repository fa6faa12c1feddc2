//! Closed-loop episodes: a policy picks an action each decision step while
//! the simulator advances; every step is recorded for training or metrics.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Episode, TerminalCause, PAD_ACTION};
use crate::error::{Error, Result};
use crate::mcts::{plan, terminal_cause, SearchConfig};
use crate::nn::layers::softmax;
use crate::nn::{Mode, Scalar, SeqInput, SeqModel};
use crate::obs::{dequantize, render_grid, OccupancyGrid};
use crate::sim::{build_scenario_with, Action, ScenarioOptions, Vec2, WorldState, N_ACTIONS};

/// Inference-time return-to-go: the most a 22-step episode can collect.
pub const TARGET_RETURN: f64 = 22.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub action: Action,
    pub probs: Option<[f64; N_ACTIONS]>,
}

impl Decision {
    pub fn fixed(action: Action) -> Self {
        Self { action, probs: None }
    }
}

pub trait Policy: Send {
    /// Clears per-episode state.
    fn reset(&mut self) {}
    /// `step_seed` is a fresh draw from the scenario's policy stream.
    fn act(&mut self, world: &WorldState, grid: &OccupancyGrid, step_seed: u64) -> Result<Decision>;
    /// Scaled reward received for the last decision.
    fn observe(&mut self, _reward: f64) {}
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn act(&mut self, _: &WorldState, _: &OccupancyGrid, step_seed: u64) -> Result<Decision> {
        let i = ChaCha8Rng::seed_from_u64(step_seed).random_range(0..N_ACTIONS);
        Ok(Decision {
            action: Action::ALL[i],
            probs: Some([1.0 / N_ACTIONS as f64; N_ACTIONS]),
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantPolicy(pub Action);

impl Policy for ConstantPolicy {
    fn act(&mut self, _: &WorldState, _: &OccupancyGrid, _: u64) -> Result<Decision> {
        Ok(Decision::fixed(self.0))
    }
}

#[derive(Debug, Clone)]
pub struct MctsPolicy(pub SearchConfig);

impl Policy for MctsPolicy {
    fn act(&mut self, world: &WorldState, _: &OccupancyGrid, step_seed: u64) -> Result<Decision> {
        plan(world, &self.0, step_seed).map(Decision::fixed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Argmax, lowest index on ties.
    Greedy,
    Stochastic,
}

/// Sequence-model policy over a sliding context window. State embeddings are
/// computed once per step and reused while they stay in the window.
#[derive(Debug, Clone)]
pub struct ModelPolicy<T> {
    pub model: Arc<SeqModel<T>>,
    pub selection: Selection,
    pub target_return: f64,
    embeddings: Vec<T>,
    returns: Vec<f32>,
    prev_actions: Vec<u8>,
    timesteps: Vec<u8>,
    rtg: f64,
    last_action: u8,
}

impl<T: Scalar> ModelPolicy<T> {
    pub fn new(model: Arc<SeqModel<T>>, selection: Selection, target_return: f64) -> Self {
        Self {
            model,
            selection,
            target_return,
            embeddings: vec![],
            returns: vec![],
            prev_actions: vec![],
            timesteps: vec![],
            rtg: target_return,
            last_action: PAD_ACTION,
        }
    }

    pub fn greedy(model: Arc<SeqModel<T>>) -> Self {
        Self::new(model, Selection::Greedy, TARGET_RETURN)
    }
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

impl<T: Scalar> Policy for ModelPolicy<T> {
    fn reset(&mut self) {
        self.embeddings.clear();
        self.returns.clear();
        self.prev_actions.clear();
        self.timesteps.clear();
        self.rtg = self.target_return;
        self.last_action = PAD_ACTION;
    }

    fn act(&mut self, world: &WorldState, grid: &OccupancyGrid, step_seed: u64) -> Result<Decision> {
        let cfg = self.model.cfg();
        // the model only ever sees grids at storage precision
        let x: Vec<T> = dequantize(&grid.quantize()).into_iter().map(|v| T::c(v as f64)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
        let e = self.model.encode(&x, 1, false, &mut rng)?;
        self.embeddings.extend(e);
        self.returns.push(self.rtg as f32);
        self.prev_actions.push(self.last_action);
        self.timesteps.push(world.decision_step.min(cfg.max_timestep as u32 - 1) as u8);
        let n = self.prev_actions.len();
        let k = n.min(cfg.context);
        let from = n - k;
        let d = cfg.encoder.embed;
        let seq = SeqInput {
            returns: if cfg.mode == Mode::Bc { &[] } else { &self.returns[from..] },
            prev_actions: &self.prev_actions[from..],
            timesteps: &self.timesteps[from..],
        };
        let logits = self.model.sequence_logits(&self.embeddings[from * d..], &seq)?;
        let last: Vec<f64> = logits[(k - 1) * N_ACTIONS..].iter().map(|v| v.f64()).collect();
        if last.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidState(format!("non-finite logits at step {}", world.decision_step)));
        }
        let mut probs = [0.0; N_ACTIONS];
        softmax(&last, &mut probs);
        let i = match self.selection {
            Selection::Greedy => argmax(&probs),
            Selection::Stochastic => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                probs
                    .iter()
                    .position(|&p| {
                        acc += p;
                        u < acc
                    })
                    .unwrap_or(N_ACTIONS - 1)
            }
        };
        self.last_action = i as u8;
        // old embeddings never re-enter the window
        if n > cfg.context {
            self.embeddings.drain(..d);
            self.returns.remove(0);
            self.prev_actions.remove(0);
            self.timesteps.remove(0);
        }
        Ok(Decision {
            action: Action::ALL[i],
            probs: Some(probs),
        })
    }

    fn observe(&mut self, reward: f64) {
        self.rtg = (self.rtg - reward).max(0.0);
    }
}

/// Everything recorded along one closed-loop episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub seed: u64,
    pub n_interact: u8,
    pub episode: Episode,
    /// Action distribution at each decision, when the policy exposes one.
    pub distributions: Vec<[f64; N_ACTIONS]>,
    /// Ego speed and position at the end of every physics sub-step.
    pub speeds: Vec<f64>,
    pub positions: Vec<Vec2>,
    /// Mean sub-step speed within each decision.
    pub step_speeds: Vec<f64>,
    /// Number of decisions taken when the ego first reached the exit.
    pub exit_step: Option<usize>,
    pub collided: bool,
}

impl Trajectory {
    pub fn cause(&self) -> TerminalCause {
        self.episode.cause
    }
}

pub fn run_episode<P: Policy + ?Sized>(policy: &mut P, mut world: WorldState) -> Result<Trajectory> {
    policy.reset();
    let mut tr = Trajectory {
        seed: world.seed,
        n_interact: world.n_interact,
        episode: Episode::new(TerminalCause::Horizon),
        distributions: vec![],
        speeds: vec![],
        positions: vec![world.ego().position],
        step_speeds: vec![],
        exit_step: None,
        collided: false,
    };
    while !world.is_terminal() {
        let grid = render_grid(&world);
        let step_seed = world.rng.policy.random::<u64>();
        let d = policy.act(&world, &grid, step_seed)?;
        let out = world.step_decision(d.action)?;
        policy.observe(out.reward);
        tr.episode.push(&grid, d.action.index() as u8, out.reward as f32);
        if let Some(p) = d.probs {
            tr.distributions.push(p);
        }
        let s = out.trace.speeds();
        tr.speeds.extend_from_slice(s);
        tr.positions.extend_from_slice(out.trace.positions());
        tr.step_speeds.push(s.iter().sum::<f64>() / s.len().max(1) as f64);
        if world.ego_exited && tr.exit_step.is_none() {
            tr.exit_step = Some(world.decision_step as usize);
        }
    }
    tr.collided = world.collided;
    tr.episode.cause = terminal_cause(&world);
    Ok(tr)
}

/// Episodes for `seeds` in order; each gets a fresh clone of `policy`.
pub fn run_episodes<P: Policy + Clone + Sync>(
    policy: &P,
    seeds: &[u64],
    opts: &ScenarioOptions,
) -> Result<Vec<Trajectory>> {
    seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| {
            let world = build_scenario_with(seed, opts)?;
            run_episode(&mut policy.clone(), world).map_err(|e| Error::Episode {
                index: i,
                source: Box::new(e),
            })
        })
        .collect()
}
