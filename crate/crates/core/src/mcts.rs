//! UCT search over the five high-level actions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use std::path::Path;

use rayon::prelude::*;

use crate::dataset::{write_dataset, Episode, TerminalCause};
use crate::error::{Error, Result};
use crate::obs::render_grid;
use crate::sim::control::{Action, N_ACTIONS};
use crate::sim::world::{build_scenario, InteractCount, WorldState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RolloutPolicy {
    UniformRandom,
    CruiseDefault,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub simulations: u32,
    pub exploration: f64,
    /// Rollout length in decision steps below the expanded node.
    pub depth: u32,
    pub rollout: RolloutPolicy,
    pub gamma: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            simulations: 100,
            exploration: 1.414,
            depth: 10,
            rollout: RolloutPolicy::CruiseDefault,
            gamma: 0.99,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.simulations < 1 {
            return Err(Error::invalid("simulations must be at least 1"));
        }
        if !(self.exploration >= 0.0) {
            return Err(Error::invalid("exploration constant must be non-negative"));
        }
        if self.depth < 1 {
            return Err(Error::invalid("rollout depth must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid("gamma must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Anything the planner can clone and step.
pub trait SearchEnv: Clone {
    fn is_terminal(&self) -> bool;
    /// Returns the scaled reward in `[0, 1]` and whether the result is terminal.
    fn step(&mut self, action: Action) -> Result<(f64, bool)>;
}

impl SearchEnv for WorldState {
    fn is_terminal(&self) -> bool {
        WorldState::is_terminal(self)
    }

    fn step(&mut self, action: Action) -> Result<(f64, bool)> {
        let out = self.step_decision(action)?;
        Ok((out.reward, out.terminal))
    }
}

#[derive(Debug, Clone)]
pub struct SearchNode<E> {
    pub state: E,
    pub terminal: bool,
    pub visits: u32,
    pub action_visits: [u32; N_ACTIONS],
    pub value_sums: [f64; N_ACTIONS],
    /// Reward collected on the edge into each child.
    pub edge_rewards: [f64; N_ACTIONS],
    pub children: [Option<usize>; N_ACTIONS],
}

impl<E> SearchNode<E> {
    fn new(state: E, terminal: bool) -> Self {
        Self {
            state,
            terminal,
            visits: 0,
            action_visits: [0; N_ACTIONS],
            value_sums: [0.0; N_ACTIONS],
            edge_rewards: [0.0; N_ACTIONS],
            children: [None; N_ACTIONS],
        }
    }

    pub fn mean_value(&self, a: usize) -> f64 {
        if self.action_visits[a] == 0 {
            0.0
        } else {
            self.value_sums[a] / self.action_visits[a] as f64
        }
    }

    fn uct(&self, a: usize, c: f64) -> f64 {
        let n = self.action_visits[a] as f64;
        self.mean_value(a) + c * ((self.visits as f64).ln() / n).sqrt()
    }
}

/// Search tree rebuilt for every decision.
#[derive(Debug, Clone)]
pub struct SearchTree<E> {
    pub nodes: Vec<SearchNode<E>>,
}

impl<E: SearchEnv> SearchTree<E> {
    pub fn root(&self) -> &SearchNode<E> {
        &self.nodes[0]
    }

    /// Most visited root action, lowest index on ties.
    pub fn best_action(&self) -> Action {
        let root = self.root();
        let mut best = 0;
        for a in 1..N_ACTIONS {
            if root.action_visits[a] > root.action_visits[best] {
                best = a;
            }
        }
        Action::ALL[best]
    }
}

pub fn plan<E: SearchEnv>(env: &E, cfg: &SearchConfig, seed: u64) -> Result<Action> {
    Ok(search(env, cfg, seed)?.best_action())
}

pub fn search<E: SearchEnv>(env: &E, cfg: &SearchConfig, seed: u64) -> Result<SearchTree<E>> {
    cfg.validate()?;
    if env.is_terminal() {
        return Err(Error::InvalidState("planning from a terminal state".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tree = SearchTree {
        nodes: vec![SearchNode::new(env.clone(), false)],
    };
    let mut path: Vec<(usize, usize)> = Vec::with_capacity(32);
    for _ in 0..cfg.simulations {
        path.clear();
        let mut node = 0;
        let leaf_value = loop {
            if tree.nodes[node].terminal {
                break 0.0;
            }
            let cur = &tree.nodes[node];
            if let Some(a) = (0..N_ACTIONS).find(|&a| cur.children[a].is_none()) {
                let mut child = cur.state.clone();
                let (r, terminal) = child.step(Action::ALL[a])?;
                let tail = if terminal {
                    0.0
                } else {
                    rollout(child.clone(), cfg, &mut rng)?
                };
                let id = tree.nodes.len();
                tree.nodes.push(SearchNode::new(child, terminal));
                let cur = &mut tree.nodes[node];
                cur.children[a] = Some(id);
                cur.edge_rewards[a] = r;
                path.push((node, a));
                break tail;
            }
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for a in 0..N_ACTIONS {
                let score = cur.uct(a, cfg.exploration);
                if score > best_score {
                    best = a;
                    best_score = score;
                }
            }
            path.push((node, best));
            node = cur.children[best].expect("expanded");
        };
        let mut value = leaf_value;
        for &(n, a) in path.iter().rev() {
            value = tree.nodes[n].edge_rewards[a] + cfg.gamma * value;
            let node = &mut tree.nodes[n];
            node.visits += 1;
            node.action_visits[a] += 1;
            node.value_sums[a] += value;
            debug_assert_eq!(node.visits, node.action_visits.iter().sum::<u32>());
        }
    }
    Ok(tree)
}

fn rollout<E: SearchEnv>(mut env: E, cfg: &SearchConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut ret = 0.0;
    let mut discount = 1.0;
    for _ in 0..cfg.depth {
        if env.is_terminal() {
            break;
        }
        let action = match cfg.rollout {
            RolloutPolicy::CruiseDefault => Action::Cruise,
            RolloutPolicy::UniformRandom => Action::ALL[rng.random_range(0..N_ACTIONS)],
        };
        let (r, _) = env.step(action)?;
        ret += discount * r;
        discount *= cfg.gamma;
    }
    Ok(ret)
}

pub fn terminal_cause(world: &WorldState) -> TerminalCause {
    if world.collided {
        TerminalCause::Collision
    } else if world.ego_exited {
        TerminalCause::Exit
    } else {
        TerminalCause::Horizon
    }
}

/// Drives one sampled scenario with the planner, recording every decision.
pub fn expert_episode(seed: u64, cfg: &SearchConfig) -> Result<Episode> {
    let mut world = build_scenario(seed, InteractCount::SAMPLE)?;
    let mut ep = Episode::new(TerminalCause::Horizon);
    while !world.is_terminal() {
        let grid = render_grid(&world);
        let plan_seed = world.rng.policy.random::<u64>();
        let action = plan(&world, cfg, plan_seed)?;
        let out = world.step_decision(action)?;
        ep.push(&grid, action.index() as u8, out.reward as f32);
    }
    ep.cause = terminal_cause(&world);
    Ok(ep)
}

/// Episodes for seeds `base_seed..base_seed + n`, in seed order.
pub fn generate_episodes(n_episodes: usize, cfg: &SearchConfig, base_seed: u64) -> Result<Vec<Episode>> {
    if n_episodes == 0 {
        return Err(Error::invalid("n_episodes must be at least 1"));
    }
    cfg.validate()?;
    (0..n_episodes)
        .into_par_iter()
        .map(|i| {
            expert_episode(base_seed.wrapping_add(i as u64), cfg).map_err(|e| Error::Episode {
                index: i,
                source: Box::new(e),
            })
        })
        .collect()
}

pub fn generate_dataset(
    path: impl AsRef<Path>,
    n_episodes: usize,
    cfg: &SearchConfig,
    base_seed: u64,
) -> Result<Vec<Episode>> {
    let episodes = generate_episodes(n_episodes, cfg, base_seed)?;
    write_dataset(path, &episodes)?;
    Ok(episodes)
}
