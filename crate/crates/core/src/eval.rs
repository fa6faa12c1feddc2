//! Policy evaluation: per-episode metrics, aggregates, entropy statistics and
//! CSV output.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::entropy;
use crate::rollout::{run_episodes, Policy, Trajectory};
use crate::sim::{InteractCount, ScenarioOptions, MAX_DECISIONS};
use crate::sim::world::{DECISION_HZ, PHYSICS_HZ};

/// Speeds below this count as halted (m/s).
pub const HALT_SPEED: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DensityLevel {
    /// 0, 1 or 2 interacting vehicles.
    Low,
    Medium,
    High,
    /// The training distribution, 0 to 4.
    Mixed,
}

impl DensityLevel {
    pub const ALL: [DensityLevel; 4] = [Self::Low, Self::Medium, Self::High, Self::Mixed];

    pub fn interact(self) -> InteractCount {
        match self {
            Self::Low => InteractCount::Uniform { max: 2 },
            Self::Medium => InteractCount::Fixed(3),
            Self::High => InteractCount::Fixed(4),
            Self::Mixed => InteractCount::SAMPLE,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Low => "low",
            Self::Medium => "medium",
            Self::High => "high",
            Self::Mixed => "mixed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub seed: u64,
    pub n_interact: u8,
    pub accumulated_reward: f64,
    /// Mean over physics sub-steps (m/s).
    pub average_speed: f64,
    /// Decision steps.
    pub episode_length: usize,
    /// Length of the sub-step position polyline (m).
    pub travel_distance: f64,
    pub reached_exit: bool,
    pub collided: bool,
    /// Decision steps until the exit, or the horizon if never reached.
    pub time_to_exit: usize,
    /// Seconds spent below the halt speed.
    pub halt_duration: f64,
    pub entropies: Vec<f64>,
    pub step_rewards: Vec<f64>,
    pub step_speeds: Vec<f64>,
}

impl MetricsRecord {
    pub fn from_trajectory(t: &Trajectory) -> Self {
        let dt = 1.0 / PHYSICS_HZ;
        let travel = t.positions.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
        let step_rewards: Vec<f64> = t.episode.rewards.iter().map(|&r| r as f64).collect();
        Self {
            seed: t.seed,
            n_interact: t.n_interact,
            accumulated_reward: step_rewards.iter().sum(),
            average_speed: t.speeds.iter().sum::<f64>() / t.speeds.len().max(1) as f64,
            episode_length: t.episode.len(),
            travel_distance: travel,
            reached_exit: t.exit_step.is_some(),
            collided: t.collided,
            time_to_exit: t.exit_step.unwrap_or(MAX_DECISIONS as usize),
            halt_duration: t.speeds.iter().filter(|&&v| v < HALT_SPEED).count() as f64 * dt,
            entropies: t.distributions.iter().map(|p| entropy(p)).collect(),
            step_rewards,
            step_speeds: t.step_speeds.clone(),
        }
    }

    pub fn episode_seconds(&self) -> f64 {
        self.episode_length as f64 / DECISION_HZ
    }

    pub fn check_invariants(&self) -> Result<()> {
        let horizon = MAX_DECISIONS as usize;
        let ok = (0.0..=horizon as f64 + 1e-9).contains(&self.accumulated_reward)
            && self.time_to_exit <= horizon
            && self.halt_duration <= horizon as f64 / DECISION_HZ + 1e-9
            && !(self.reached_exit && self.collided)
            && self.entropies.iter().all(|&h| (0.0..=(5f64).ln() + 1e-9).contains(&h));
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidState(format!("metrics of episode {} violate invariants", self.seed)))
        }
    }
}

/// Episode seeds `base_seed..base_seed + n`; shared by every policy at a level.
pub fn eval_seeds(n_episodes: usize, base_seed: u64) -> Vec<u64> {
    (0..n_episodes as u64).map(|i| base_seed.wrapping_add(i)).collect()
}

pub fn run_eval<P: Policy + Clone + Sync>(
    policy: &P,
    level: DensityLevel,
    n_episodes: usize,
    base_seed: u64,
) -> Result<Vec<MetricsRecord>> {
    if n_episodes == 0 {
        return Err(Error::invalid("n_episodes must be at least 1"));
    }
    let trajs = run_episodes(policy, &eval_seeds(n_episodes, base_seed), &ScenarioOptions::new(level.interact()))?;
    Ok(trajs.iter().map(MetricsRecord::from_trajectory).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample (n − 1) standard deviation; zero for a single value.
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_episodes: usize,
    /// Set when there is a single record and the deviations are meaningless.
    pub single: bool,
    pub reward: MeanStd,
    pub speed: MeanStd,
    pub episode_length: MeanStd,
    pub distance: MeanStd,
    pub exit_rate_pct: f64,
    pub collision_rate_pct: f64,
    pub time_to_exit: MeanStd,
    pub halt: MeanStd,
}

pub fn aggregate(records: &[MetricsRecord]) -> Result<Aggregate> {
    if records.is_empty() {
        return Err(Error::invalid("cannot aggregate zero records"));
    }
    let col = |f: fn(&MetricsRecord) -> f64| MeanStd::of(&records.iter().map(f).collect::<Vec<_>>());
    let n = records.len() as f64;
    Ok(Aggregate {
        n_episodes: records.len(),
        single: records.len() == 1,
        reward: col(|r| r.accumulated_reward),
        speed: col(|r| r.average_speed),
        episode_length: col(|r| r.episode_length as f64),
        distance: col(|r| r.travel_distance),
        exit_rate_pct: records.iter().filter(|r| r.reached_exit).count() as f64 / n * 100.0,
        collision_rate_pct: records.iter().filter(|r| r.collided).count() as f64 / n * 100.0,
        time_to_exit: col(|r| r.time_to_exit as f64),
        halt: col(|r| r.halt_duration),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyStats {
    pub min: f64,
    pub max: f64,
    /// Over per-episode mean entropies.
    pub mean: MeanStd,
}

pub fn entropy_stats(records: &[MetricsRecord]) -> Result<EntropyStats> {
    let per_episode: Vec<f64> = records
        .iter()
        .filter(|r| !r.entropies.is_empty())
        .map(|r| r.entropies.iter().sum::<f64>() / r.entropies.len() as f64)
        .collect();
    if per_episode.is_empty() {
        return Err(Error::invalid("records carry no entropy logs"));
    }
    let all = records.iter().flat_map(|r| r.entropies.iter().cloned());
    let (min, max) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), h| (a.min(h), b.max(h)));
    Ok(EntropyStats {
        min,
        max,
        mean: MeanStd::of(&per_episode),
    })
}

/// Per-decision-step means over the episodes still running at that step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub step: usize,
    pub n_active: usize,
    pub reward_mean: f64,
    pub speed_mean: f64,
}

pub fn profiles(records: &[MetricsRecord]) -> Vec<Profile> {
    (0..MAX_DECISIONS as usize)
        .map(|k| {
            let live: Vec<&MetricsRecord> = records.iter().filter(|r| r.step_rewards.len() > k).collect();
            let n = live.len();
            let mean = |f: &dyn Fn(&MetricsRecord) -> f64| {
                if n == 0 {
                    f64::NAN
                } else {
                    live.iter().map(|r| f(r)).sum::<f64>() / n as f64
                }
            };
            Profile {
                step: k,
                n_active: n,
                reward_mean: mean(&|r| r.step_rewards[k]),
                speed_mean: mean(&|r| r.step_speeds[k]),
            }
        })
        .collect()
}

/// All records of one policy at one density.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalGroup {
    pub policy: String,
    pub density: DensityLevel,
    pub records: Vec<MetricsRecord>,
}

pub const SUMMARY_COLUMNS: [&str; 17] = [
    "policy",
    "density",
    "n_episodes",
    "reward_mean",
    "reward_std",
    "speed_mean",
    "speed_std",
    "eplen_mean",
    "eplen_std",
    "dist_mean",
    "dist_std",
    "exit_rate_pct",
    "collision_rate_pct",
    "tte_mean",
    "tte_std",
    "halt_mean",
    "halt_std",
];

pub const PROFILE_COLUMNS: [&str; 6] = ["policy", "density", "step", "n_active", "reward_mean", "speed_mean"];

fn fmt(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else {
        String::new()
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidState(format!("{}: {other:?}", path.display())),
    }
}

/// Writes `summary.csv` and `profiles.csv` into `dir`.
pub fn emit_results(groups: &[EvalGroup], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let summary = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary).map_err(|e| csv_err(&summary, e))?;
    w.write_record(SUMMARY_COLUMNS).map_err(|e| csv_err(&summary, e))?;
    for g in groups {
        let a = aggregate(&g.records)?;
        let row = [
            g.policy.clone(),
            g.density.name().to_string(),
            a.n_episodes.to_string(),
            fmt(a.reward.mean),
            fmt(a.reward.std),
            fmt(a.speed.mean),
            fmt(a.speed.std),
            fmt(a.episode_length.mean),
            fmt(a.episode_length.std),
            fmt(a.distance.mean),
            fmt(a.distance.std),
            fmt(a.exit_rate_pct),
            fmt(a.collision_rate_pct),
            fmt(a.time_to_exit.mean),
            fmt(a.time_to_exit.std),
            fmt(a.halt.mean),
            fmt(a.halt.std),
        ];
        w.write_record(&row).map_err(|e| csv_err(&summary, e))?;
    }
    w.flush().map_err(|e| Error::io(&summary, e))?;

    let prof = dir.join("profiles.csv");
    let mut w = csv::Writer::from_path(&prof).map_err(|e| csv_err(&prof, e))?;
    w.write_record(PROFILE_COLUMNS).map_err(|e| csv_err(&prof, e))?;
    for g in groups {
        for p in profiles(&g.records) {
            let row = [
                g.policy.clone(),
                g.density.name().to_string(),
                p.step.to_string(),
                p.n_active.to_string(),
                fmt(p.reward_mean),
                fmt(p.speed_mean),
            ];
            w.write_record(&row).map_err(|e| csv_err(&prof, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&prof, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::{run_episode, ConstantPolicy, RandomPolicy};
    use crate::sim::{build_scenario_with, Action};

    fn record(reward: f64, collided: bool, entropies: Vec<f64>) -> MetricsRecord {
        MetricsRecord {
            seed: 0,
            n_interact: 0,
            accumulated_reward: reward,
            average_speed: 10.0,
            episode_length: 22,
            travel_distance: 100.0,
            reached_exit: !collided,
            collided,
            time_to_exit: 22,
            halt_duration: 0.0,
            entropies,
            step_rewards: vec![reward / 22.0; 22],
            step_speeds: vec![10.0; 22],
        }
    }

    #[test]
    fn random_policy_records_are_valid() {
        let recs = run_eval(&RandomPolicy, DensityLevel::High, 20, 500).unwrap();
        assert_eq!(recs.len(), 20);
        for r in &recs {
            r.check_invariants().unwrap();
            assert_eq!(r.n_interact, 4);
            if r.collided {
                assert_eq!(r.time_to_exit, 22);
            }
            assert!((r.accumulated_reward - r.step_rewards.iter().sum::<f64>()).abs() < 1e-12);
        }
    }

    #[test]
    fn travel_distance_matches_integrated_speed() {
        let world = build_scenario_with(2, &ScenarioOptions::empty()).unwrap();
        let v0 = world.ego().speed;
        let t = run_episode(&mut ConstantPolicy(Action::Cruise), world).unwrap();
        let r = MetricsRecord::from_trajectory(&t);
        let mut v = vec![v0];
        v.extend(&t.speeds);
        let integral: f64 = v.windows(2).map(|w| 0.5 * (w[0] + w[1]) / PHYSICS_HZ).sum();
        assert!((integral - r.travel_distance).abs() < 0.01 * r.travel_distance);
    }

    #[test]
    fn paired_levels_share_seeds() {
        let a = run_eval(&RandomPolicy, DensityLevel::Low, 5, 77).unwrap();
        let b = run_eval(&ConstantPolicy(Action::Cruise), DensityLevel::Low, 5, 77).unwrap();
        let seeds = |r: &[MetricsRecord]| r.iter().map(|x| (x.seed, x.n_interact)).collect::<Vec<_>>();
        assert_eq!(seeds(&a), seeds(&b));
        assert!(a.iter().all(|r| r.n_interact <= 2));
    }

    #[test]
    fn aggregate_examples() {
        let a = aggregate(&[record(10.0, false, vec![]), record(20.0, false, vec![])]).unwrap();
        assert_eq!(a.reward.mean, 15.0);
        assert!((a.reward.std - 7.0711).abs() < 1e-4);
        let same = aggregate(&[record(3.0, false, vec![]), record(3.0, false, vec![])]).unwrap();
        assert_eq!(same.reward.std, 0.0);
        let mut recs: Vec<_> = (0..19).map(|_| record(5.0, false, vec![])).collect();
        recs.push(record(1.0, true, vec![]));
        assert_eq!(aggregate(&recs).unwrap().collision_rate_pct, 5.0);
        assert!(aggregate(&recs[..1]).unwrap().single);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn entropy_stats_examples() {
        let s = entropy_stats(&[record(0.0, false, vec![0.5; 4]), record(0.0, false, vec![1.0; 3])]).unwrap();
        assert_eq!((s.min, s.max, s.mean.mean), (0.5, 1.0, 0.75));
        assert!((s.mean.std - 0.353_553).abs() < 1e-5);
        let u = entropy_stats(&[record(0.0, false, vec![5f64.ln(); 22])]).unwrap();
        assert_eq!((u.min, u.max, u.mean.std), (5f64.ln(), 5f64.ln(), 0.0));
        assert!(entropy_stats(&[record(0.0, false, vec![])]).is_err());
    }

    #[test]
    fn csv_files_are_stable() {
        let recs = run_eval(&RandomPolicy, DensityLevel::Medium, 3, 1).unwrap();
        let groups = vec![EvalGroup {
            policy: "random".into(),
            density: DensityLevel::Medium,
            records: recs,
        }];
        let dir = tempfile::tempdir().unwrap();
        emit_results(&groups, dir.path()).unwrap();
        let s1 = std::fs::read(dir.path().join("summary.csv")).unwrap();
        let p1 = std::fs::read(dir.path().join("profiles.csv")).unwrap();
        let text = String::from_utf8(s1.clone()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split(',').count(), 17);
        assert_eq!(lines[1].split(',').count(), 17);
        assert_eq!(String::from_utf8(p1.clone()).unwrap().lines().count(), 1 + 22);
        emit_results(&groups, dir.path()).unwrap();
        assert_eq!(std::fs::read(dir.path().join("summary.csv")).unwrap(), s1);
        assert_eq!(std::fs::read(dir.path().join("profiles.csv")).unwrap(), p1);
    }
}
