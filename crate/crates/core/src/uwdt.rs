//! Entropy-weighted distillation: the teacher's predictive entropy on each
//! token sets that token's weight in the student's cross-entropy.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::nn::loss::{entropies, weighted_nll};
use crate::nn::{train_model, ModelConfig, Scalar, SeqModel, TrainConfig, TrainLog, TrainRngs, Weigher};
use crate::rollout::{run_episodes, ModelPolicy, Policy};
use crate::sim::{ScenarioOptions, N_ACTIONS};

pub const DEFAULT_RATIO: f64 = 1.3;
pub const DEFAULT_W_MAX: f64 = 1.5;

pub fn max_entropy() -> f64 {
    (N_ACTIONS as f64).ln()
}

/// Exponent that maps the entropy range onto a weight ratio of `r`.
pub fn compute_beta(r: f64, h_min: f64, h_max: f64) -> Result<f64> {
    if !(r > 1.0) {
        return Err(Error::invalid(format!("weight ratio r = {r} must exceed 1")));
    }
    if !(h_min > 0.0) {
        return Err(Error::invalid(format!("H_min = {h_min} must be positive")));
    }
    if !(h_min < h_max) {
        return Err(Error::invalid(format!(
            "degenerate entropy range [{h_min}, {h_max}]"
        )));
    }
    Ok(r.ln() / (h_max / h_min).ln())
}

pub fn raw_weight(h: f64, beta: f64) -> f64 {
    h.powf(beta)
}

/// Rescales to unit mean. Dividing by the maximum first makes equal inputs
/// come out as exactly one.
pub fn normalize_weights(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::invalid("cannot normalize an empty weight vector"));
    }
    if raw.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(Error::invalid("weights must be positive and finite"));
    }
    let max = raw.iter().cloned().fold(0.0, f64::max);
    let scaled: Vec<f64> = raw.iter().map(|&w| w / max).collect();
    let mean = scaled.iter().sum::<f64>() / scaled.len() as f64;
    Ok(scaled.iter().map(|&w| w / mean).collect())
}

pub fn clip_weights(w: &[f64], w_max: f64) -> Vec<f64> {
    w.iter().map(|&v| v.min(w_max)).collect()
}

/// `-(1/M) Σ w_t log p_t(a_t)` over valid tokens.
pub fn student_loss<T: Scalar>(logits: &[T], targets: &[u8], weights: &[f64]) -> Result<f64> {
    let w: Vec<T> = weights.iter().map(|&v| T::c(v)).collect();
    weighted_nll(logits, targets, Some(&w)).map(|r| r.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSchedule {
    pub r: f64,
    pub w_max: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub beta: f64,
    /// Rollouts used to measure the entropy range.
    pub n_episodes: usize,
    pub seeds: Vec<u64>,
}

/// The three stages of one batch's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenWeights {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub clipped: Vec<f64>,
}

impl WeightSchedule {
    pub fn new(r: f64, w_max: f64, h_min: f64, h_max: f64) -> Result<Self> {
        if !(w_max >= 1.0) {
            return Err(Error::invalid(format!("w_max = {w_max} must be at least 1")));
        }
        if h_max > max_entropy() + 1e-12 {
            return Err(Error::invalid(format!("H_max = {h_max} exceeds ln {N_ACTIONS}")));
        }
        Ok(Self {
            r,
            w_max,
            h_min,
            h_max,
            beta: compute_beta(r, h_min, h_max)?,
            n_episodes: 0,
            seeds: vec![],
        })
    }

    pub fn from_range(r: f64, w_max: f64, range: &EntropyRange) -> Result<Self> {
        let mut s = Self::new(r, w_max, range.h_min, range.h_max)?;
        s.n_episodes = range.seeds.len();
        s.seeds = range.seeds.clone();
        Ok(s)
    }

    /// Entropies are clamped to the measured range before the power map.
    pub fn weights(&self, h: &[f64]) -> Result<TokenWeights> {
        let raw: Vec<f64> = h
            .iter()
            .map(|&v| raw_weight(v.clamp(self.h_min, self.h_max), self.beta))
            .collect();
        let normalized = normalize_weights(&raw)?;
        let clipped = clip_weights(&normalized, self.w_max);
        Ok(TokenWeights {
            raw,
            normalized,
            clipped,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("schedule serializes");
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: Self = serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        let check = Self::new(s.r, s.w_max, s.h_min, s.h_max)?;
        if (check.beta - s.beta).abs() > 1e-12 {
            return Err(Error::invalid("stored beta disagrees with r and the entropy range"));
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyRange {
    pub h_min: f64,
    pub h_max: f64,
    pub seeds: Vec<u64>,
}

/// Global min and max entropy over every decision of greedy rollouts.
pub fn measure_entropy_range<P: Policy + Clone + Sync>(
    policy: &P,
    seeds: &[u64],
    opts: &ScenarioOptions,
) -> Result<EntropyRange> {
    if seeds.is_empty() {
        return Err(Error::invalid("need at least one episode to measure entropies"));
    }
    let trajs = run_episodes(policy, seeds, opts)?;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in &trajs {
        for p in &t.distributions {
            let h = crate::nn::entropy(p);
            if !h.is_finite() {
                return Err(Error::InvalidState(format!("non-finite entropy in episode {}", t.seed)));
            }
            lo = lo.min(h);
            hi = hi.max(h);
        }
    }
    if !lo.is_finite() {
        return Err(Error::InvalidState("policy exposed no action distributions".into()));
    }
    Ok(EntropyRange {
        h_min: lo,
        h_max: hi,
        seeds: seeds.to_vec(),
    })
}

pub fn measure_teacher_entropy<T: Scalar>(
    teacher: &std::sync::Arc<SeqModel<T>>,
    seeds: &[u64],
    opts: &ScenarioOptions,
) -> Result<EntropyRange> {
    measure_entropy_range(&ModelPolicy::greedy(teacher.clone()), seeds, opts)
}

/// Source of per-token predictive entropies for a batch.
pub trait Teacher: Sync {
    /// Entropy of every valid token, in flat `(window, slot)` order.
    fn entropies(&self, batch: &Batch) -> Result<Vec<f64>>;
    fn config(&self) -> Option<&ModelConfig> {
        None
    }
}

impl<T: Scalar> Teacher for SeqModel<T> {
    fn entropies(&self, batch: &Batch) -> Result<Vec<f64>> {
        // eval mode never draws from the generator
        let fwd = self.forward(batch, false, &mut ChaCha8Rng::seed_from_u64(0))?;
        let h = entropies(&fwd.logits);
        if h.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidState("teacher produced non-finite logits".into()));
        }
        Ok(h)
    }

    fn config(&self) -> Option<&ModelConfig> {
        Some(self.cfg())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchWeightStats {
    pub mean_entropy: f64,
    pub min_entropy: f64,
    pub max_entropy: f64,
    pub pre_clip_mean: f64,
    pub post_clip_max: f64,
    pub post_clip_min: f64,
    pub frac_clipped: f64,
}

pub struct EntropyWeigher<'a, Tc: ?Sized> {
    pub teacher: &'a Tc,
    pub schedule: &'a WeightSchedule,
}

impl<T: Scalar, Tc: Teacher + ?Sized> Weigher<T> for EntropyWeigher<'_, Tc> {
    type Log = BatchWeightStats;

    fn weigh(&mut self, batch: &Batch, valid: &[usize]) -> Result<(Option<Vec<T>>, BatchWeightStats)> {
        let h = self.teacher.entropies(batch)?;
        if h.len() != valid.len() {
            return Err(Error::invalid(format!(
                "teacher gave {} entropies for {} tokens",
                h.len(),
                valid.len()
            )));
        }
        let w = self.schedule.weights(&h)?;
        let m = h.len() as f64;
        let stats = BatchWeightStats {
            mean_entropy: h.iter().sum::<f64>() / m,
            min_entropy: h.iter().cloned().fold(f64::INFINITY, f64::min),
            max_entropy: h.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            pre_clip_mean: w.normalized.iter().sum::<f64>() / m,
            post_clip_max: w.clipped.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            post_clip_min: w.clipped.iter().cloned().fold(f64::INFINITY, f64::min),
            frac_clipped: w.normalized.iter().filter(|&&v| v > self.schedule.w_max).count() as f64 / m,
        };
        Ok((Some(w.clipped.iter().map(|&v| T::c(v)).collect()), stats))
    }
}

/// Trains a student against a frozen teacher. With `init` the student starts
/// from those parameters instead of a fresh draw.
pub fn train_student<T: Scalar, Tc: Teacher + ?Sized>(
    teacher: &Tc,
    ds: &Dataset,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    schedule: &WeightSchedule,
    seed: u64,
    init: Option<&SeqModel<T>>,
) -> Result<(SeqModel<T>, TrainLog<BatchWeightStats>)> {
    if let Some(tc) = teacher.config() {
        if tc.context != model_cfg.context || tc.encoder != model_cfg.encoder {
            return Err(Error::invalid("teacher and student must share encoder and context"));
        }
    }
    let mut rngs = TrainRngs::from_seed(seed);
    let mut student = SeqModel::new(model_cfg, &mut rngs.init)?;
    if let Some(m) = init {
        m.cfg().check_compatible(student.cfg()).map_err(|e| Error::invalid(e.to_string()))?;
        student.params.copy_from_slice(&m.params);
        student.buffers.copy_from_slice(&m.buffers);
    }
    let mut weigher = EntropyWeigher { teacher, schedule };
    let log = train_model(&mut student, ds, cfg, &mut rngs, &mut weigher)?;
    Ok((student, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn beta_examples() {
        let b = compute_beta(1.3, 1.14, 1.47).unwrap();
        assert!((b - 1.0320).abs() < 1e-3, "{b}");
        assert!((compute_beta(std::f64::consts::E, 1.0, std::f64::consts::E).unwrap() - 1.0).abs() < 1e-12);
        assert!((compute_beta(2.0, 0.5, 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert!(compute_beta(1.3, 1.0, 1.0).is_err());
        assert!(compute_beta(1.3, 0.0, 1.0).is_err());
        assert!(compute_beta(1.0, 0.5, 1.0).is_err());
    }

    #[test]
    fn raw_weight_examples() {
        let b = compute_beta(1.3, 1.14, 1.47).unwrap();
        assert_eq!(raw_weight(1.0, b), 1.0);
        assert!((raw_weight(1.47, b) - 1.4882).abs() < 1e-4);
        assert!((raw_weight(1.14, b) - 1.1448).abs() < 1e-4);
        assert!((raw_weight(1.47, b) / raw_weight(1.14, b) - 1.3).abs() < 1e-6);
        assert_eq!(raw_weight(0.7, 0.0), 1.0);
    }

    #[test]
    fn normalize_and_clip_examples() {
        assert_eq!(normalize_weights(&[2.0, 4.0, 6.0]).unwrap(), vec![0.5, 1.0, 1.5]);
        assert_eq!(normalize_weights(&[0.37; 7]).unwrap(), vec![1.0; 7]);
        assert!(normalize_weights(&[]).is_err());
        assert!(normalize_weights(&[1.0, 0.0]).is_err());
        assert_eq!(clip_weights(&[0.5, 1.0, 1.8], 1.5), vec![0.5, 1.0, 1.5]);
        assert_eq!(clip_weights(&[0.5, 1.0], 1.5), vec![0.5, 1.0]);
    }

    #[test]
    fn student_loss_hand_batch() {
        let l = [0.5f64.ln(), 0.5f64.ln(), -1e300, -1e300, -1e300,
            0.25f64.ln(), 0.25f64.ln(), 0.25f64.ln(), 0.25f64.ln(), -1e300];
        let v = student_loss(&l, &[0, 2], &[1.5, 0.5]).unwrap();
        assert!((v - 0.86643).abs() < 1e-5);
        assert!(student_loss(&l, &[0, 2], &[1.0]).is_err());
    }

    #[test]
    fn constant_entropy_gives_unit_weights() {
        let s = WeightSchedule::new(1.3, 1.5, 1.0, 1.5).unwrap();
        for h in [0.2, 1.2, 1.6] {
            assert_eq!(s.weights(&[h; 9]).unwrap().clipped, vec![1.0; 9]);
        }
    }

    #[test]
    fn two_level_batch_has_ratio_r() {
        let s = WeightSchedule::new(1.3, 1.5, 1.14, 1.47).unwrap();
        let w = s.weights(&[1.14, 1.47, 1.14, 1.47]).unwrap();
        assert!((w.raw[1] / w.raw[0] - 1.3).abs() < 1e-12);
        assert!((w.normalized[1] / w.normalized[0] - 1.3).abs() < 1e-12);
    }

    #[test]
    fn schedule_validation_and_json() {
        assert!(WeightSchedule::new(1.3, 0.9, 1.0, 1.2).is_err());
        assert!(WeightSchedule::new(1.3, 1.5, 1.0, 1.7).is_err());
        let s = WeightSchedule::new(1.3, 1.5, 1.1, 1.4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        s.save(&p).unwrap();
        assert_eq!(WeightSchedule::load(&p).unwrap(), s);
    }

    proptest! {
        #[test]
        fn normalized_mean_is_one(raw in prop::collection::vec(1e-3f64..1e3, 1..64)) {
            let w = normalize_weights(&raw).unwrap();
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            prop_assert!((mean - 1.0).abs() < 1e-9);
        }

        #[test]
        fn weights_keep_entropy_order(h in prop::collection::vec(0.0f64..1.61, 2..40), lo in 0.1f64..0.8, span in 0.1f64..0.8) {
            let s = WeightSchedule::new(1.3, 1.5, lo, lo + span).unwrap();
            let w = s.weights(&h).unwrap();
            for i in 0..h.len() {
                for j in 0..h.len() {
                    let (a, b) = (h[i].clamp(s.h_min, s.h_max), h[j].clamp(s.h_min, s.h_max));
                    if a > b {
                        prop_assert!(w.raw[i] > w.raw[j]);
                        prop_assert!(w.normalized[i] > w.normalized[j]);
                        prop_assert!(w.clipped[i] >= w.clipped[j]);
                    }
                }
                prop_assert!(w.clipped[i] > 0.0 && w.clipped[i] <= 1.5);
            }
            let pre = w.normalized.iter().sum::<f64>() / h.len() as f64;
            prop_assert!((pre - 1.0).abs() < 1e-9);
            let post = w.clipped.iter().sum::<f64>() / h.len() as f64;
            prop_assert!(post <= 1.0 + 1e-12);
            let ratio = w.raw.iter().cloned().fold(0.0, f64::max) / w.raw.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert!(ratio <= 1.3 + 1e-9);
        }

        #[test]
        fn exact_ratio_for_any_range(r in 1.01f64..3.0, lo in 0.05f64..1.0, span in 0.05f64..0.6) {
            let b = compute_beta(r, lo, lo + span).unwrap();
            prop_assert!(b > 0.0);
            prop_assert!((raw_weight(lo + span, b) / raw_weight(lo, b) - r).abs() < 1e-6);
        }
    }
}
