//! Mini-batch training over token windows, shared by the teacher, BC and
//! entropy-weighted student runs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::weighted_nll;
use super::model::{ModelConfig, SeqModel};
use super::optim::{AdamW, AdamWConfig};
use super::scalar::Scalar;
use crate::dataset::{Batch, Dataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            batch_size: 16,
            epochs: 20,
            weight_decay: 5e-5,
            warmup_ratio: 0.1,
            grad_clip: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be finite and ≥ 0", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch size and epochs must be positive"));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::invalid("warm-up ratio must lie in [0, 1]"));
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::invalid("weight decay must be ≥ 0 and clip > 0"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_windows: usize) -> usize {
        n_windows.div_ceil(self.batch_size)
    }

    pub fn optimizer(&self, total_steps: usize) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_steps: (self.warmup_ratio * total_steps as f64).ceil() as usize,
            clip: Some(self.grad_clip),
            ..AdamWConfig::default()
        }
    }
}

/// Named independent random streams derived from one training seed.
pub struct TrainRngs {
    pub init: ChaCha8Rng,
    pub sampling: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
}

impl TrainRngs {
    pub fn from_seed(seed: u64) -> Self {
        let stream = |k| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self {
            init: stream(0),
            sampling: stream(1),
            dropout: stream(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog<X> {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub tokens: usize,
    #[serde(flatten)]
    pub extra: X,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog<X> {
    pub steps: Vec<StepLog<X>>,
}

impl<X> TrainLog<X> {
    /// Token-weighted mean loss of each epoch.
    pub fn epoch_losses(&self) -> Vec<f64> {
        let n = self.steps.last().map_or(0, |s| s.epoch + 1);
        let mut sums = vec![(0.0, 0usize); n];
        for s in &self.steps {
            sums[s.epoch].0 += s.loss * s.tokens as f64;
            sums[s.epoch].1 += s.tokens;
        }
        sums.into_iter().map(|(l, n)| l / n.max(1) as f64).collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }
}

/// Per-token loss weights for one batch; `None` leaves every weight at one.
pub trait Weigher<T> {
    type Log;
    /// `valid` lists the flat `(window, slot)` indices in the order of the
    /// student's logits.
    fn weigh(&mut self, batch: &Batch, valid: &[usize]) -> Result<(Option<Vec<T>>, Self::Log)>;
}

/// Plain unweighted cross-entropy.
pub struct Unweighted;

impl<T> Weigher<T> for Unweighted {
    type Log = ();
    fn weigh(&mut self, _: &Batch, _: &[usize]) -> Result<(Option<Vec<T>>, ())> {
        Ok((None, ()))
    }
}

/// Fresh model trained with unweighted cross-entropy.
pub fn train<T: Scalar>(
    ds: &Dataset,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(SeqModel<T>, TrainLog<()>)> {
    let mut rngs = TrainRngs::from_seed(seed);
    let mut model = SeqModel::new(model_cfg, &mut rngs.init)?;
    let log = train_model(&mut model, ds, cfg, &mut rngs, &mut Unweighted)?;
    Ok((model, log))
}

/// Runs `cfg.epochs` shuffled passes over every window of `ds`.
pub fn train_model<T: Scalar, W: Weigher<T>>(
    model: &mut SeqModel<T>,
    ds: &Dataset,
    cfg: &TrainConfig,
    rngs: &mut TrainRngs,
    weigher: &mut W,
) -> Result<TrainLog<W::Log>> {
    cfg.validate()?;
    if ds.n_windows() == 0 {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if ds.context > model.cfg().context {
        return Err(Error::invalid(format!(
            "dataset windows of {} exceed model context {}",
            ds.context,
            model.cfg().context
        )));
    }
    let per_epoch = cfg.steps_per_epoch(ds.n_windows());
    let total = per_epoch * cfg.epochs;
    let mut opt = AdamW::new(cfg.optimizer(total), model.params.len());
    let mut order: Vec<usize> = (0..ds.n_windows()).collect();
    let mut steps = Vec::with_capacity(total);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rngs.sampling);
        for ids in order.chunks(cfg.batch_size) {
            let batch = ds.batch(ids);
            let fwd = model.forward(&batch, true, &mut rngs.dropout)?;
            let (weights, extra) = weigher.weigh(&batch, &fwd.valid)?;
            let (loss, dlogits) = weighted_nll(&fwd.logits, &fwd.targets, weights.as_deref())?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step: steps.len(),
                    loss,
                });
            }
            let mut grads = model.backward(&fwd, &dlogits);
            model.update_running_stats(&fwd);
            let info = opt.update(&mut model.params, &mut grads);
            steps.push(StepLog {
                step: steps.len(),
                epoch,
                loss,
                lr: info.lr,
                grad_norm: info.grad_norm,
                tokens: fwd.n_valid(),
                extra,
            });
        }
    }
    Ok(TrainLog { steps })
}

/// Mean cross-entropy over every valid token of `ds` in evaluation mode.
pub fn evaluate_loss<T: Scalar>(model: &SeqModel<T>, ds: &Dataset, batch_size: usize) -> Result<f64> {
    let ids: Vec<usize> = (0..ds.n_windows()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut sum, mut n) = (0.0, 0usize);
    for chunk in ids.chunks(batch_size.max(1)) {
        let fwd = model.forward(&ds.batch(chunk), false, &mut rng)?;
        let (loss, _) = weighted_nll(&fwd.logits, &fwd.targets, None)?;
        sum += loss * fwd.n_valid() as f64;
        n += fwd.n_valid();
    }
    if n == 0 {
        return Err(Error::invalid("dataset has no valid tokens"));
    }
    Ok(sum / n as f64)
}
