//! Supervised training: the clear-condition pre-training schedule with
//! plateau-based learning-rate decay, and the single-epoch loop the
//! supervised baselines reuse.

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, Regime};
use crate::optim::{Sgd, SgdConfig};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct TrainSchedule {
    pub initial_lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    /// The learning rate is divided by this on every plateau.
    pub lr_decay_factor: f64,
    /// Epochs without validation improvement before a decay.
    pub patience_epochs: usize,
    /// Training ends at this many decays.
    pub max_lr_drops: usize,
    /// Hard cap on epochs; `0` leaves the model untouched.
    pub max_epochs: usize,
    /// Fraction of the training data held out for validation.
    pub val_fraction: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            initial_lr: 0.01,
            momentum: 0.9,
            batch_size: 16,
            eval_batch_size: 8,
            lr_decay_factor: 3.0,
            patience_epochs: 5,
            max_lr_drops: 3,
            max_epochs: 40,
            val_fraction: 0.1,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0)
            || self.batch_size == 0
            || self.eval_batch_size == 0
            || self.patience_epochs == 0
            || self.max_lr_drops == 0
        {
            return Err(Error::Config("schedule values must be positive".into()));
        }
        if !(self.lr_decay_factor > 1.0) {
            return Err(Error::Config("lr decay factor must exceed 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(
                "validation fraction must be in (0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.initial_lr,
            momentum: self.momentum,
            clip: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub lr_drops: usize,
    pub train_size: usize,
    pub val_size: usize,
}

impl TrainingLog {
    pub fn final_val_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.val_accuracy)
    }
}

/// Seeded train/validation split. Returns `(train, val)` indices.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (n as f64 * val_fraction).round() as usize;
    let val = idx.split_off(n - n_val.min(n));
    (idx, val)
}

/// Mean loss and accuracy with frozen statistics.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    images: &Tensor<T>,
    labels: &[usize],
    batch_size: usize,
) -> Result<(f64, f64)> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::Empty("evaluation set"));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let mut pass = model.pass(Regime::Eval, false);
        let x = model.input(&mut pass, images.select(chunk))?;
        let logits = model.forward(&mut pass, x)?;
        let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let l = pass.tape.softmax_cross_entropy(logits, &batch_labels)?;
        loss += pass.tape.value(l).item().as_f64() * chunk.len() as f64;
        correct += pass
            .tape
            .value(logits)
            .argmax_rows()
            .iter()
            .zip(&batch_labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok((loss / n as f64, correct as f64 / n as f64))
}

/// One supervised epoch over `order` in batch-statistics mode, updating
/// every trainable parameter and the running statistics. Trailing batches
/// smaller than two samples are skipped. Returns `(loss, accuracy, steps)`.
pub fn train_epoch<T: Real>(
    model: &mut Model<T>,
    images: &Tensor<T>,
    labels: &[usize],
    order: &[usize],
    batch_size: usize,
    opt: &mut Sgd<T>,
) -> Result<(f64, f64, usize)> {
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut seen = 0usize;
    let mut steps = 0usize;
    for chunk in order.chunks(batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let mut pass = model.pass(Regime::Train, true);
        let x = model.input(&mut pass, images.select(chunk))?;
        let logits = model.forward(&mut pass, x)?;
        let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let loss = pass.tape.softmax_cross_entropy(logits, &batch_labels)?;
        loss_sum += pass.tape.value(loss).item().as_f64() * chunk.len() as f64;
        correct += pass
            .tape
            .value(logits)
            .argmax_rows()
            .iter()
            .zip(&batch_labels)
            .filter(|(p, l)| p == l)
            .count();
        seen += chunk.len();
        let grads = pass.backward(loss)?;
        model.accumulate_grads(&pass, &grads);
        model.update_running_stats(&pass);
        opt.step(model.params_mut());
        steps += 1;
    }
    if seen == 0 {
        return Err(Error::Empty("training batch"));
    }
    Ok((loss_sum / seen as f64, correct as f64 / seen as f64, steps))
}

/// Supervised training with a seeded validation split. The learning rate
/// is divided by the decay factor whenever validation error has not
/// improved for `patience_epochs` epochs; training ends at the
/// `max_lr_drops`-th decay or after `max_epochs`.
pub fn train_supervised<T: Real>(
    model: &mut Model<T>,
    images: &Tensor<T>,
    labels: &[usize],
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<TrainingLog> {
    schedule.validate()?;
    if labels.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if images.shape().first() != Some(&labels.len()) {
        return Err(Error::shape(
            "train_supervised",
            images.shape(),
            &[labels.len()],
        ));
    }
    let (train, val) = split_indices(labels.len(), schedule.val_fraction, seed);
    if val.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    if train.len() < 2 {
        return Err(Error::Empty("training split"));
    }
    let mut log = TrainingLog {
        train_size: train.len(),
        val_size: val.len(),
        ..Default::default()
    };
    if schedule.max_epochs == 0 {
        return Ok(log);
    }

    let val_images = images.select(&val);
    let val_labels: Vec<usize> = val.iter().map(|&i| labels[i]).collect();
    let mut opt = Sgd::<T>::new(schedule.sgd())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_e90c);
    let mut best_err = f64::INFINITY;
    let mut stale = 0;
    let mut order = train.clone();
    model.set_all_trainable(true);

    for epoch in 0..schedule.max_epochs {
        order.shuffle(&mut rng);
        let lr = opt.lr().as_f64();
        let (train_loss, train_acc, _) =
            train_epoch(model, images, labels, &order, schedule.batch_size, &mut opt)?;
        let (val_loss, val_acc) =
            evaluate(model, &val_images, &val_labels, schedule.eval_batch_size)?;
        debug!("epoch {epoch}: lr {lr:.5} train {train_loss:.4}/{train_acc:.3} val {val_loss:.4}/{val_acc:.3}");
        log.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            train_accuracy: train_acc,
            val_loss,
            val_accuracy: val_acc,
        });

        let err = 1.0 - val_acc;
        if err < best_err {
            best_err = err;
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= schedule.patience_epochs {
            log.lr_drops += 1;
            if log.lr_drops >= schedule.max_lr_drops {
                break;
            }
            opt.set_lr(opt.lr() / T::from_f64(schedule.lr_decay_factor));
            stale = 0;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_constants() {
        let s = TrainSchedule::default();
        assert_eq!(s.initial_lr, 0.01);
        assert_eq!(s.lr_decay_factor, 3.0);
        assert_eq!(s.patience_epochs, 5);
        assert_eq!(s.max_lr_drops, 3);
        assert_eq!((s.batch_size, s.eval_batch_size), (16, 8));
        assert_eq!(s.val_fraction, 0.1);
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let (a, b) = split_indices(50, 0.1, 4);
        assert_eq!(b.len(), 5);
        assert!(a.iter().all(|i| !b.contains(i)));
        assert_eq!(split_indices(50, 0.1, 4), (a, b));
    }

    #[test]
    fn invalid_schedules() {
        let mut s = TrainSchedule {
            lr_decay_factor: 1.0,
            ..Default::default()
        };
        assert!(s.validate().is_err());
        s.lr_decay_factor = 3.0;
        s.batch_size = 0;
        assert!(s.validate().is_err());
    }
}
