//! The task identifier: a single linear layer over globally pooled block-1
//! features, smoothed by an 8-frame majority vote.

use std::collections::VecDeque;

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::autodiff::Tape;
use crate::container::{Blob, Container};
use crate::data::Condition;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{Parameter, Sgd};
use crate::tensor::Tensor;
use crate::train::{split_indices, EpochRecord, TrainSchedule, TrainingLog};

/// Current frame plus the previous seven.
pub const VOTE_WINDOW: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct TaskClassifier {
    /// Output unit `k` predicts `conditions[k]`.
    pub conditions: Vec<Condition>,
    /// `[K, D]`.
    pub weight: Tensor<f32>,
    /// `[K]`.
    pub bias: Tensor<f32>,
    pub log: TrainingLog,
}

/// Channel means of block-1 features: `[N, C, H, W]` to `[N, C]`.
pub fn pool_features(features: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = features.shape();
    if s.len() != 4 {
        return Err(Error::shape("pool_features", s, &[0, 0, 0, 0]));
    }
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut out = Vec::with_capacity(n * c);
    for plane in features.data().chunks(hw.max(1)) {
        out.push(plane.iter().sum::<f32>() / hw as f32);
    }
    Tensor::new(vec![n, c], out)
}

/// Pooled block-1 features of `images`, computed in eval mode in chunks.
pub fn pooled_shallow_features(
    model: &Model<f32>,
    images: &Tensor<f32>,
    batch: usize,
) -> Result<Tensor<f32>> {
    let n = images.shape().first().copied().unwrap_or(0);
    let idx: Vec<usize> = (0..n).collect();
    let mut parts = Vec::new();
    for chunk in idx.chunks(batch.max(1)) {
        parts.push(pool_features(
            &model.shallow_features(&images.select(chunk))?,
        )?);
    }
    if parts.is_empty() {
        return Err(Error::Empty("task identifier images"));
    }
    Tensor::concat(&parts)
}

impl TaskClassifier {
    pub fn num_conditions(&self) -> usize {
        self.conditions.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn logits(&self, pooled: &[f32]) -> Vec<f32> {
        let d = self.feature_dim();
        (0..self.num_conditions())
            .map(|k| {
                let row = &self.weight.data()[k * d..(k + 1) * d];
                self.bias.data()[k] + row.iter().zip(pooled).map(|(w, x)| w * x).sum::<f32>()
            })
            .collect()
    }

    /// Argmax over the allowed outputs (all when `allowed` is `None`); ties
    /// go to the lowest index.
    pub fn classify_frame(&self, pooled: &[f32], allowed: Option<&[bool]>) -> usize {
        let mut best: Option<(usize, f32)> = None;
        for (k, v) in self.logits(pooled).into_iter().enumerate() {
            if allowed.is_some_and(|a| !a[k]) {
                continue;
            }
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((k, v));
            }
        }
        best.map(|(k, _)| k).unwrap_or(0)
    }

    pub fn index_of(&self, condition: Condition) -> Result<usize> {
        self.conditions
            .iter()
            .position(|&c| c == condition)
            .ok_or_else(|| Error::UnknownTask(condition.name().into()))
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(
            "taskid",
            json!({ "conditions": self.conditions, "log": self.log }),
        );
        c.push(Blob::f32(
            "weight",
            self.weight.shape().to_vec(),
            self.weight.data().to_vec(),
        ));
        c.push(Blob::f32(
            "bias",
            self.bias.shape().to_vec(),
            self.bias.data().to_vec(),
        ));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("taskid")?;
        let conditions: Vec<Condition> = serde_json::from_value(c.meta["conditions"].clone())?;
        let log: TrainingLog = serde_json::from_value(c.meta["log"].clone())?;
        let w = c.blob("weight")?;
        let b = c.blob("bias")?;
        if w.shape.len() != 2 || w.shape[0] != conditions.len() || b.shape != [conditions.len()] {
            return Err(Error::Corrupt("task identifier shape".into()));
        }
        Ok(TaskClassifier {
            weight: Tensor::new(w.shape.clone(), c.f32s("weight")?.to_vec())?,
            bias: Tensor::new(b.shape.clone(), c.f32s("bias")?.to_vec())?,
            conditions,
            log,
        })
    }
}

/// Trains the linear layer with cross-entropy on pooled block-1 features of
/// each condition's images. The network is only read. Training runs on
/// standardized features; the standardization is folded into the final
/// weights, so the result is one plain linear layer.
pub fn train_task_identifier(
    model: &Model<f32>,
    sets: &[(Condition, &Tensor<f32>)],
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<TaskClassifier> {
    schedule.validate()?;
    if sets.len() < 2 {
        return Err(Error::invalid(
            "task identifier needs at least two conditions",
        ));
    }
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for (k, (cond, images)) in sets.iter().enumerate() {
        if sets[..k].iter().any(|(c, _)| c == cond) {
            return Err(Error::DuplicateTask(cond.name().into()));
        }
        if images.shape().first().copied().unwrap_or(0) == 0 {
            return Err(Error::Empty("condition images"));
        }
        let f = pooled_shallow_features(model, images, 64)?;
        labels.extend(std::iter::repeat_n(k, f.shape()[0]));
        feats.push(f);
    }
    let x = Tensor::concat(&feats)?;
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let kc = sets.len();

    let mut mean = vec![0f64; d];
    let mut sq = vec![0f64; d];
    for row in x.data().chunks(d) {
        for j in 0..d {
            mean[j] += row[j] as f64;
            sq[j] += (row[j] as f64).powi(2);
        }
    }
    let mean: Vec<f64> = mean.iter().map(|m| m / n as f64).collect();
    let std: Vec<f64> = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| (s / n as f64 - m * m).max(0.0).sqrt().max(1e-6))
        .collect();
    let z = Tensor::new(
        vec![n, d],
        x.data()
            .iter()
            .enumerate()
            .map(|(i, &v)| ((v as f64 - mean[i % d]) / std[i % d]) as f32)
            .collect(),
    )?;

    let (train, val) = split_indices(n, schedule.val_fraction, seed);
    if val.is_empty() || train.len() < 2 {
        return Err(Error::Empty("task identifier split"));
    }
    let mut params = vec![
        Parameter::new("taskid.weight", Tensor::zeros(vec![kc, d])),
        Parameter::new("taskid.bias", Tensor::zeros(vec![kc])),
    ];
    let mut opt = Sgd::<f32>::new(schedule.sgd())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a5c_1d);
    let mut log = TrainingLog {
        train_size: train.len(),
        val_size: val.len(),
        ..Default::default()
    };
    let accuracy = |params: &[Parameter<f32>], idx: &[usize]| -> Result<(f64, f64)> {
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(z.select(idx));
        let w = tape.constant(params[0].tensor.clone());
        let b = tape.constant(params[1].tensor.clone());
        let logits = tape.linear(xv, w, Some(b))?;
        let l: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let loss = tape.softmax_cross_entropy(logits, &l)?;
        let pred = tape.value(logits).argmax_rows();
        let correct = pred.iter().zip(&l).filter(|(p, l)| p == l).count();
        Ok((
            tape.value(loss).item() as f64,
            correct as f64 / idx.len() as f64,
        ))
    };

    let mut order = train.clone();
    let mut best_err = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..schedule.max_epochs {
        order.shuffle(&mut rng);
        let lr = opt.lr() as f64;
        let mut loss_sum = 0.0;
        let mut seen = 0;
        for chunk in order.chunks(schedule.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut tape = Tape::<f32>::new();
            let xv = tape.constant(z.select(chunk));
            let w = tape.leaf(params[0].tensor.clone(), true);
            let b = tape.leaf(params[1].tensor.clone(), true);
            let logits = tape.linear(xv, w, Some(b))?;
            let l: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = tape.softmax_cross_entropy(logits, &l)?;
            loss_sum += tape.value(loss).item() as f64 * chunk.len() as f64;
            seen += chunk.len();
            let grads = tape.backward(loss)?;
            params[0].accumulate_grad(grads.get(w).expect("weight is tracked"));
            params[1].accumulate_grad(grads.get(b).expect("bias is tracked"));
            opt.step(&mut params);
        }
        let (_, train_acc) = accuracy(&params, &train)?;
        let (val_loss, val_acc) = accuracy(&params, &val)?;
        log.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / seen.max(1) as f64,
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
            opt.set_lr(opt.lr() / schedule.lr_decay_factor as f32);
            stale = 0;
        }
    }
    debug!(
        "task identifier: {} epochs, val accuracy {:.4}",
        log.epochs.len(),
        log.final_val_accuracy().unwrap_or(f64::NAN)
    );

    // Fold the standardization: W' = W / std, b' = b - W' · mean.
    let w = params[0].tensor.data();
    let mut weight = vec![0f32; kc * d];
    let mut bias = params[1].tensor.data().to_vec();
    for k in 0..kc {
        let mut shift = 0f64;
        for j in 0..d {
            let wf = w[k * d + j] as f64 / std[j];
            weight[k * d + j] = wf as f32;
            shift += wf * mean[j];
        }
        bias[k] = (bias[k] as f64 - shift) as f32;
    }
    Ok(TaskClassifier {
        conditions: sets.iter().map(|(c, _)| *c).collect(),
        weight: Tensor::new(vec![kc, d], weight)?,
        bias: Tensor::new(vec![kc], bias)?,
        log,
    })
}

/// The most recent predictions, newest last.
#[derive(Clone, Debug, Default)]
pub struct VoteWindow {
    slots: VecDeque<usize>,
}

impl VoteWindow {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, prediction: usize) {
        if self.slots.len() == VOTE_WINDOW {
            self.slots.pop_front();
        }
        self.slots.push_back(prediction);
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn clear(&mut self) {
        self.slots.clear();
    }

    /// Modal prediction over the filled slots; ties go to whichever tied
    /// id was predicted most recently.
    pub fn vote(&self) -> Option<usize> {
        vote(self.slots.iter().copied())
    }
}

/// Majority over `predictions` (oldest first) with the recency tie-break.
pub fn vote(predictions: impl IntoIterator<Item = usize>) -> Option<usize> {
    let preds: Vec<usize> = predictions.into_iter().collect();
    let max_id = *preds.iter().max()?;
    let mut counts = vec![0usize; max_id + 1];
    preds.iter().for_each(|&p| counts[p] += 1);
    let top = *counts.iter().max()?;
    preds.iter().rev().copied().find(|&p| counts[p] == top)
}

/// The condition reported by stream metadata.
pub fn oracle_task_id(metadata: Option<Condition>) -> Result<Condition> {
    metadata.ok_or(Error::Empty("frame condition metadata"))
}
