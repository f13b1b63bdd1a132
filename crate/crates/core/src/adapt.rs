//! Affine-only adaptation and the per-condition affine bank.

use std::path::Path;

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{Blob, Container};
use crate::error::{Error, Result};
use crate::model::{Model, Regime, SwapScope};
use crate::optim::{Sgd, SgdConfig};
use crate::stats::{alignment_loss, ActivationStats};
use crate::tensor::{Real, Tensor};

pub const BANK_VERSION: u32 = 1;
pub const CLEAR_TASK: &str = "clear";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct AdaptConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Elementwise gradient clip; `None` disables it.
    pub clip: Option<f64>,
    pub batch_size: usize,
    pub scope: SwapScope,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            lr: 0.01,
            momentum: 0.9,
            clip: Some(1.0),
            batch_size: 16,
            scope: SwapScope::AfterCut,
        }
    }
}

impl AdaptConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            clip: self.clip,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptMeta {
    /// Loss of every optimizer step, in order.
    pub loss_trace: Vec<f64>,
    pub config: AdaptConfig,
    pub seed: u64,
    pub images: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineLayer<T: Real = f32> {
    pub name: String,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineEntry<T: Real = f32> {
    pub task: String,
    pub layers: Vec<AffineLayer<T>>,
    pub model_checksum: u64,
    pub meta: Option<AdaptMeta>,
}

impl<T: Real> AffineEntry<T> {
    /// The model's current affine parameters for `scope`.
    pub fn capture(model: &Model<T>, task: impl Into<String>, scope: SwapScope) -> Self {
        let layers = model
            .bankable_norms(scope)
            .into_iter()
            .map(|ni| {
                let (g, b) = model.affine(ni);
                AffineLayer {
                    name: model.norms()[ni].name.clone(),
                    gamma: g.to_vec(),
                    beta: b.to_vec(),
                }
            })
            .collect();
        AffineEntry {
            task: task.into(),
            layers,
            model_checksum: model.backbone_checksum(),
            meta: None,
        }
    }

    pub fn num_values(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.gamma.len() + l.beta.len())
            .sum()
    }

    pub fn payload_bytes(&self) -> usize {
        self.num_values() * std::mem::size_of::<f32>()
    }

    /// Bitwise comparison of the parameter arrays.
    pub fn same_parameters(&self, other: &Self) -> bool {
        let bits = |v: &[T]| v.iter().map(|x| x.as_f64().to_bits()).collect::<Vec<_>>();
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.name == b.name
                    && bits(&a.gamma) == bits(&b.gamma)
                    && bits(&a.beta) == bits(&b.beta)
            })
    }
}

/// Resolves entry layer names against the model, requiring the exact
/// bankable set of `scope` in network order.
fn resolve<T: Real>(
    model: &Model<T>,
    entry: &AffineEntry<T>,
    scope: SwapScope,
) -> Result<Vec<usize>> {
    if entry.model_checksum != model.backbone_checksum() {
        return Err(Error::ChecksumMismatch {
            expected: model.backbone_checksum(),
            found: entry.model_checksum,
        });
    }
    let expected = model.bankable_norms(scope);
    let names: Vec<&str> = entry.layers.iter().map(|l| l.name.as_str()).collect();
    let want: Vec<&str> = expected
        .iter()
        .map(|&i| model.norms()[i].name.as_str())
        .collect();
    if names != want {
        return Err(Error::LayerMismatch(format!(
            "entry `{}` has {names:?}, model expects {want:?}",
            entry.task
        )));
    }
    Ok(expected)
}

/// Overwrites the bankable affine parameters of `model` with `entry`.
pub fn plug_in<T: Real>(
    model: &mut Model<T>,
    entry: &AffineEntry<T>,
    scope: SwapScope,
) -> Result<()> {
    let norms = resolve(model, entry, scope)?;
    for (ni, l) in norms.into_iter().zip(&entry.layers) {
        model.set_affine(ni, &l.gamma, &l.beta)?;
    }
    Ok(())
}

/// One epoch of alignment-loss descent on the bankable affine parameters
/// over seeded-shuffled `images`. The model is returned to its incoming
/// affine parameters and trainable flags before returning, also on error.
pub fn adapt_affine<T: Real>(
    model: &mut Model<T>,
    stats: &ActivationStats,
    images: &Tensor<T>,
    task: &str,
    config: &AdaptConfig,
    seed: u64,
) -> Result<AffineEntry<T>> {
    let n = images.shape().first().copied().unwrap_or(0);
    if config.batch_size < 2 {
        return Err(Error::invalid("adaptation batch size must be at least 2"));
    }
    if n < config.batch_size {
        return Err(Error::invalid(format!(
            "adaptation needs at least one full batch of {} images, got {n}",
            config.batch_size
        )));
    }
    if stats.model_checksum != model.backbone_checksum() {
        return Err(Error::ChecksumMismatch {
            expected: model.backbone_checksum(),
            found: stats.model_checksum,
        });
    }
    let scope = config.scope;
    let original = AffineEntry::capture(model, CLEAR_TASK, scope);
    let mask = model.trainable_mask();
    let result = run_epoch(model, stats, images, task, config, seed);
    plug_in(model, &original, scope)?;
    model.set_trainable_mask(&mask);
    model.zero_grads();
    result
}

fn run_epoch<T: Real>(
    model: &mut Model<T>,
    stats: &ActivationStats,
    images: &Tensor<T>,
    task: &str,
    config: &AdaptConfig,
    seed: u64,
) -> Result<AffineEntry<T>> {
    let norms = model.bankable_norms(config.scope);
    model.train_only_affine(&norms);
    model.zero_grads();
    let mut opt = Sgd::<T>::new(config.sgd())?;
    let mut order: Vec<usize> = (0..images.shape()[0]).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut trace = Vec::new();
    for chunk in order.chunks(config.batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let mut pass = model.pass(Regime::Eval, true);
        let x = model.input(&mut pass, images.select(chunk))?;
        model.forward(&mut pass, x)?;
        let loss = alignment_loss(model, &mut pass, stats, &norms)?;
        let value = pass.tape.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "alignment loss at step {}",
                trace.len()
            )));
        }
        trace.push(value);
        let grads = pass.backward(loss)?;
        model.accumulate_grads(&pass, &grads);
        opt.step(model.params_mut());
    }
    debug!(
        "adapt {task}: {} steps, loss {:.5} -> {:.5}",
        trace.len(),
        trace.first().copied().unwrap_or(f64::NAN),
        trace.last().copied().unwrap_or(f64::NAN)
    );
    let mut entry = AffineEntry::capture(model, task, config.scope);
    entry.meta = Some(AdaptMeta {
        loss_trace: trace,
        config: *config,
        seed,
        images: images.shape()[0],
    });
    Ok(entry)
}

/// The persistent memory bank: the pristine clear entry plus one adapted
/// entry per condition, in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineBank {
    pub version: u32,
    pub scope: SwapScope,
    pub model_checksum: u64,
    clear: AffineEntry<f32>,
    entries: Vec<AffineEntry<f32>>,
}

impl AffineBank {
    pub fn new(model: &Model<f32>, scope: SwapScope) -> Self {
        let clear = AffineEntry::capture(model, CLEAR_TASK, scope);
        AffineBank {
            version: BANK_VERSION,
            scope,
            model_checksum: clear.model_checksum,
            clear,
            entries: Vec::new(),
        }
    }

    pub fn clear_entry(&self) -> &AffineEntry<f32> {
        &self.clear
    }

    /// Task ids in lookup order, clear first.
    pub fn tasks(&self) -> Vec<&str> {
        std::iter::once(self.clear.task.as_str())
            .chain(self.entries.iter().map(|e| e.task.as_str()))
            .collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = &AffineEntry<f32>> {
        std::iter::once(&self.clear).chain(&self.entries)
    }

    pub fn len(&self) -> usize {
        1 + self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn insert(&mut self, entry: AffineEntry<f32>, overwrite: bool) -> Result<()> {
        if entry.model_checksum != self.model_checksum {
            return Err(Error::ChecksumMismatch {
                expected: self.model_checksum,
                found: entry.model_checksum,
            });
        }
        let names =
            |e: &AffineEntry<f32>| e.layers.iter().map(|l| l.name.clone()).collect::<Vec<_>>();
        if names(&entry) != names(&self.clear) {
            return Err(Error::LayerMismatch(format!(
                "entry `{}` does not match the bank layers",
                entry.task
            )));
        }
        let slot = if entry.task == CLEAR_TASK {
            Some(&mut self.clear)
        } else {
            self.entries.iter_mut().find(|e| e.task == entry.task)
        };
        match slot {
            Some(_) if !overwrite => Err(Error::DuplicateTask(entry.task)),
            Some(s) => {
                *s = entry;
                Ok(())
            }
            None => {
                self.entries.push(entry);
                Ok(())
            }
        }
    }

    pub fn get(&self, task: &str) -> Result<&AffineEntry<f32>> {
        self.entries()
            .find(|e| e.task == task)
            .ok_or_else(|| Error::UnknownTask(task.to_string()))
    }

    pub fn plug_in(&self, model: &mut Model<f32>, task: &str) -> Result<()> {
        plug_in(model, self.get(task)?, self.scope)
    }

    pub fn restore_clear(&self, model: &mut Model<f32>) -> Result<()> {
        plug_in(model, &self.clear, self.scope)
    }

    pub fn to_container(&self) -> Container {
        let metas: Vec<_> = self
            .entries()
            .map(|e| json!({"task": e.task, "adaptation": e.meta}))
            .collect();
        let mut c = Container::new(
            "bank",
            json!({
                "bank_version": self.version,
                "scope": self.scope,
                "model_checksum": self.model_checksum.to_string(),
                "layers": self.clear.layers.iter().map(|l| &l.name).collect::<Vec<_>>(),
                "entries": metas,
            }),
        );
        for e in self.entries() {
            for l in &e.layers {
                c.push(Blob::f32(
                    format!("{}/{}.gamma", e.task, l.name),
                    vec![l.gamma.len()],
                    l.gamma.clone(),
                ));
                c.push(Blob::f32(
                    format!("{}/{}.beta", e.task, l.name),
                    vec![l.beta.len()],
                    l.beta.clone(),
                ));
            }
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("bank")?;
        let bad = |what: &str| Error::Corrupt(format!("bank metadata: {what}"));
        let version = c.meta["bank_version"]
            .as_u64()
            .ok_or_else(|| bad("bank_version"))? as u32;
        if version != BANK_VERSION {
            return Err(Error::VersionMismatch {
                expected: BANK_VERSION,
                found: version,
            });
        }
        let scope: SwapScope = serde_json::from_value(c.meta["scope"].clone())?;
        let model_checksum: u64 = c.meta["model_checksum"]
            .as_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("model_checksum"))?;
        let layer_names: Vec<String> = serde_json::from_value(c.meta["layers"].clone())?;
        let metas = c.meta["entries"].as_array().ok_or_else(|| bad("entries"))?;
        let mut all = Vec::new();
        for m in metas {
            let task = m["task"].as_str().ok_or_else(|| bad("task"))?.to_string();
            let meta: Option<AdaptMeta> = serde_json::from_value(m["adaptation"].clone())?;
            let mut layers = Vec::new();
            for name in &layer_names {
                layers.push(AffineLayer {
                    name: name.clone(),
                    gamma: c.f32s(&format!("{task}/{name}.gamma"))?.to_vec(),
                    beta: c.f32s(&format!("{task}/{name}.beta"))?.to_vec(),
                });
            }
            all.push(AffineEntry {
                task,
                layers,
                model_checksum,
                meta,
            });
        }
        let mut it = all.into_iter();
        let clear = it
            .next()
            .filter(|e| e.task == CLEAR_TASK)
            .ok_or_else(|| bad("clear entry"))?;
        Ok(AffineBank {
            version,
            scope,
            model_checksum,
            clear,
            entries: it.collect(),
        })
    }
}

pub fn serialize_bank(bank: &AffineBank, path: &Path) -> Result<()> {
    bank.to_container().save(path)
}

pub fn load_bank(path: &Path) -> Result<AffineBank> {
    AffineBank::from_container(&Container::load(path)?)
}
