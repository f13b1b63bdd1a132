use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Baseline, PipelineConfig, TaskIdMode};
use super::report::*;
use super::stream::{run_stream, summarize};
use crate::adapt::{adapt_affine, serialize_bank, AdaptConfig, AffineBank, AffineEntry};
use crate::checkpoint::{checkpoint_payload_bytes, model_to_container, save_model};
use crate::container::Container;
use crate::data::{
    condition_dataset, load_directory_dataset, make_stream, Condition, Dataset, Segment, Split,
    StreamSpec,
};
use crate::error::{Error, Result};
use crate::model::{build_model, Model, Regime, SwapScope};
use crate::optim::{Sgd, SgdConfig};
use crate::seed;
use crate::stats::{alignment_loss, collect_clear_stats, ActivationStats};
use crate::taskid::{train_task_identifier, TaskClassifier, VoteWindow};
use crate::tensor::Tensor;
use crate::train::{evaluate, train_epoch, train_supervised, TrainingLog};

pub const DILAM: &str = "dilam";

/// Benchmark data plus the stage implementations of the full run.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub train: BTreeMap<Condition, Dataset>,
    pub test: BTreeMap<Condition, Dataset>,
    seeds: RefCell<BTreeMap<String, u64>>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let mut train = BTreeMap::new();
        let mut test = BTreeMap::new();
        let [_, h, w] = config.model.input_size;
        let names: Vec<&str> = config.data.class_names.iter().map(String::as_str).collect();
        for &c in &config.tasks {
            for (split, per_class, dst) in [
                (Split::Train, config.data.train_per_class, &mut train),
                (Split::Test, config.data.test_per_class, &mut test),
            ] {
                let ds = match &config.data.directory {
                    Some(root) => {
                        let split_name = if split == Split::Train {
                            "train"
                        } else {
                            "test"
                        };
                        load_directory_dataset(
                            &root.join(c.name()).join(split_name),
                            &names,
                            (h, w),
                            c,
                        )?
                    }
                    None => condition_dataset(
                        c,
                        split,
                        per_class,
                        h,
                        config.intensity.get(c),
                        config.seed,
                    )?,
                };
                if ds.image_shape() != config.model.input_size {
                    return Err(Error::shape(
                        "dataset images",
                        &ds.image_shape(),
                        &config.model.input_size,
                    ));
                }
                dst.insert(c, ds);
            }
        }
        Ok(Pipeline {
            config,
            train,
            test,
            seeds: RefCell::new(BTreeMap::new()),
        })
    }

    /// Stage seed derived from the master seed by name; every seed handed
    /// out is recorded for the report.
    pub fn seed(&self, stage: &str) -> u64 {
        let s = seed::named(self.config.seed, stage);
        self.seeds.borrow_mut().insert(stage.to_string(), s);
        s
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        self.seeds.borrow().clone()
    }

    fn eval_batch(&self) -> usize {
        self.config.pretrain.eval_batch_size
    }

    fn accuracy(&self, model: &Model<f32>, c: Condition) -> Result<f64> {
        let ds = &self.test[&c];
        Ok(evaluate(model, &ds.images, &ds.labels, self.eval_batch())?.1)
    }

    pub fn pretrain(&self) -> Result<(Model<f32>, TrainingLog)> {
        let mut model = build_model::<f32>(&self.config.model, self.seed("model-init"))?;
        let clear = &self.train[&Condition::Clear];
        let log = train_supervised(
            &mut model,
            &clear.images,
            &clear.labels,
            &self.config.pretrain,
            self.seed("pretrain"),
        )?;
        model.set_all_trainable(false);
        Ok((model, log))
    }

    pub fn collect_stats(&self, model: &Model<f32>) -> Result<ActivationStats> {
        collect_clear_stats(
            model,
            &self.train[&Condition::Clear].images,
            self.config.stats_batch_size,
        )
    }

    pub fn adapt_task(
        &self,
        model: &mut Model<f32>,
        stats: &ActivationStats,
        task: Condition,
        scope: SwapScope,
    ) -> Result<AffineEntry<f32>> {
        let config = AdaptConfig {
            scope,
            ..self.config.adapt
        };
        let images = &self.train[&task].images;
        adapt_affine(
            model,
            stats,
            images,
            task.name(),
            &config,
            self.seed(&format!("adapt:{task}")),
        )
    }

    /// Adapts every non-clear task in `order` and banks the entries.
    pub fn build_bank(
        &self,
        model: &mut Model<f32>,
        stats: &ActivationStats,
        order: &[Condition],
        scope: SwapScope,
    ) -> Result<AffineBank> {
        let mut bank = AffineBank::new(model, scope);
        for &task in order.iter().filter(|&&c| c != Condition::Clear) {
            let entry = self.adapt_task(model, stats, task, scope)?;
            bank.insert(entry, false)?;
        }
        Ok(bank)
    }

    /// One classifier over every configured task; earlier learning steps
    /// mask the outputs of tasks not seen yet.
    pub fn train_task_id(&self, model: &Model<f32>) -> Result<TaskClassifier> {
        let sets: Vec<(Condition, &Tensor<f32>)> = self
            .config
            .tasks
            .iter()
            .map(|&c| (c, &self.train[&c].images))
            .collect();
        train_task_identifier(model, &sets, &self.config.taskid, self.seed("taskid"))
    }

    /// Evaluation stages on trained artifacts. Fills every report field
    /// except the pretraining record.
    pub fn evaluate(
        &self,
        model: &mut Model<f32>,
        stats: &ActivationStats,
        bank: &AffineBank,
        classifier: Option<&TaskClassifier>,
        report: &mut EvalReport,
    ) -> Result<()> {
        let before = model.backbone_checksum();
        report.backbone_checksum_before = format!("{before:016x}");

        let t = Instant::now();
        let features = if classifier.is_some() {
            Some(
                self.shallow_cache(model)
                    .map_err(Error::in_stage("shallow features"))?,
            )
        } else {
            None
        };
        let dilam = match (self.config.task_id, classifier, &features) {
            (TaskIdMode::Learned, Some(c), Some(f)) => self.dilam_learned(model, bank, c, f),
            (TaskIdMode::Learned, _, _) => {
                Err(Error::invalid("learned task ids need a classifier"))
            }
            (TaskIdMode::Oracle, _, _) => self.dilam_oracle(model, bank),
        }
        .map_err(Error::in_stage("evaluate dilam"))?;
        let mut methods = vec![dilam];
        if self.config.task_id == TaskIdMode::Learned {
            methods.push(
                self.dilam_oracle(model, bank)
                    .map_err(Error::in_stage("evaluate dilam"))?,
            );
        }
        report
            .runtime_seconds
            .insert("evaluate-dilam".into(), t.elapsed().as_secs_f64());

        for &b in &self.config.baselines {
            let t = Instant::now();
            let m = match b {
                Baseline::SourceOnly => self.source_only(model),
                Baseline::FineTuning => self.fine_tuning(model),
                Baseline::Joint => self.joint(model),
            }
            .map_err(Error::in_stage(b.name()))?;
            report
                .runtime_seconds
                .insert(b.name().into(), t.elapsed().as_secs_f64());
            methods.push(m);
        }
        report.methods = methods;

        if let (Some(c), Some(f)) = (classifier, &features) {
            report.taskid = Some(self.taskid_report(c, f));
        }

        let t = Instant::now();
        report.zero_forgetting = Some(
            self.zero_forgetting(model, stats, bank)
                .map_err(Error::in_stage("zero forgetting"))?,
        );
        report
            .runtime_seconds
            .insert("zero-forgetting".into(), t.elapsed().as_secs_f64());

        if self.config.compare_scopes {
            let t = Instant::now();
            report.scope_comparison = self
                .compare_scopes(model, stats, bank)
                .map_err(Error::in_stage("scope comparison"))?;
            report
                .runtime_seconds
                .insert("scope-comparison".into(), t.elapsed().as_secs_f64());
        }

        report.alignment = self
            .alignment(model, stats, bank)
            .map_err(Error::in_stage("alignment"))?;
        report.bank = Some(self.bank_report(model, bank)?);

        let t = Instant::now();
        report.streams = self
            .streams(model, bank, classifier)
            .map_err(Error::in_stage("streams"))?;
        report
            .runtime_seconds
            .insert("streams".into(), t.elapsed().as_secs_f64());

        report.backbone_checksum_after = format!("{:016x}", model.backbone_checksum());
        report.seeds = self.seeds();
        Ok(())
    }

    /// Block-1 features and pooled features of every test set, computed
    /// once with the chunking used by plain evaluation.
    fn shallow_cache(
        &self,
        model: &Model<f32>,
    ) -> Result<BTreeMap<Condition, (Tensor<f32>, Tensor<f32>)>> {
        let mut out = BTreeMap::new();
        for (&c, ds) in &self.test {
            let idx: Vec<usize> = (0..ds.len()).collect();
            let mut parts = Vec::new();
            for chunk in idx.chunks(self.eval_batch()) {
                parts.push(model.shallow_features(&ds.images.select(chunk))?);
            }
            let feats = Tensor::concat(&parts)?;
            let pooled = crate::taskid::pool_features(&feats)?;
            out.insert(c, (feats, pooled));
        }
        Ok(out)
    }

    fn dilam_learned(
        &self,
        model: &mut Model<f32>,
        bank: &AffineBank,
        classifier: &TaskClassifier,
        features: &BTreeMap<Condition, (Tensor<f32>, Tensor<f32>)>,
    ) -> Result<MethodReport> {
        if bank.scope != SwapScope::AfterCut {
            return Err(Error::Config(
                "learned task ids need an after-cut bank".into(),
            ));
        }
        let tasks = &self.config.tasks;
        let mut report = MethodReport::new(DILAM);
        for t in 0..tasks.len() {
            let seen = &tasks[..=t];
            let allowed: Vec<bool> = classifier
                .conditions
                .iter()
                .map(|c| seen.contains(c))
                .collect();
            let mut row = Vec::new();
            for &s in seen {
                let (feats, pooled) = &features[&s];
                let routes = vote_routes(classifier, pooled, Some(&allowed));
                row.push(self.routed_accuracy(
                    model,
                    bank,
                    feats,
                    &self.test[&s].labels,
                    &routes,
                )?);
            }
            report.push_step(row, model.backbone_checksum(), 0);
        }
        Ok(report)
    }

    /// Deep passes over cached block-1 features, grouped by routed entry
    /// and kept in test order inside each group.
    fn routed_accuracy(
        &self,
        model: &mut Model<f32>,
        bank: &AffineBank,
        feats: &Tensor<f32>,
        labels: &[usize],
        routes: &[Condition],
    ) -> Result<f64> {
        let mut groups: BTreeMap<Condition, Vec<usize>> = BTreeMap::new();
        for (i, &r) in routes.iter().enumerate() {
            groups.entry(r).or_default().push(i);
        }
        let mut correct = 0usize;
        let result = (|| {
            for (route, idx) in &groups {
                bank.plug_in(model, route.name())?;
                for chunk in idx.chunks(self.eval_batch()) {
                    let preds = model.deep_logits(&feats.select(chunk))?.argmax_rows();
                    correct += chunk
                        .iter()
                        .zip(preds)
                        .filter(|(&i, p)| labels[i] == *p)
                        .count();
                }
            }
            Ok(())
        })();
        bank.restore_clear(model)?;
        result.map(|()| correct as f64 / labels.len() as f64)
    }

    fn oracle_accuracy(
        &self,
        model: &mut Model<f32>,
        bank: &AffineBank,
        task: Condition,
    ) -> Result<f64> {
        bank.plug_in(model, task.name())?;
        let acc = self.accuracy(model, task);
        bank.restore_clear(model)?;
        acc
    }

    fn dilam_oracle(&self, model: &mut Model<f32>, bank: &AffineBank) -> Result<MethodReport> {
        let name = match self.config.task_id {
            TaskIdMode::Oracle => DILAM.to_string(),
            TaskIdMode::Learned => format!("{DILAM}-oracle"),
        };
        let tasks = &self.config.tasks;
        let mut report = MethodReport::new(name);
        let mut acc = BTreeMap::new();
        for &c in tasks {
            acc.insert(c, self.oracle_accuracy(model, bank, c)?);
        }
        for t in 0..tasks.len() {
            report.push_step(
                tasks[..=t].iter().map(|c| acc[c]).collect(),
                model.backbone_checksum(),
                0,
            );
        }
        Ok(report)
    }

    fn source_only(&self, model: &Model<f32>) -> Result<MethodReport> {
        let tasks = &self.config.tasks;
        let mut report = MethodReport::new(Baseline::SourceOnly.name());
        for t in 0..tasks.len() {
            let row = tasks[..=t]
                .iter()
                .map(|&c| self.accuracy(model, c))
                .collect::<Result<_>>()?;
            report.push_step(row, model.full_checksum(), 0);
        }
        Ok(report)
    }

    fn supervised_sgd(&self) -> Result<Sgd<f32>> {
        Sgd::new(SgdConfig {
            lr: self.config.pretrain.initial_lr,
            momentum: self.config.pretrain.momentum,
            clip: None,
        })
    }

    /// One supervised epoch per new task on every parameter, in sequence.
    fn fine_tuning(&self, clear_model: &Model<f32>) -> Result<MethodReport> {
        let tasks = &self.config.tasks;
        let mut model = clear_model.clone();
        model.set_all_trainable(true);
        let mut report = MethodReport::new(Baseline::FineTuning.name());
        for t in 0..tasks.len() {
            let mut epochs = 0;
            if t > 0 {
                let ds = &self.train[&tasks[t]];
                let mut order: Vec<usize> = (0..ds.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(
                    self.seed(&format!("finetune:{}", tasks[t])),
                ));
                let mut opt = self.supervised_sgd()?;
                train_epoch(
                    &mut model,
                    &ds.images,
                    &ds.labels,
                    &order,
                    self.config.pretrain.batch_size,
                    &mut opt,
                )?;
                epochs = 1;
            }
            let row = tasks[..=t]
                .iter()
                .map(|&c| self.accuracy(&model, c))
                .collect::<Result<_>>()?;
            report.push_step(row, model.full_checksum(), epochs);
        }
        Ok(report)
    }

    /// Starting from the clear model at every step, trains on the union of
    /// all seen tasks.
    fn joint(&self, clear_model: &Model<f32>) -> Result<MethodReport> {
        let tasks = &self.config.tasks;
        let mut report = MethodReport::new(Baseline::Joint.name());
        for t in 0..tasks.len() {
            let mut model = clear_model.clone();
            let mut epochs = 0;
            if t > 0 {
                let seen = &tasks[..=t];
                let images = Tensor::concat(
                    &seen
                        .iter()
                        .map(|c| self.train[c].images.clone())
                        .collect::<Vec<_>>(),
                )?;
                let labels: Vec<usize> = seen
                    .iter()
                    .flat_map(|c| self.train[c].labels.iter().copied())
                    .collect();
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed(&format!("joint:{}", t + 1)));
                let mut opt = self.supervised_sgd()?;
                let mut order: Vec<usize> = (0..labels.len()).collect();
                model.set_all_trainable(true);
                for _ in 0..self.config.joint_epochs {
                    order.shuffle(&mut rng);
                    train_epoch(
                        &mut model,
                        &images,
                        &labels,
                        &order,
                        self.config.pretrain.batch_size,
                        &mut opt,
                    )?;
                }
                epochs = self.config.joint_epochs;
            }
            let row = tasks[..=t]
                .iter()
                .map(|&c| self.accuracy(&model, c))
                .collect::<Result<_>>()?;
            report.push_step(row, model.full_checksum(), epochs);
        }
        Ok(report)
    }

    fn taskid_report(
        &self,
        classifier: &TaskClassifier,
        features: &BTreeMap<Condition, (Tensor<f32>, Tensor<f32>)>,
    ) -> TaskIdReport {
        let k = classifier.num_conditions();
        let mut confusion = vec![vec![0usize; k]; k];
        let mut per_frame_accuracy = Vec::new();
        for (i, &c) in classifier.conditions.iter().enumerate() {
            let pooled = &features[&c].1;
            let n = pooled.shape()[0];
            for r in 0..n {
                confusion[i][classifier.classify_frame(pooled.row(r), None)] += 1;
            }
            per_frame_accuracy.push(confusion[i][i] as f64 / n as f64);
        }
        TaskIdReport {
            conditions: classifier.conditions.clone(),
            confusion,
            per_frame_accuracy,
            final_val_accuracy: classifier.log.final_val_accuracy().unwrap_or(f64::NAN),
            epochs: classifier.log.epochs.len(),
        }
    }

    /// Re-runs the incremental sequence under every order of the non-clear
    /// tasks, recording each task's accuracy right after its adaptation and
    /// after the whole sequence (oracle routing).
    fn zero_forgetting(
        &self,
        model: &mut Model<f32>,
        stats: &ActivationStats,
        bank: &AffineBank,
    ) -> Result<ZeroForgettingReport> {
        let rest: Vec<Condition> = self.config.tasks[1..].to_vec();
        let orders = if self.config.check_permutations {
            permutations(&rest)
        } else {
            vec![rest]
        };
        let mut records = Vec::new();
        let mut entries_identical = true;
        for order in orders {
            let mut run = AffineBank::new(model, bank.scope);
            let mut immediate = BTreeMap::new();
            immediate.insert(
                Condition::Clear,
                self.oracle_accuracy(model, &run, Condition::Clear)?,
            );
            for &task in &order {
                let entry = self.adapt_task(model, stats, task, bank.scope)?;
                entries_identical &= bank
                    .get(task.name())
                    .is_ok_and(|e| e.same_parameters(&entry));
                run.insert(entry, false)?;
                immediate.insert(task, self.oracle_accuracy(model, &run, task)?);
            }
            let mut after_sequence = BTreeMap::new();
            for &task in &self.config.tasks {
                after_sequence.insert(task, self.oracle_accuracy(model, &run, task)?);
            }
            info!("order {order:?}: {after_sequence:?}");
            records.push(PermutationRecord {
                order,
                immediate,
                after_sequence,
            });
        }
        let bits = |m: &BTreeMap<Condition, f64>| {
            m.iter().map(|(c, v)| (*c, v.to_bits())).collect::<Vec<_>>()
        };
        let exact = records
            .iter()
            .all(|r| bits(&r.immediate) == bits(&r.after_sequence))
            && records
                .iter()
                .all(|r| bits(&r.after_sequence) == bits(&records[0].after_sequence));
        Ok(ZeroForgettingReport {
            permutations: records,
            exact,
            entries_identical,
        })
    }

    fn compare_scopes(
        &self,
        model: &mut Model<f32>,
        stats: &ActivationStats,
        bank: &AffineBank,
    ) -> Result<Vec<ScopeComparison>> {
        let all = self.build_bank(model, stats, &self.config.tasks, SwapScope::AllLayers)?;
        let mut out = Vec::new();
        for &c in &self.config.tasks {
            let probe = self.test[&c]
                .images
                .select(&(0..self.test[&c].len().min(64)).collect::<Vec<_>>());
            bank.plug_in(model, c.name())?;
            let cut_logits = model.logits(&probe)?;
            bank.restore_clear(model)?;
            all.plug_in(model, c.name())?;
            let all_logits = model.logits(&probe)?;
            all.restore_clear(model)?;
            out.push(ScopeComparison {
                condition: c,
                after_cut: self.oracle_accuracy(model, bank, c)?,
                all_layers: self.oracle_accuracy(model, &all, c)?,
                outputs_differ: !cut_logits.bitwise_eq(&all_logits),
            });
        }
        Ok(out)
    }

    fn alignment(
        &self,
        model: &Model<f32>,
        stats: &ActivationStats,
        bank: &AffineBank,
    ) -> Result<Vec<AlignmentReport>> {
        let norms = model.bankable_norms(bank.scope);
        let mut out = Vec::new();
        for &c in &self.config.tasks {
            let ds = &self.test[&c];
            let idx: Vec<usize> = (0..ds.len()).collect();
            let (mut sum, mut batches) = (0.0, 0usize);
            for chunk in idx
                .chunks(self.config.alignment_batch_size)
                .filter(|ch| ch.len() >= 2)
            {
                let mut pass = model.pass(Regime::Eval, false);
                let x = model.input(&mut pass, ds.images.select(chunk))?;
                model.forward(&mut pass, x)?;
                let loss = alignment_loss(model, &mut pass, stats, &norms)?;
                sum += pass.tape.value(loss).item() as f64;
                batches += 1;
            }
            let trace = bank
                .get(c.name())
                .ok()
                .and_then(|e| e.meta.as_ref())
                .map(|m| &m.loss_trace);
            let quarter = |first: bool| {
                trace.filter(|t| t.len() >= 4).map(|t| {
                    let q = t.len() / 4;
                    let part = if first { &t[..q] } else { &t[t.len() - q..] };
                    part.iter().sum::<f64>() / q as f64
                })
            };
            out.push(AlignmentReport {
                condition: c,
                mean_loss: sum / batches.max(1) as f64,
                adapt_first_quarter: quarter(true),
                adapt_last_quarter: quarter(false),
            });
        }
        Ok(out)
    }

    fn bank_report(&self, model: &Model<f32>, bank: &AffineBank) -> Result<BankReport> {
        let entry_payload_bytes = bank.clear_entry().payload_bytes();
        let checkpoint = checkpoint_payload_bytes(model)?;
        Ok(BankReport {
            entries: bank.tasks().into_iter().map(String::from).collect(),
            entry_payload_bytes,
            checkpoint_payload_bytes: checkpoint,
            payload_fraction: entry_payload_bytes as f64 / checkpoint as f64,
            file_bytes: bank.to_container().to_bytes()?.len(),
            checkpoint_file_bytes: model_to_container(model)?.to_bytes()?.len(),
        })
    }

    /// Homogeneous streams per task and a transition stream, in learned
    /// mode when a classifier is available and in oracle mode.
    pub fn streams(
        &self,
        model: &mut Model<f32>,
        bank: &AffineBank,
        classifier: Option<&TaskClassifier>,
    ) -> Result<Vec<StreamReport>> {
        let cfg = &self.config.stream;
        let mode = if classifier.is_some() && self.config.task_id == TaskIdMode::Learned {
            TaskIdMode::Learned
        } else {
            TaskIdMode::Oracle
        };
        let mut specs: Vec<(String, TaskIdMode, StreamSpec)> = Vec::new();
        for &c in &self.config.tasks {
            let name = format!("homogeneous:{c}");
            let spec = StreamSpec {
                segments: vec![Segment {
                    condition: c,
                    frames: cfg.homogeneous_frames,
                }],
                seed: self.seed(&format!("stream:{name}")),
            };
            specs.push((name, mode, spec));
        }
        let transition = StreamSpec {
            segments: cfg
                .transitions
                .iter()
                .map(|&condition| Segment {
                    condition,
                    frames: cfg.transition_frames,
                })
                .collect(),
            seed: self.seed("stream:transitions"),
        };
        specs.push(("transitions".into(), mode, transition.clone()));
        if mode == TaskIdMode::Learned {
            specs.push(("transitions".into(), TaskIdMode::Oracle, transition));
        }
        let mut out = Vec::new();
        for (name, mode, spec) in specs {
            let frames = make_stream(&spec, &self.test)?;
            let (s0, d0) = (model.counter().shallow(), model.counter().deep());
            let records = run_stream(model, bank, classifier, None, &frames, &self.test, mode)?;
            let report = summarize(
                &name,
                mode,
                &records,
                model.counter().shallow() - s0,
                model.counter().deep() - d0,
            );
            info!(
                "stream {name} ({}): id {:.3} windowed {:.3} downstream {:.3}",
                report.mode,
                report.per_frame_id_accuracy,
                report.windowed_id_accuracy,
                report.downstream_accuracy
            );
            out.push(report);
        }
        Ok(out)
    }
}

/// Voted route of each frame when a test set is played as one stream.
pub fn vote_routes(
    classifier: &TaskClassifier,
    pooled: &Tensor<f32>,
    allowed: Option<&[bool]>,
) -> Vec<Condition> {
    let mut window = VoteWindow::new();
    (0..pooled.shape()[0])
        .map(|r| {
            window.push(classifier.classify_frame(pooled.row(r), allowed));
            classifier.conditions[window.vote().expect("window is non-empty")]
        })
        .collect()
}

pub fn permutations<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head.clone());
            out.push(p);
        }
    }
    out
}

/// Trained artifacts of one run.
pub struct Artifacts {
    pub model: Model<f32>,
    pub pretrain_log: TrainingLog,
    pub stats: ActivationStats,
    pub bank: AffineBank,
    pub classifier: Option<TaskClassifier>,
}

pub fn pretrain_report(log: &TrainingLog, clear_test_accuracy: f64) -> PretrainReport {
    PretrainReport {
        epochs: log.epochs.len(),
        lr_drops: log.lr_drops,
        final_val_accuracy: log.final_val_accuracy().unwrap_or(f64::NAN),
        clear_test_accuracy,
    }
}

/// Every stage in order. With `out`, artifacts and report files are
/// written there as each stage completes.
pub fn run_pipeline(
    config: &PipelineConfig,
    out: Option<&Path>,
) -> Result<(EvalReport, Artifacts)> {
    let start = Instant::now();
    let mut report = EvalReport::new(config);
    let t = Instant::now();
    let pipeline = Pipeline::new(config.clone()).map_err(Error::in_stage("data"))?;
    report
        .runtime_seconds
        .insert("data".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let (mut model, log) = pipeline.pretrain().map_err(Error::in_stage("pretrain"))?;
    report
        .runtime_seconds
        .insert("pretrain".into(), t.elapsed().as_secs_f64());
    let clear = pipeline.accuracy(&model, Condition::Clear)?;
    info!(
        "pretrained in {} epochs, clear test accuracy {clear:.3}",
        log.epochs.len()
    );
    report.pretrain = Some(pretrain_report(&log, clear));
    if let Some(dir) = out {
        save_model(&model, &dir.join("model.ckpt")).map_err(Error::in_stage("pretrain"))?;
    }

    let t = Instant::now();
    let stats = pipeline
        .collect_stats(&model)
        .map_err(Error::in_stage("stats"))?;
    report
        .runtime_seconds
        .insert("stats".into(), t.elapsed().as_secs_f64());
    if let Some(dir) = out {
        stats
            .to_container()
            .save(&dir.join("stats.bin"))
            .map_err(Error::in_stage("stats"))?;
    }

    let t = Instant::now();
    let bank = pipeline
        .build_bank(&mut model, &stats, &config.tasks, config.adapt.scope)
        .map_err(Error::in_stage("adapt"))?;
    report
        .runtime_seconds
        .insert("adapt".into(), t.elapsed().as_secs_f64());
    if let Some(dir) = out {
        serialize_bank(&bank, &dir.join("bank.bin")).map_err(Error::in_stage("adapt"))?;
    }

    let classifier = match config.task_id {
        TaskIdMode::Learned => {
            let t = Instant::now();
            let c = pipeline
                .train_task_id(&model)
                .map_err(Error::in_stage("train-taskid"))?;
            report
                .runtime_seconds
                .insert("train-taskid".into(), t.elapsed().as_secs_f64());
            if let Some(dir) = out {
                c.to_container()
                    .save(&dir.join("taskid.ckpt"))
                    .map_err(Error::in_stage("train-taskid"))?;
            }
            Some(c)
        }
        TaskIdMode::Oracle => None,
    };

    pipeline.evaluate(&mut model, &stats, &bank, classifier.as_ref(), &mut report)?;
    report
        .runtime_seconds
        .insert("total".into(), start.elapsed().as_secs_f64());
    report.complete = true;
    if let Some(dir) = out {
        emit_report(&report, dir).map_err(Error::in_stage("report"))?;
    }
    Ok((
        report,
        Artifacts {
            model,
            pretrain_log: log,
            stats,
            bank,
            classifier,
        },
    ))
}

pub fn load_stats(path: &Path) -> Result<ActivationStats> {
    ActivationStats::from_container(&Container::load(path)?)
}

pub fn load_classifier(path: &Path) -> Result<TaskClassifier> {
    TaskClassifier::from_container(&Container::load(path)?)
}
