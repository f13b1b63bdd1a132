use std::collections::BTreeMap;

use super::config::TaskIdMode;
use super::report::{StreamReport, TransitionReport};
use crate::adapt::AffineBank;
use crate::data::{Condition, Dataset, Frame};
use crate::error::{Error, Result};
use crate::model::{Model, Regime};
use crate::taskid::{oracle_task_id, pool_features, TaskClassifier, VoteWindow};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameRecord {
    pub condition: Condition,
    /// Per-frame task prediction before voting.
    pub predicted: Condition,
    /// Condition whose bank entry served the frame.
    pub routed: Condition,
    pub label: usize,
    pub output: usize,
}

/// Runs `frames` one at a time. In learned mode each frame takes one
/// shallow pass whose features feed both the task identifier and, after
/// the voted entry is plugged in, the deep pass. In oracle mode the entry
/// named by the frame metadata is plugged before a full forward pass. The
/// model is left with the clear entry plugged in.
pub fn run_stream(
    model: &mut Model<f32>,
    bank: &AffineBank,
    classifier: Option<&TaskClassifier>,
    allowed: Option<&[bool]>,
    frames: &[Frame],
    sets: &BTreeMap<Condition, Dataset>,
    mode: TaskIdMode,
) -> Result<Vec<FrameRecord>> {
    let classifier = match (mode, classifier) {
        (TaskIdMode::Learned, None) => {
            return Err(Error::invalid("learned task ids need a classifier"))
        }
        (TaskIdMode::Learned, Some(c)) => Some(c),
        (TaskIdMode::Oracle, _) => None,
    };
    let mut window = VoteWindow::new();
    let mut current: Option<Condition> = None;
    let mut records = Vec::with_capacity(frames.len());
    let result = (|| {
        for f in frames {
            let set = sets
                .get(&f.condition)
                .ok_or_else(|| Error::UnknownTask(f.condition.name().into()))?;
            let image = Tensor::stack(&[set.image(f.index)], &set.image_shape())?;
            let mut pass = model.pass(Regime::Eval, false);
            let (predicted, routed, logits) = match classifier {
                Some(c) => {
                    let x = model.input(&mut pass, image)?;
                    let feat = model.forward_shallow(&mut pass, x)?;
                    let pooled = pool_features(pass.tape.value(feat))?;
                    let k = c.classify_frame(pooled.data(), allowed);
                    window.push(k);
                    let v = window.vote().expect("window holds the current frame");
                    let routed = c.conditions[v];
                    if current != Some(routed) {
                        bank.plug_in(model, routed.name())?;
                        current = Some(routed);
                    }
                    (
                        c.conditions[k],
                        routed,
                        model.forward_deep(&mut pass, feat)?,
                    )
                }
                None => {
                    let routed = oracle_task_id(Some(f.condition))?;
                    if current != Some(routed) {
                        bank.plug_in(model, routed.name())?;
                        current = Some(routed);
                    }
                    let x = model.input(&mut pass, image)?;
                    (routed, routed, model.forward(&mut pass, x)?)
                }
            };
            records.push(FrameRecord {
                condition: f.condition,
                predicted,
                routed,
                label: f.label,
                output: pass.tape.value(logits).argmax_rows()[0],
            });
        }
        Ok(())
    })();
    bank.restore_clear(model)?;
    result.map(|()| records)
}

/// Latency and cleanliness of every condition change in `records`.
pub fn transitions(records: &[FrameRecord]) -> Vec<TransitionReport> {
    let mut out = Vec::new();
    for start in 1..records.len() {
        let (from, to) = (records[start - 1].condition, records[start].condition);
        if from == to {
            continue;
        }
        let end = (start..records.len())
            .find(|&i| records[i].condition != to)
            .unwrap_or(records.len());
        let flip = (start..end).find(|&i| records[i].routed == to);
        let checked_until = flip.map_or(end, |i| i + 1);
        out.push(TransitionReport {
            frame: start,
            from,
            to,
            latency: flip.map(|i| i - start + 1),
            perfect_after: records[start..checked_until]
                .iter()
                .all(|r| r.predicted == to),
        });
    }
    out
}

pub fn summarize(
    name: &str,
    mode: TaskIdMode,
    records: &[FrameRecord],
    shallow: usize,
    deep: usize,
) -> StreamReport {
    let n = records.len().max(1) as f64;
    let frac =
        |f: &dyn Fn(&FrameRecord) -> bool| records.iter().filter(|r| f(r)).count() as f64 / n;
    StreamReport {
        name: name.to_string(),
        mode: match mode {
            TaskIdMode::Learned => "learned".into(),
            TaskIdMode::Oracle => "oracle".into(),
        },
        frames: records.len(),
        per_frame_id_accuracy: frac(&|r| r.predicted == r.condition),
        windowed_id_accuracy: frac(&|r| r.routed == r.condition),
        downstream_accuracy: frac(&|r| r.output == r.label),
        transitions: transitions(records),
        shallow_passes: shallow,
        deep_passes: deep,
    }
}
