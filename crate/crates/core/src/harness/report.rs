use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use crate::data::Condition;
use crate::error::{Error, Result};

pub const REPORT_VERSION: u32 = 1;

/// Incremental-learning results of one method. Row `t` of `accuracy` holds
/// the accuracies on the first `t + 1` tasks after learning step `t + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub accuracy: Vec<Vec<f64>>,
    /// Mean of each row.
    pub summary: Vec<f64>,
    /// Hash of the parameters used at each step.
    pub model_hashes: Vec<String>,
    /// Supervised epochs run at each step.
    pub epochs: Vec<usize>,
}

impl MethodReport {
    pub fn new(method: impl Into<String>) -> Self {
        MethodReport {
            method: method.into(),
            accuracy: Vec::new(),
            summary: Vec::new(),
            model_hashes: Vec::new(),
            epochs: Vec::new(),
        }
    }

    pub fn push_step(&mut self, row: Vec<f64>, hash: u64, epochs: usize) {
        self.summary
            .push(row.iter().sum::<f64>() / row.len() as f64);
        self.accuracy.push(row);
        self.model_hashes.push(format!("{hash:016x}"));
        self.epochs.push(epochs);
    }

    /// Every row has one entry per seen task and every summary is the
    /// mean of its row.
    pub fn is_consistent(&self) -> bool {
        self.accuracy.len() == self.summary.len()
            && self
                .accuracy
                .iter()
                .enumerate()
                .all(|(t, row)| row.len() == t + 1)
            && self
                .accuracy
                .iter()
                .zip(&self.summary)
                .all(|(row, &s)| s == row.iter().sum::<f64>() / row.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: usize,
    pub lr_drops: usize,
    pub final_val_accuracy: f64,
    pub clear_test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskIdReport {
    pub conditions: Vec<Condition>,
    /// `confusion[true][predicted]` over per-frame test predictions.
    pub confusion: Vec<Vec<usize>>,
    pub per_frame_accuracy: Vec<f64>,
    pub final_val_accuracy: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionReport {
    /// Index of the first frame of the new segment.
    pub frame: usize,
    pub from: Condition,
    pub to: Condition,
    /// Frames from the change until the vote names the new condition,
    /// counting the first new frame as 1.
    pub latency: Option<usize>,
    /// Whether every per-frame prediction up to the flip was correct.
    pub perfect_after: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub name: String,
    pub mode: String,
    pub frames: usize,
    pub per_frame_id_accuracy: f64,
    pub windowed_id_accuracy: f64,
    pub downstream_accuracy: f64,
    pub transitions: Vec<TransitionReport>,
    pub shallow_passes: usize,
    pub deep_passes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationRecord {
    pub order: Vec<Condition>,
    /// Accuracy on each task right after its own adaptation.
    pub immediate: BTreeMap<Condition, f64>,
    /// Accuracy on each task once the whole sequence is learned.
    pub after_sequence: BTreeMap<Condition, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroForgettingReport {
    pub permutations: Vec<PermutationRecord>,
    /// Immediate and final accuracies are bitwise equal in every run and
    /// identical across runs.
    pub exact: bool,
    /// Bank entries are bitwise identical across runs.
    pub entries_identical: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScopeComparison {
    pub condition: Condition,
    pub after_cut: f64,
    pub all_layers: f64,
    /// Whether the two banks give different outputs on this test set.
    pub outputs_differ: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub condition: Condition,
    /// Mean alignment loss over test batches with clear affine parameters.
    pub mean_loss: f64,
    /// Mean loss over the first and last quarter of the adaptation epoch.
    pub adapt_first_quarter: Option<f64>,
    pub adapt_last_quarter: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankReport {
    pub entries: Vec<String>,
    pub entry_payload_bytes: usize,
    pub checkpoint_payload_bytes: usize,
    pub payload_fraction: f64,
    pub file_bytes: usize,
    pub checkpoint_file_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub config: PipelineConfig,
    pub seeds: BTreeMap<String, u64>,
    pub tasks: Vec<Condition>,
    pub pretrain: Option<PretrainReport>,
    pub methods: Vec<MethodReport>,
    pub taskid: Option<TaskIdReport>,
    pub streams: Vec<StreamReport>,
    pub zero_forgetting: Option<ZeroForgettingReport>,
    pub scope_comparison: Vec<ScopeComparison>,
    pub alignment: Vec<AlignmentReport>,
    pub bank: Option<BankReport>,
    pub backbone_checksum_before: String,
    pub backbone_checksum_after: String,
    pub runtime_seconds: BTreeMap<String, f64>,
    pub complete: bool,
}

impl EvalReport {
    pub fn new(config: &PipelineConfig) -> Self {
        EvalReport {
            version: REPORT_VERSION,
            config: config.clone(),
            seeds: BTreeMap::new(),
            tasks: config.tasks.clone(),
            pretrain: None,
            methods: Vec::new(),
            taskid: None,
            streams: Vec::new(),
            zero_forgetting: None,
            scope_comparison: Vec::new(),
            alignment: Vec::new(),
            bank: None,
            backbone_checksum_before: String::new(),
            backbone_checksum_after: String::new(),
            runtime_seconds: BTreeMap::new(),
            complete: false,
        }
    }

    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,step,task,accuracy,summary\n");
        for m in &self.methods {
            for (t, row) in m.accuracy.iter().enumerate() {
                for (s, acc) in row.iter().enumerate() {
                    let _ = writeln!(
                        out,
                        "{},{},{},{:?},{:?}",
                        m.method,
                        t + 1,
                        self.tasks[s],
                        acc,
                        m.summary[t]
                    );
                }
            }
        }
        out
    }
}

impl EvalReport {
    /// Plain-text tables of the main results.
    pub fn summary_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "summary accuracy (%) after each step");
        let _ = write!(out, "{:<14}", "method");
        for (t, c) in self.tasks.iter().enumerate() {
            let _ = write!(out, "{:>9}", format!("{}:{c}", t + 1));
        }
        out.push('\n');
        for m in &self.methods {
            let _ = write!(out, "{:<14}", m.method);
            for s in &m.summary {
                let _ = write!(out, "{:>9.1}", 100.0 * s);
            }
            out.push('\n');
        }
        if let Some(t) = &self.taskid {
            let _ = writeln!(out, "\ntask identifier per-frame accuracy (%)");
            for (c, a) in t.conditions.iter().zip(&t.per_frame_accuracy) {
                let _ = writeln!(out, "  {c:<6} {:>6.1}", 100.0 * a);
            }
        }
        for s in &self.streams {
            let _ = writeln!(
                out,
                "stream {:<20} {:<8} id {:>6.1}  windowed {:>6.1}  downstream {:>6.1}",
                s.name,
                s.mode,
                100.0 * s.per_frame_id_accuracy,
                100.0 * s.windowed_id_accuracy,
                100.0 * s.downstream_accuracy
            );
        }
        if let Some(b) = &self.bank {
            let _ = writeln!(
                out,
                "\nbank entry {} bytes, checkpoint {} bytes ({:.2}%)",
                b.entry_payload_bytes,
                b.checkpoint_payload_bytes,
                100.0 * b.payload_fraction
            );
        }
        if let Some(z) = &self.zero_forgetting {
            let _ = writeln!(
                out,
                "zero forgetting over {} orders: {}",
                z.permutations.len(),
                z.exact
            );
        }
        let _ = writeln!(
            out,
            "backbone {} -> {}; complete: {}",
            self.backbone_checksum_before, self.backbone_checksum_after, self.complete
        );
        out
    }
}

/// Writes `report.json` and `report.csv` under `dir`.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<()> {
    let write = |name: &str, body: &[u8]| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::Config(format!("cannot write {}: {e}", p.display())))
    };
    write(
        "report.json",
        serde_json::to_string_pretty(report)?.as_bytes(),
    )?;
    write("report.csv", report.to_csv().as_bytes())
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
