use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{error, info};

use dilam::adapt::{load_bank, serialize_bank};
use dilam::checkpoint::{load_model, save_model};
use dilam::harness::{
    emit_report, load_classifier, load_report, load_stats, pretrain_report, run_pipeline,
    EvalReport, Pipeline, PipelineConfig, TaskIdMode,
};
use dilam::train::TrainingLog;

const LOG_ENV: &str = "DILAM_LOG";
const PRETRAIN_LOG: &str = "pretrain-log.json";
const STALE: &str = "STALE";

/// Domain-incremental benchmark: affine-parameter bank with a voting task
/// identifier.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    /// TOML config file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for artifacts and reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Override one config key, e.g. `--set adapt.lr=0.02`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the clear-condition model (model.ckpt).
    Pretrain,
    /// Record clear activation statistics (stats.bin).
    Stats,
    /// Adapt every non-clear task and write the bank (bank.bin).
    Adapt,
    /// Train the task identifier (taskid.ckpt).
    TrainTaskid,
    /// Run the evaluation protocol on the artifacts (report.json, report.csv).
    Eval,
    /// Simulate the configured frame streams (stream.json).
    Stream,
    /// Print the tables of an existing report.
    Report,
    /// All stages in order.
    Run,
}

/// Exclusive use of an output directory, released on drop.
struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let path = dir.join(".lock");
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| {
                format!(
                    "{} is in use by another run (delete {} if it is stale)",
                    dir.display(),
                    path.display()
                )
            })?;
        writeln!(f, "{}", std::process::id())?;
        Ok(OutputLock { path })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let config = PipelineConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Command::Report = cli.command {
        let path = cli.out.join("report.json");
        let report = load_report(&path).with_context(|| format!("cannot read {}", path.display()))?;
        print!("{}", report.summary_text());
        if !report.complete {
            bail!("report is incomplete");
        }
        return Ok(());
    }
    let _lock = OutputLock::acquire(&cli.out)?;
    let stale = cli.out.join(STALE);
    let result = stage(cli, &config);
    match &result {
        Ok(()) => {
            let _ = fs::remove_file(&stale);
        }
        Err(e) => {
            let _ = fs::write(&stale, format!("{e:#}\n"));
        }
    }
    result
}

fn stage(cli: &Cli, config: &PipelineConfig) -> Result<()> {
    let out = &cli.out;
    let artifact = |name: &str| out.join(name);
    match cli.command {
        Command::Run => {
            let (report, _) = run_pipeline(config, Some(out))?;
            print!("{}", report.summary_text());
        }
        Command::Pretrain => {
            let p = Pipeline::new(config.clone())?;
            let (model, log) = p.pretrain()?;
            save_model(&model, &artifact("model.ckpt"))?;
            fs::write(artifact(PRETRAIN_LOG), serde_json::to_string_pretty(&log)?)?;
            info!("pretrained for {} epochs", log.epochs.len());
        }
        Command::Stats => {
            let p = Pipeline::new(config.clone())?;
            let model = load_model(&artifact("model.ckpt"))?;
            p.collect_stats(&model)?
                .to_container()
                .save(&artifact("stats.bin"))?;
        }
        Command::Adapt => {
            let p = Pipeline::new(config.clone())?;
            let mut model = load_model(&artifact("model.ckpt"))?;
            let stats = load_stats(&artifact("stats.bin"))?;
            let bank = p.build_bank(&mut model, &stats, &config.tasks, config.adapt.scope)?;
            serialize_bank(&bank, &artifact("bank.bin"))?;
            info!("bank holds {:?}", bank.tasks());
        }
        Command::TrainTaskid => {
            let p = Pipeline::new(config.clone())?;
            let model = load_model(&artifact("model.ckpt"))?;
            let c = p.train_task_id(&model)?;
            c.to_container().save(&artifact("taskid.ckpt"))?;
        }
        Command::Eval => {
            let p = Pipeline::new(config.clone())?;
            let mut model = load_model(&artifact("model.ckpt"))?;
            let stats = load_stats(&artifact("stats.bin"))?;
            let bank = load_bank(&artifact("bank.bin"))?;
            let classifier = match config.task_id {
                TaskIdMode::Learned => Some(load_classifier(&artifact("taskid.ckpt"))?),
                TaskIdMode::Oracle => None,
            };
            let mut report = EvalReport::new(config);
            if let Ok(text) = fs::read_to_string(artifact(PRETRAIN_LOG)) {
                let log: TrainingLog = serde_json::from_str(&text)?;
                let ds = &p.test[&dilam::data::Condition::Clear];
                let clear = dilam::train::evaluate(
                    &model,
                    &ds.images,
                    &ds.labels,
                    config.pretrain.eval_batch_size,
                )?
                .1;
                report.pretrain = Some(pretrain_report(&log, clear));
            }
            p.evaluate(&mut model, &stats, &bank, classifier.as_ref(), &mut report)?;
            report.complete = true;
            emit_report(&report, out)?;
            print!("{}", report.summary_text());
        }
        Command::Stream => {
            let p = Pipeline::new(config.clone())?;
            let mut model = load_model(&artifact("model.ckpt"))?;
            let bank = load_bank(&artifact("bank.bin"))?;
            let classifier = match config.task_id {
                TaskIdMode::Learned => Some(load_classifier(&artifact("taskid.ckpt"))?),
                TaskIdMode::Oracle => None,
            };
            let streams = p.streams(&mut model, &bank, classifier.as_ref())?;
            serde_json::to_writer_pretty(File::create(artifact("stream.json"))?, &streams)?;
        }
        Command::Report => unreachable!("handled before locking"),
    }
    Ok(())
}
