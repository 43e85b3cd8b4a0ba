//! On-disk result formats. Every file carries `format_version`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rankup::trainer::{EvalLog, IterLog};
use rankup::{AggregateMetrics, Checkpoint, LabelScaler, Method, MetricsReport, RunRecord};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SUMMARY_FORMAT_VERSION: u32 = 1;
pub const LOG_FORMAT_VERSION: u32 = 1;

/// `<experiment>/<method>/<seed>/summary.json`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub format_version: u32,
    pub experiment: String,
    pub method: Method,
    pub seed: u64,
    pub n_labeled: usize,
    pub total_iters: u64,
    pub final_metrics: MetricsReport,
    pub evals: Vec<EvalLog>,
    pub scaler: LabelScaler,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub align_calls: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub metrics: MetricsReport,
}

/// `<experiment>/<method>/summary.json`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub format_version: u32,
    pub experiment: String,
    pub method: Method,
    pub n_labeled: usize,
    pub runs: Vec<SeedMetrics>,
    pub aggregate: AggregateMetrics,
}

/// One line of `log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LogLine {
    Header {
        format_version: u32,
        method: Method,
        seed: u64,
    },
    Iter(IterLog),
    Eval(EvalLog),
}

pub fn method_dir(root: &Path, experiment: &str, method: Method) -> PathBuf {
    root.join(experiment).join(method.name())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(path, e))?;
    fs::write(path, text + "\n").map_err(|e| CliError::runtime(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::runtime(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: malformed JSON: {e}", path.display())))
}

/// Writes the per-seed directory of one finished run.
pub fn write_run(
    dir: &Path,
    experiment: &str,
    n_labeled: usize,
    total_iters: u64,
    run: &RunRecord,
    dump_rda_table: bool,
) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::runtime(dir, e))?;
    let summary = RunSummary {
        format_version: SUMMARY_FORMAT_VERSION,
        experiment: experiment.to_string(),
        method: run.method,
        seed: run.seed,
        n_labeled,
        total_iters,
        final_metrics: run.final_metrics,
        evals: run.evals.clone(),
        scaler: run.scaler,
        align_calls: run.align_calls,
    };
    write_json(&dir.join("summary.json"), &summary)?;

    let log_path = dir.join("log.jsonl");
    let file = fs::File::create(&log_path).map_err(|e| CliError::runtime(&log_path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let header = LogLine::Header {
        format_version: LOG_FORMAT_VERSION,
        method: run.method,
        seed: run.seed,
    };
    let mut evals = run.evals.iter().peekable();
    let mut emit = |line: &LogLine| -> Result<(), CliError> {
        let text = serde_json::to_string(line).map_err(|e| CliError::runtime(&log_path, e))?;
        writeln!(w, "{text}").map_err(|e| CliError::runtime(&log_path, e))
    };
    emit(&header)?;
    for log in &run.logs {
        emit(&LogLine::Iter(log.clone()))?;
        while let Some(e) = evals.next_if(|e| e.iter == log.iter) {
            emit(&LogLine::Eval(e.clone()))?;
        }
    }
    drop(emit);
    w.flush().map_err(|e| CliError::runtime(&log_path, e))?;

    let ckpt = dir.join("model.ckpt");
    Checkpoint::from_model(&run.model)
        .save(&ckpt)
        .map_err(|e| CliError::runtime(&ckpt, e))?;

    if dump_rda_table {
        if let Some(table) = &run.rda_table {
            let path = dir.join("rda_table.json");
            table
                .dump(total_iters)
                .write(&path)
                .map_err(|e| CliError::runtime(&path, e))?;
        }
    }
    Ok(())
}
