//! Experiment driver behind the `rankup` binary: `run`, `sweep`, `report`
//! and `check`.

pub mod config;
pub mod output;
pub mod report;

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use rankup::trainer::ProtocolFailure;
use rankup::{run_protocol, Method, RunRecord};

pub use config::ExperimentConfig;
use output::{method_dir, read_json, write_json, write_run, MethodSummary, SeedMetrics, SUMMARY_FORMAT_VERSION};

pub const OUT_ENV: &str = "RANKUP_OUT";

#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration; the message names the field.
    Config(String),
    /// Unusable input files or directories.
    Input(String),
    /// Failure while running or writing results.
    Runtime(String),
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn runtime(path: &Path, e: impl Display) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

/// Flags shared by `run` and `sweep`.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub force: bool,
    pub resume: bool,
    pub workers: Option<usize>,
    pub seed_list: Option<Vec<u64>>,
}

/// `--out`, then `RANKUP_OUT`, then the config's `output.dir`, then `out`.
pub fn resolve_out_root(cli: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(p) = cli {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    cfg.output.dir.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn with_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    match workers {
        None => Ok(f()),
        Some(0) => Err(CliError::Config("--workers: must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(|pool| pool.install(f))
            .map_err(|e| CliError::Runtime(format!("thread pool: {e}"))),
    }
}

fn apply_overrides(mut cfg: ExperimentConfig, opts: &RunOptions) -> Result<ExperimentConfig, CliError> {
    if let Some(seeds) = &opts.seed_list {
        if seeds.is_empty() {
            return Err(CliError::Config("--seed-list: at least one seed is required".into()));
        }
        cfg.method.seeds = seeds.clone();
    }
    Ok(cfg)
}

fn write_method(root: &Path, cfg: &ExperimentConfig, runs: &[RunRecord]) -> Result<MethodSummary, CliError> {
    let dir = method_dir(root, &cfg.name, cfg.method.method);
    for run in runs {
        write_run(
            &dir.join(run.seed.to_string()),
            &cfg.name,
            cfg.split.n_labeled,
            cfg.method.total_iters,
            run,
            cfg.output.dump_rda_table,
        )?;
    }
    let mut seeds: Vec<SeedMetrics> = runs
        .iter()
        .map(|r| SeedMetrics {
            seed: r.seed,
            metrics: r.final_metrics,
        })
        .collect();
    seeds.sort_by_key(|s| s.seed);
    let finals: Vec<_> = seeds.iter().map(|s| s.metrics).collect();
    let aggregate = rankup::AggregateMetrics::of(&finals).map_err(|e| CliError::Runtime(e.to_string()))?;
    let summary = MethodSummary {
        format_version: SUMMARY_FORMAT_VERSION,
        experiment: cfg.name.clone(),
        method: cfg.method.method,
        n_labeled: cfg.split.n_labeled,
        runs: seeds,
        aggregate,
    };
    fs::create_dir_all(&dir).map_err(|e| CliError::runtime(&dir, e))?;
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Runs every seed of one method, writes its results and returns the
/// method-level summary.
fn run_cell(root: &Path, cfg: &ExperimentConfig, force: bool) -> Result<MethodSummary, CliError> {
    let dir = method_dir(root, &cfg.name, cfg.method.method);
    if dir.exists() {
        if !force {
            return Err(CliError::Runtime(format!(
                "{}: results already exist; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(&dir).map_err(|e| CliError::runtime(&dir, e))?;
    }
    match run_protocol(&cfg.method, &cfg.data_spec()) {
        Ok(report) => write_method(root, cfg, &report.runs),
        Err(ProtocolFailure { completed, failures }) => {
            for run in &completed {
                write_run(
                    &dir.join(run.seed.to_string()),
                    &cfg.name,
                    cfg.split.n_labeled,
                    cfg.method.total_iters,
                    run,
                    cfg.output.dump_rda_table,
                )?;
            }
            let detail: Vec<String> = failures
                .iter()
                .map(|(seed, e)| match e {
                    rankup::Error::Config { .. } => format!("{e}"),
                    _ => format!("seed {seed}: {e}"),
                })
                .collect();
            let config_error = failures.iter().all(|(_, e)| matches!(e, rankup::Error::Config { .. }));
            let msg = format!("{}/{}: {}", cfg.name, cfg.method.method, detail.join("; "));
            Err(if config_error { CliError::Config(msg) } else { CliError::Runtime(msg) })
        }
    }
}

/// `rankup run`
pub fn cmd_run(config: &Path, opts: &RunOptions) -> Result<MethodSummary, CliError> {
    let cfg = apply_overrides(ExperimentConfig::load(config)?, opts)?;
    let root = resolve_out_root(opts.out.as_deref(), &cfg);
    with_pool(opts.workers, || run_cell(&root, &cfg, opts.force))?
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub csv_path: PathBuf,
    /// `(method, budget, result)` per cell in grid order.
    pub cells: Vec<(Method, usize, Result<MethodSummary, CliError>)>,
    pub skipped: usize,
}

impl SweepOutcome {
    pub fn failed(&self) -> usize {
        self.cells.iter().filter(|c| c.2.is_err()).count()
    }
}

pub fn sweep_experiment_name(name: &str, budget: usize) -> String {
    format!("{name}_n{budget}")
}

/// `rankup sweep`: one protocol per (method, budget) cell. Failed cells are
/// recorded and the sweep continues.
pub fn cmd_sweep(config: &Path, opts: &RunOptions) -> Result<SweepOutcome, CliError> {
    use rayon::prelude::*;

    let cfg = apply_overrides(ExperimentConfig::load(config)?, opts)?;
    let grid = cfg
        .sweep
        .clone()
        .ok_or_else(|| CliError::Config("sweep: block is required for the sweep command".into()))?;
    let root = resolve_out_root(opts.out.as_deref(), &cfg);

    let mut cells_cfg = Vec::new();
    for &budget in &grid.budgets {
        for &method in &grid.methods {
            let mut c = cfg.clone();
            c.name = sweep_experiment_name(&cfg.name, budget);
            c.split.n_labeled = budget;
            c.method.method = method;
            c.sweep = None;
            c.validate()?;
            cells_cfg.push(c);
        }
    }

    let resumed: Vec<Option<MethodSummary>> = cells_cfg
        .iter()
        .map(|c| {
            let path = method_dir(&root, &c.name, c.method.method).join("summary.json");
            (opts.resume && path.is_file())
                .then(|| read_json::<MethodSummary>(&path).ok())
                .flatten()
        })
        .collect();
    let skipped = resumed.iter().filter(|r| r.is_some()).count();

    let results: Vec<Result<MethodSummary, CliError>> = with_pool(opts.workers, || {
        cells_cfg
            .par_iter()
            .zip(resumed.into_par_iter())
            .map(|(c, done)| match done {
                Some(s) => Ok(s),
                None => run_cell(&root, c, opts.force || opts.resume),
            })
            .collect()
    })?;

    let cells: Vec<_> = cells_cfg
        .iter()
        .zip(results)
        .map(|(c, r)| (c.method.method, c.split.n_labeled, r))
        .collect();
    fs::create_dir_all(&root).map_err(|e| CliError::runtime(&root, e))?;
    let csv_path = root.join(format!("{}_sweep.csv", cfg.name));
    fs::write(&csv_path, sweep_csv(&grid.methods, &grid.budgets, &cells))
        .map_err(|e| CliError::runtime(&csv_path, e))?;
    Ok(SweepOutcome { csv_path, cells, skipped })
}

/// Rows are methods; columns are `n<budget>_<metric>_{mean,std}`. Failed
/// cells stay empty.
pub fn sweep_csv(
    methods: &[Method],
    budgets: &[usize],
    cells: &[(Method, usize, Result<MethodSummary, CliError>)],
) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["method".to_string()];
    for b in budgets {
        for m in ["mae", "r2", "srcc"] {
            header.push(format!("n{b}_{m}_mean"));
            header.push(format!("n{b}_{m}_std"));
        }
    }
    w.write_record(&header).expect("in-memory write");
    for &method in methods {
        let mut row = vec![method.to_string()];
        for &b in budgets {
            let cell = cells.iter().find(|c| c.0 == method && c.1 == b).and_then(|c| c.2.as_ref().ok());
            match cell {
                Some(s) => {
                    for ms in [s.aggregate.mae, s.aggregate.r2, s.aggregate.srcc] {
                        row.push(ms.mean.to_string());
                        row.push(ms.std.to_string());
                    }
                }
                None => row.extend(std::iter::repeat_n(String::new(), 6)),
            }
        }
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

/// `rankup report`: prints the table and writes `report.csv` next to the
/// summaries.
pub fn cmd_report(dir: &Path) -> Result<report::Report, CliError> {
    let rep = report::load(dir)?;
    let csv_path = dir.join("report.csv");
    fs::write(&csv_path, rep.render_csv()).map_err(|e| CliError::runtime(&csv_path, e))?;
    Ok(rep)
}

/// `rankup check`: the gradient, oracle, alignment and metric suites.
pub fn cmd_check(seed: u64) -> Result<Vec<rankup::check::CheckResult>, CliError> {
    rankup::check::full_suite(seed).map_err(|e| CliError::Runtime(e.to_string()))
}
