use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rankup_cli::{cmd_check, cmd_report, cmd_run, cmd_sweep, CliError, RunOptions, OUT_ENV};

#[derive(Parser)]
#[command(name = "rankup", version, about = "Semi-supervised regression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output root [default: $RANKUP_OUT, then output.dir, then ./out].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing results.
    #[arg(long)]
    force: bool,
    /// Worker threads for seeds and sweep cells.
    #[arg(long)]
    workers: Option<usize>,
    /// Comma-separated seeds overriding method.seeds.
    #[arg(long, value_delimiter = ',')]
    seed_list: Option<Vec<u64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one method over its seeds and write per-seed results.
    Run(RunArgs),
    /// Run every method × label-budget cell of the sweep block.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Skip cells whose summary already exists.
        #[arg(long)]
        resume: bool,
    },
    /// Render mean±std tables from the summaries under a results root.
    Report {
        /// Results root [default: $RANKUP_OUT, then ./out].
        dir: Option<PathBuf>,
    },
    /// Run the gradient, oracle, alignment and metric self-checks.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn options(a: RunArgs, resume: bool) -> (PathBuf, RunOptions) {
    let opts = RunOptions {
        out: a.out,
        force: a.force,
        resume,
        workers: a.workers,
        seed_list: a.seed_list,
    };
    (a.config, opts)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(a) => {
            let (config, opts) = options(a, false);
            let s = cmd_run(&config, &opts)?;
            let a = s.aggregate;
            println!(
                "{}/{}: MAE {:.4}±{:.4}  R2 {:.4}±{:.4}  SRCC {:.4}±{:.4} over {} seed(s)",
                s.experiment, s.method, a.mae.mean, a.mae.std, a.r2.mean, a.r2.std, a.srcc.mean, a.srcc.std, a.n_runs
            );
            Ok(())
        }
        Command::Sweep { run, resume } => {
            let (config, opts) = options(run, resume);
            let outcome = cmd_sweep(&config, &opts)?;
            for (method, budget, r) in &outcome.cells {
                match r {
                    Ok(s) => println!("ok    n={budget:<5} {method}: MAE {:.4}", s.aggregate.mae.mean),
                    Err(e) => eprintln!("FAIL  n={budget:<5} {method}: {e}"),
                }
            }
            println!(
                "{} cell(s), {} resumed, {} failed; table at {}",
                outcome.cells.len(),
                outcome.skipped,
                outcome.failed(),
                outcome.csv_path.display()
            );
            if outcome.failed() > 0 {
                return Err(CliError::Runtime(format!("{} sweep cell(s) failed", outcome.failed())));
            }
            Ok(())
        }
        Command::Report { dir } => {
            let dir = dir
                .or_else(|| std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("out"));
            print!("{}", cmd_report(&dir)?.render_text());
            Ok(())
        }
        Command::Check { seed } => {
            let results = cmd_check(seed)?;
            let mut failed = 0;
            for r in &results {
                let status = if r.passed { "PASS" } else { "FAIL" };
                println!(
                    "{status}  {:<36} n={:<4} max_err={:.3e} tol={:.1e}",
                    r.name, r.instances, r.max_error, r.tolerance
                );
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                return Err(CliError::Runtime(format!("{failed} check(s) failed")));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rankup: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
