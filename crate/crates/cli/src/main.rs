use std::fmt::Write as _;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use qsampler_core::harness::{self, ExperimentConfig, ExperimentKind, RunOptions, RunOutput, TableConfig};

#[derive(Parser)]
#[command(name = "qsampler", version, about = "Run sampler, gradient-estimation and optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sampler runs or scaling sweeps.
    RunSampler(Common),
    /// Gradient-estimator trials.
    RunGradest(Common),
    /// Jordan statevector trials.
    RunJordan(Common),
    /// Approximate-convex minimization.
    RunOptimize(Common),
    /// n- and eps-exponents of every algorithm. Uses built-in defaults
    /// when no config is given.
    ReproduceTable(TableArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    run: RunFlags,
}

#[derive(Args)]
struct TableArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    run: RunFlags,
}

#[derive(Args)]
struct RunFlags {
    /// Replaces the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = harness::OUT_DIR_ENV)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    workers: Option<usize>,
}

impl RunFlags {
    fn options(&self) -> RunOptions {
        RunOptions {
            seed: self.seed,
            out_dir: self.out.clone(),
            workers: self.workers,
        }
    }
}

fn load(path: &Path, allowed: &[ExperimentKind]) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if !allowed.contains(&cfg.experiment) {
        bail!(
            "{}: experiment `{}` cannot be run by this subcommand",
            path.display(),
            cfg.experiment.name()
        );
    }
    Ok(cfg)
}

fn report(text: &mut String, out: &RunOutput) {
    for r in &out.rows {
        let seed = r.seed.map(|s| s.to_string()).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            text,
            "{:<14} seed={:<6} {}={:<10} {}={}",
            r.label, seed, r.param, r.value, r.metric, r.metric_value
        );
    }
    paths(text, out);
}

fn paths(text: &mut String, out: &RunOutput) {
    let _ = writeln!(text, "csv: {}", out.csv_path.display());
    let _ = writeln!(text, "ledger: {}", out.ledger_path.display());
}

/// Summary printed to stdout on success.
fn run(cli: Cli) -> Result<String> {
    let mut text = String::new();
    let (common, allowed): (&Common, &[ExperimentKind]) = match &cli.command {
        Command::RunSampler(c) => (c, &[ExperimentKind::Sampler, ExperimentKind::ScalingSweep]),
        Command::RunGradest(c) => (c, &[ExperimentKind::GradEst]),
        Command::RunJordan(c) => (c, &[ExperimentKind::Jordan]),
        Command::RunOptimize(c) => (c, &[ExperimentKind::Optimize]),
        Command::ReproduceTable(t) => {
            let cfg = match &t.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    TableConfig::parse(&text).with_context(|| format!("loading {}", p.display()))?
                }
                None => TableConfig::default(),
            };
            let (table, out) = harness::run_table(&cfg, &t.run.options())?;
            let _ = writeln!(text, "{:<10} {:>8} {:>8} {:>14}", "algorithm", "n-slope", "1/eps", "queries@max-n");
            for row in &table {
                let _ = writeln!(
                    text,
                    "{:<10} {:>8.3} {:>8.3} {:>14.0}",
                    row.theorem.name(),
                    row.n_slope,
                    row.eps_slope,
                    row.queries_at_max_n
                );
            }
            paths(&mut text, &out);
            return Ok(text);
        }
    };
    let cfg = load(&common.config, allowed)?;
    let out = harness::run_experiment(&cfg, &common.run.options())?;
    report(&mut text, &out);
    Ok(text)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(text) => match io::stdout().lock().write_all(text.as_bytes()) {
            Err(e) if e.kind() != io::ErrorKind::BrokenPipe => {
                eprintln!("error: {e}");
                ExitCode::FAILURE
            }
            _ => ExitCode::SUCCESS,
        },
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
