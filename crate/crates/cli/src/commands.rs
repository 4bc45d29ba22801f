use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use pilotsim::bridge::SubmissionBuffer;
use pilotsim::experiment::{self, ExperimentConfig, PRESETS};

use crate::service::{self, AppState};

/// Exit code for a config or usage problem.
pub const EXIT_CONFIG: i32 = 1;
/// Exit code when some run left units unfinished.
pub const EXIT_INCOMPLETE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "pilotsim", version, about = "Discrete-event simulator for pilot-job execution strategies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an experiment from a TOML file or a built-in preset.
    Run(RunArgs),
    /// List the built-in presets, or print one as TOML.
    Presets { name: Option<String> },
    /// Rebuild runs.csv from traces stored by an earlier run.
    Report(ReportArgs),
    /// Serve the task-submission endpoint over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct Source {
    /// Experiment config file.
    #[arg(conflicts_with = "preset", required_unless_present = "preset")]
    pub config: Option<PathBuf>,
    /// Use a built-in preset instead of a file.
    #[arg(long)]
    pub preset: Option<String>,
}

impl Source {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        Ok(match (&self.config, &self.preset) {
            (_, Some(name)) => experiment::preset(name)?,
            (Some(path), None) => {
                ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?
            }
            (None, None) => bail!("either a config file or --preset is required"),
        })
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub source: Source,
    /// Override the base seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the number of repeats per size.
    #[arg(long)]
    pub repeats: Option<u32>,
    /// Output directory (defaults to the config's output.dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Store every run's trace.
    #[arg(long)]
    pub keep_traces: bool,
    /// Only check the config.
    #[arg(long)]
    pub validate: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub source: Source,
    /// Directory written by `run --keep-traces`.
    #[arg(long)]
    pub dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Flush once submissions pause for this many seconds.
    #[arg(long, default_value_t = 10.0)]
    pub idle_s: f64,
    /// How often the flush policy is checked, in milliseconds.
    #[arg(long, default_value_t = 250)]
    pub tick_ms: u64,
}

/// Runs one command, writing human output to `out`. Returns the exit code.
pub fn execute(cli: Cli, out: &mut dyn Write) -> anyhow::Result<i32> {
    match cli.command {
        Command::Run(args) => run(args, out),
        Command::Presets { name } => presets(name.as_deref(), out),
        Command::Report(args) => report(args, out),
        Command::Serve(args) => serve(args),
    }
}

fn run(args: RunArgs, out: &mut dyn Write) -> anyhow::Result<i32> {
    let mut cfg = args.source.load()?;
    if let Some(seed) = args.seed {
        cfg.base_seed = seed;
    }
    if let Some(r) = args.repeats {
        cfg.repeats = r;
    }
    cfg.validate()?;
    if args.validate {
        writeln!(out, "{}: ok", cfg.name)?;
        return Ok(0);
    }
    let dir = args.out.unwrap_or_else(|| cfg.output.dir.clone());
    cfg.output.keep_traces |= args.keep_traces;
    let report = experiment::run_experiment(&cfg)?;
    report.write(&dir, cfg.output.keep_traces)?;
    out.write_all(report.pes_table().as_bytes())?;
    for s in &report.sizes {
        if let Some(e) = &s.error {
            writeln!(out, "size {}: {e}", s.size)?;
        } else if s.completed_runs < s.runs {
            writeln!(out, "size {}: {} of {} runs incomplete", s.size, s.runs - s.completed_runs, s.runs)?;
        }
    }
    writeln!(out, "wrote {}", dir.display())?;
    Ok(if report.all_completed() { 0 } else { EXIT_INCOMPLETE })
}

fn presets(name: Option<&str>, out: &mut dyn Write) -> anyhow::Result<i32> {
    match name {
        None => {
            for p in PRESETS {
                writeln!(out, "{p}")?;
            }
        }
        Some(n) => match experiment::preset_source(n) {
            Some(text) => out.write_all(text.as_bytes())?,
            None => bail!("unknown preset `{n}` (known: {})", PRESETS.join(", ")),
        },
    }
    Ok(0)
}

fn report(args: ReportArgs, out: &mut dyn Write) -> anyhow::Result<i32> {
    let cfg = args.source.load()?;
    let csv = experiment::rebuild_runs_csv(&cfg, Path::new(&args.dir))?;
    out.write_all(csv.as_bytes())?;
    Ok(0)
}

fn serve(args: ServeArgs) -> anyhow::Result<i32> {
    let buffer = SubmissionBuffer::new(args.idle_s)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(service::serve(
        &args.addr,
        AppState::new(buffer),
        Duration::from_millis(args.tick_ms.max(1)),
    ))?;
    Ok(0)
}
