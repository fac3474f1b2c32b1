//! Command-line front end.
//!
//! Exit codes: 0 success, 1 configuration or run error, 2 a failed
//! acceptance check. Errors go to stderr as one JSON object per line.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use thiserror::Error;

use crate::checkpoint::{self, Checkpoint, CheckpointError};
use crate::config::{ConfigError, ExperimentConfig, ExperimentKind};
use crate::harness::HarnessError;
use crate::metrics::{self, MetricSink, MetricsError};
use crate::plot;
use crate::suite;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_ACCEPTANCE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Harness(_) => "run",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::Metrics(_) => "metrics",
            CliError::Io { .. } => "io",
            CliError::Usage(_) => "usage",
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "trophic", version, about = "Block-sparse plastic networks: experiments and acceptance checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Config file.
    #[arg(long, short)]
    pub config: PathBuf,
    /// Override a key, `section.key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set experiment.seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("experiment.seed={s}"));
        }
        Ok(ExperimentConfig::load(&self.config, &overrides)?)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write its config, metrics and curves.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory; defaults to `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config file and print its resolved form.
    ValidateConfig {
        path: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Continue a checkpointed run to its end.
    Replay {
        checkpoint: PathBuf,
        /// Resolved config of the original run; defaults to `config.cfg`
        /// next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory; defaults to `replay/` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the acceptance checks listed under `suite.criteria`.
    Suite {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render one metric of a metrics file as an SVG line chart.
    Plot {
        metrics: PathBuf,
        #[arg(long)]
        metric: String,
        /// Experiment id; required when several carry the metric.
        #[arg(long)]
        experiment: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `argv` (including the program name), runs the command and returns
/// the exit code.
pub fn parse_and_dispatch<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(stderr, "{}", e.render());
                return EXIT_ERROR;
            }
            let _ = write!(stdout, "{}", e.render());
            return EXIT_OK;
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "{}", json!({ "level": "error", "kind": e.kind(), "message": e.to_string() }));
            EXIT_ERROR
        }
    }
}

fn dispatch(cmd: Command, stdout: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Run { config, out } => {
            let cfg = config.load()?;
            if cfg.experiment()? == ExperimentKind::Suite {
                return suite_command(&cfg, out, stdout);
            }
            let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
            run(&cfg, &dir, stdout)?;
            Ok(EXIT_OK)
        }
        Command::ValidateConfig { path, overrides } => {
            let cfg = ExperimentConfig::load(&path, &overrides)?;
            write_out(stdout, &cfg.to_text())?;
            Ok(EXIT_OK)
        }
        Command::Replay { checkpoint, config, out } => {
            let parent = checkpoint.parent().map(Path::to_path_buf).unwrap_or_default();
            let cfg_path = config.unwrap_or_else(|| parent.join("config.cfg"));
            let cfg = ExperimentConfig::load(&cfg_path, &[])?;
            let ck = Checkpoint::load(&checkpoint, &cfg)?;
            let dir = out.unwrap_or_else(|| parent.join("replay"));
            prepare(&cfg, &dir)?;
            let path = dir.join("metrics.jsonl");
            let mut sink = MetricSink::new(BufWriter::new(create(&path)?), &cfg.hash());
            let from = ck.steps_done;
            let report = checkpoint::replay(&cfg, ck, &mut sink)?;
            finish(sink, &dir)?;
            write_out(
                stdout,
                &format!(
                    "{}\n",
                    json!({ "replayed_from": from, "final_quarter_cosine": report.final_quarter_cosine })
                ),
            )?;
            Ok(EXIT_OK)
        }
        Command::Suite { config, out } => {
            let cfg = config.load()?;
            suite_command(&cfg, out, stdout)
        }
        Command::Plot {
            metrics: path,
            metric,
            experiment,
            out,
        } => {
            let records = metrics::read_records(&path)?;
            let mut names: Vec<&str> = records
                .iter()
                .filter(|r| r.metric == metric && experiment.as_deref().is_none_or(|e| e == r.experiment))
                .map(|r| r.experiment.as_str())
                .collect();
            names.sort_unstable();
            names.dedup();
            let exp = match names.as_slice() {
                [one] => one.to_string(),
                [] => return Err(CliError::Usage(format!("no records of metric `{metric}`"))),
                many => {
                    return Err(CliError::Usage(format!(
                        "metric `{metric}` appears under several experiments, pick one with --experiment: {}",
                        many.join(", ")
                    )))
                }
            };
            let own: Vec<_> = records.into_iter().filter(|r| r.experiment == exp).collect();
            let svg = plot::line_chart(&format!("{exp}: {metric}"), "step", &metric, &metrics::series(&own, &metric));
            std::fs::write(&out, svg).map_err(|source| io(&out, source))?;
            Ok(EXIT_OK)
        }
    }
}

fn io(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|source| io(path, source))
}

fn write_out(out: &mut dyn Write, s: &str) -> Result<()> {
    out.write_all(s.as_bytes()).map_err(|source| io(Path::new("<stdout>"), source))
}

/// Creates `dir` and persists the resolved config before anything runs.
fn prepare(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| io(dir, source))?;
    let path = dir.join("config.cfg");
    std::fs::write(&path, cfg.to_text()).map_err(|source| io(&path, source))
}

/// Flushes the metric file and derives `curves.csv` from it.
fn finish(mut sink: MetricSink<BufWriter<File>>, dir: &Path) -> Result<()> {
    sink.flush()?;
    drop(sink);
    let records = metrics::read_records(&dir.join("metrics.jsonl"))?;
    let path = dir.join("curves.csv");
    metrics::write_csv(&records, BufWriter::new(create(&path)?))?;
    Ok(())
}

/// Runs one experiment into `dir`: `config.cfg`, `metrics.jsonl`,
/// `curves.csv`, `summary.json` and, for checkpointed alignment runs,
/// `checkpoint-*.bin`.
pub fn run(cfg: &ExperimentConfig, dir: &Path, stdout: &mut dyn Write) -> Result<()> {
    prepare(cfg, dir)?;
    let path = dir.join("metrics.jsonl");
    let mut sink = MetricSink::new(BufWriter::new(create(&path)?), &cfg.hash());
    let summary = if cfg.experiment()? == ExperimentKind::Alignment && cfg.checkpoint_every > 0 {
        let (r, files) = checkpoint::run_alignment(cfg, &mut sink, dir)?;
        json!({
            "first_quarter_cosine": r.first_quarter_cosine,
            "final_quarter_cosine": r.final_quarter_cosine,
            "initial_mse": r.initial_mse,
            "mse_step": r.mse_step,
            "cosine_step": r.cosine_step,
            "checkpoints": files.len(),
        })
    } else {
        suite::run(cfg, &mut sink)?
    };
    finish(sink, dir)?;
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    let path = dir.join("summary.json");
    std::fs::write(&path, &text).map_err(|source| io(&path, source))?;
    write_out(stdout, &text)
}

fn suite_command(cfg: &ExperimentConfig, out: Option<PathBuf>, stdout: &mut dyn Write) -> Result<i32> {
    let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    prepare(cfg, &dir)?;
    let mut results = Vec::new();
    for &id in &cfg.criteria {
        let (r, records) = suite::criterion(id)?;
        let path = dir.join(format!("{:02}-{}.jsonl", r.id, r.name));
        std::fs::write(&path, records).map_err(|source| io(&path, source))?;
        write_out(stdout, &format!("{}\n", r.line()))?;
        results.push(r);
    }
    let passed = results.iter().filter(|r| r.passed).count();
    write_out(stdout, &format!("{passed}/{} checks passed\n", results.len()))?;
    let summary = serde_json::Value::Array(results.iter().map(|r| r.to_json()).collect());
    let path = dir.join("suite.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n")
        .map_err(|source| io(&path, source))?;
    Ok(if passed == results.len() { EXIT_OK } else { EXIT_ACCEPTANCE })
}
