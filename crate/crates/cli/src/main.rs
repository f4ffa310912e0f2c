//! `memsim`: prepare datasets, train, evaluate, replay and summarise runs.
//!
//! Exit codes: 0 success, 1 finished but degraded (fallbacks fired),
//! 2 user or configuration error, 3 environment error (backend unreachable).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use memsim_core::config::{BackendKind, RunConfig, Variant};
use memsim_core::dataset::{Bundle, DatasetSpec};
use memsim_core::evaluation::{table, MetricReport};
use memsim_core::groups::GroupBy;
use memsim_core::pipeline::{self, TrainOptions};
use memsim_core::Error;

#[derive(Parser)]
#[command(name = "memsim", version, about = "Agent-based recommendation simulator")]
struct Cli {
    /// More log output (repeat for more).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a dataset bundle from raw reviews.
    Prepare(PrepareArgs),
    /// Run the training simulation.
    Train(TrainArgs),
    /// Evaluate a trained snapshot.
    Eval(EvalArgs),
    /// Re-run a recorded training trace and check it matches.
    Replay(ReplayArgs),
    /// Print the summary table of one or more report files.
    Report(ReportArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Dataset spec file.
    #[arg(long, required_unless_present = "preset", conflicts_with = "preset")]
    spec: Option<PathBuf>,
    /// Use built-in preset cross-N (1 to 5) instead of a spec file.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=5), requires = "input")]
    preset: Option<u8>,
    /// Raw review file (with --preset).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Bundle directory, overriding the spec.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Overwrite an existing bundle.
    #[arg(long)]
    force: bool,
}

/// Settings that override the config file.
#[derive(Args)]
struct Overrides {
    /// Run config file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// baseline, dual, shared, history-groups or full.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// interest or history; only meaningful with groups enabled.
    #[arg(long, value_parser = parse_group_by)]
    group_by: Option<GroupBy>,
    /// scripted, replay or live.
    #[arg(long, value_parser = parse_backend)]
    backend: Option<BackendKind>,
    /// Template file replacing the built-in templates.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Continue from the last periodic checkpoint.
    #[arg(long)]
    resume: bool,
    /// Stop after this many interactions, as if interrupted.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Trained snapshot; defaults to the one in the output directory.
    #[arg(long)]
    snapshot: Option<PathBuf>,
    /// Number of evaluation runs.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    runs: Option<u64>,
}

#[derive(Args)]
struct ReplayArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Trace to replay; defaults to the one in the output directory.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Report files written by `eval`.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_backend(s: &str) -> Result<BackendKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_group_by(s: &str) -> Result<GroupBy, String> {
    match s {
        "interest" => Ok(GroupBy::Interest),
        "history" => Ok(GroupBy::History),
        _ => Err(format!("unknown grouping `{s}`; expected interest or history")),
    }
}

/// How a command finished, before mapping to an exit code.
enum Outcome {
    Clean,
    Degraded(usize),
}

impl Overrides {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut config = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.run.seed = seed;
        }
        if let Some(variant) = self.variant {
            config.apply_variant(variant);
        }
        if let Some(group_by) = self.group_by {
            config.features.group_by = group_by;
        }
        if let Some(kind) = self.backend {
            config.backend.kind = kind;
        }
        if let Some(path) = &self.templates {
            config.templates.path = Some(path.clone());
        }
        if let Some(path) = &self.output {
            config.paths.output = path.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

fn prepare(args: &PrepareArgs) -> Result<Outcome, Error> {
    let mut spec = match (&args.spec, args.preset) {
        (Some(path), _) => DatasetSpec::load(path)?,
        (None, Some(n)) => {
            let input = args.input.clone().expect("clap requires --input");
            let output = args.output.clone().unwrap_or_else(|| PathBuf::from(format!("data/cross-{n}")));
            DatasetSpec::preset(n.into(), input, output)?
        }
        (None, None) => unreachable!("clap requires --spec or --preset"),
    };
    if let Some(output) = &args.output {
        spec.output = output.clone();
    }
    if args.spec.is_some() && args.input.is_some() {
        spec.input = args.input.clone();
    }
    let bundle = Bundle::prepare(&spec)?;
    bundle.write(&spec.output, args.force)?;
    let m = &bundle.manifest;
    println!(
        "prepared {}: {} users, {} items, {}/{}/{} train/valid/test -> {}",
        m.name,
        m.users,
        m.items,
        m.train,
        m.valid,
        m.test,
        spec.output.display()
    );
    if m.skipped_lines > 0 {
        println!("skipped {} malformed lines", m.skipped_lines);
    }
    Ok(Outcome::Clean)
}

fn train(args: &TrainArgs) -> Result<Outcome, Error> {
    let config = args.overrides.load()?;
    let options = TrainOptions {
        resume: args.resume,
        stop_after: args.stop_after,
    };
    let summary = pipeline::train(&config, &options)?;
    let out = config.paths.output.display();
    match &summary.manifest {
        Some(manifest) => println!(
            "trained {} interactions ({} degraded steps) -> {out}\nsnapshot {}",
            summary.processed,
            summary.degraded,
            manifest.final_snapshot_digest.as_deref().unwrap_or("-")
        ),
        None => println!(
            "stopped after {}/{} interactions; resume with --resume",
            summary.processed, summary.total
        ),
    }
    Ok(degraded(summary.degraded))
}

fn eval(args: &EvalArgs) -> Result<Outcome, Error> {
    let config = args.overrides.load()?;
    let snapshot = args
        .snapshot
        .clone()
        .unwrap_or_else(|| config.paths.output.join(pipeline::SNAPSHOT_FILE));
    let runs = args.runs.map(|r| r as usize);
    let summary = pipeline::evaluate(&config, &snapshot, runs)?;
    print!("{}", summary.report.table());
    println!("report -> {}", config.paths.output.join(pipeline::REPORT_FILE).display());
    Ok(degraded(summary.report.degraded()))
}

fn replay(args: &ReplayArgs) -> Result<Outcome, Error> {
    let config = args.overrides.load()?;
    let trace = args
        .trace
        .clone()
        .unwrap_or_else(|| config.paths.output.join(pipeline::TRACE_FILE));
    let summary = pipeline::replay(&config, &trace)?;
    println!(
        "replayed {} interactions; final snapshot {} matches",
        summary.steps, summary.final_snapshot_digest
    );
    Ok(Outcome::Clean)
}

fn report(args: &ReportArgs) -> Result<Outcome, Error> {
    let mut rows = Vec::new();
    for path in &args.reports {
        rows.extend(MetricReport::read_summary(path)?);
    }
    print!("{}", table(&rows));
    Ok(degraded(rows.iter().map(|r| r.degraded).sum()))
}

fn degraded(count: usize) -> Outcome {
    if count > 0 {
        Outcome::Degraded(count)
    } else {
        Outcome::Clean
    }
}

fn exit_code(error: &Error) -> u8 {
    if error.is_environmental() {
        3
    } else {
        2
    }
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = EnvFilter::try_from_env("MEMSIM_LOG").unwrap_or_else(|_| EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    let result = match &cli.command {
        Command::Prepare(a) => prepare(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Replay(a) => replay(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(Outcome::Clean) => ExitCode::SUCCESS,
        Ok(Outcome::Degraded(n)) => {
            eprintln!("warning: {n} degraded results (fallbacks fired)");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn environment_errors_map_to_three() {
        assert_eq!(exit_code(&Error::BackendUnavailable("down".into())), 3);
        assert_eq!(exit_code(&Error::Config("bad".into())), 2);
        let io = Error::Io {
            path: "x".into(),
            source: std::io::Error::from(std::io::ErrorKind::NotFound),
        };
        assert_eq!(exit_code(&io), 2);
    }
}
