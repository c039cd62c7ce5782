//! `fedsim`: run, check, report on, and tune federated courses from the
//! command line. Everything a run writes is plain text (JSONL/CSV/TOML)
//! except the final checkpoint, which uses the wire codec.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use fedsim::analytics::{render_report, AnalyticsError, Report, RunView};
use fedsim::autotune::{
    random_search, successive_halving, AutotuneError, CourseObjective, SearchOutcome, SearchSpace,
};
use fedsim::config::{parse_config, parse_graph, render_effective, ConfigError, ExperimentConfig};
use fedsim::fedcore::{encode_checkpoint, run_course_final_snapshot, FedCoreError, World};
use fedsim::msgflow::{
    build_flow_graph, encode_message, Completeness, HandlerRegistry, MsgFlowError,
};
use fedsim::runlog::{RunLogError, RunLogWriter};

#[derive(Parser)]
#[command(
    name = "fedsim",
    version,
    about = "Deterministic virtual-time federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one course and write its artifacts to the output directory.
    Run {
        /// Experiment config file.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a handler graph for completeness without running anything.
    Check {
        /// Course config whose effective handler graph is checked.
        #[arg(long, required_unless_present = "graph", conflicts_with = "graph")]
        config: Option<PathBuf>,
        /// Standalone graph description: a TOML file of [[handler]] tables.
        #[arg(long)]
        graph: Option<PathBuf>,
    },
    /// Rebuild plot-ready tables and a summary from a stored run log.
    Report {
        /// Path to a runlog.jsonl.
        runlog: PathBuf,
        /// Accuracy the time-to-target summary aims for.
        #[arg(long)]
        target: Option<f64>,
        /// Directory the tables are written to.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Search trainer hyperparameters, running a fresh course per trial.
    Hpo {
        /// Base experiment config; sampled points overwrite it per trial.
        #[arg(long)]
        config: PathBuf,
        /// Search space: a TOML file of [[dimension]] tables.
        #[arg(long)]
        space: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Random)]
        method: Method,
        /// Trial count; the initial cohort size under sha.
        #[arg(long, default_value_t = 16)]
        budget: usize,
        /// Rounds each trial trains for; per rung under sha.
        #[arg(long, default_value_t = 5)]
        rounds: u64,
        /// Divisor on the survivor count between sha rungs.
        #[arg(long, default_value_t = 2)]
        rate: usize,
        /// Number of sha rungs.
        #[arg(long, default_value_t = 3)]
        rungs: u32,
        /// Override the config's seed; also seeds point sampling.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Method {
    Random,
    Sha,
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Course(#[from] FedCoreError),
    #[error(transparent)]
    Flow(#[from] MsgFlowError),
    #[error(transparent)]
    Log(#[from] RunLogError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error(transparent)]
    Tune(#[from] AutotuneError),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl CliError {
    /// 3 flags a stalled course; everything else is a generic failure.
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Course(FedCoreError::CourseStalled { .. })
            | CliError::Tune(AutotuneError::Course(FedCoreError::CourseStalled { .. })) => 3,
            _ => 1,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Exit 2 is reserved for failed completeness checks, so usage
            // errors exit 1 instead of clap's default 2.
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::Run { config, seed, out } => cmd_run(&config, seed, out.as_deref()),
        Command::Check { config, graph } => cmd_check(config.as_deref(), graph.as_deref()),
        Command::Report {
            runlog,
            target,
            out,
        } => cmd_report(&runlog, target, &out),
        Command::Hpo {
            config,
            space,
            method,
            budget,
            rounds,
            rate,
            rungs,
            seed,
            out,
        } => cmd_hpo(
            &config,
            &space,
            method,
            budget,
            rounds,
            rate,
            rungs,
            seed,
            out.as_deref(),
        ),
    }
}

fn cmd_run(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<u8, CliError> {
    let mut cfg = parse_config(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(out) = out {
        cfg.output.dir = out.display().to_string();
    }
    init_logging(&cfg.output.log_level);

    let world = build_world(&cfg)?;
    match build_flow_graph(&world.registry).check_completeness() {
        Completeness::Incomplete => {
            eprintln!("handler graph incomplete: no start-to-termination path");
            return Ok(2);
        }
        Completeness::CompleteWithWarnings(unreachable) => {
            log::warn!("unreachable message types: {}", join(&unreachable));
        }
        Completeness::Complete => {}
    }

    let dir = PathBuf::from(&cfg.output.dir);
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    write_text(&dir.join("config.toml"), &render_effective(&cfg))?;

    let log_path = dir.join("runlog.jsonl");
    let file = fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    let mut log = RunLogWriter::new(BufWriter::new(file));
    let run = run_course_final_snapshot(&world, &mut log);
    log.flush()?;
    drop(log);
    let (outcome, snapshot) = run?;

    let text = fs::read_to_string(&log_path).map_err(|e| io_err(&log_path, e))?;
    let report = render_report(&RunView::from_text(&text)?, cfg.eval.target_accuracy)?;
    write_report(&dir, &report)?;
    if let Some(snap) = snapshot {
        let path = dir.join("checkpoint.bin");
        let bytes = encode_message(&encode_checkpoint(&snap));
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
    }

    println!(
        "{}: {} rounds ({}), finished at t={:.3}, val loss {:.6}{}",
        outcome.strategy,
        outcome.rounds,
        outcome.reason.as_str(),
        outcome.finished_at.seconds(),
        outcome.final_val_loss,
        outcome
            .final_val_accuracy
            .map(|a| format!(", val acc {a:.4}"))
            .unwrap_or_default(),
    );
    println!("artifacts in {}", dir.display());
    Ok(0)
}

fn cmd_check(config: Option<&Path>, graph: Option<&Path>) -> Result<u8, CliError> {
    init_logging("warn");
    let registry = if let Some(path) = graph {
        let mut reg = HandlerRegistry::new();
        for (event, decl) in parse_graph(path)? {
            reg.register(event, decl)?;
        }
        reg
    } else {
        let cfg = parse_config(config.expect("clap requires one of config/graph"))?;
        build_world(&cfg)?.registry
    };
    match build_flow_graph(&registry).check_completeness() {
        Completeness::Complete => {
            println!("complete");
            Ok(0)
        }
        Completeness::CompleteWithWarnings(unreachable) => {
            println!("complete with warnings: unreachable {}", join(&unreachable));
            Ok(0)
        }
        Completeness::Incomplete => {
            println!("incomplete");
            Ok(2)
        }
    }
}

fn cmd_report(runlog: &Path, target: Option<f64>, out: &Path) -> Result<u8, CliError> {
    init_logging("warn");
    let text = fs::read_to_string(runlog).map_err(|e| io_err(runlog, e))?;
    let report = render_report(&RunView::from_text(&text)?, target)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_report(out, &report)?;
    println!("{}", report.summary_json.trim_end());
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn cmd_hpo(
    config: &Path,
    space: &Path,
    method: Method,
    budget: usize,
    rounds: u64,
    rate: usize,
    rungs: u32,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<u8, CliError> {
    let mut cfg = parse_config(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(out) = out {
        cfg.output.dir = out.display().to_string();
    }
    init_logging(&cfg.output.log_level);

    let text = fs::read_to_string(space).map_err(|e| io_err(space, e))?;
    let space = SearchSpace::from_toml(&text)?;
    let objective = CourseObjective {
        base: cfg.to_course_spec()?,
    };
    let outcome = match method {
        Method::Random => random_search(&space, budget, rounds, &objective, cfg.seed)?,
        Method::Sha => {
            successive_halving(&space, budget, rate, rungs, rounds, &objective, cfg.seed)?
        }
    };

    let dir = PathBuf::from(&cfg.output.dir);
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    write_text(&dir.join("trials.csv"), &trials_csv(&outcome))?;
    let best = serde_json::json!({
        "best": outcome.best,
        "loss": outcome.best_loss,
        "trials": outcome.trials.len(),
        "total_rounds": outcome.total_rounds,
    });
    write_text(&dir.join("best.json"), &format!("{best:#}\n"))?;
    println!(
        "best val loss {:.6} over {} trials, {} simulated rounds",
        outcome.best_loss,
        outcome.trials.len(),
        outcome.total_rounds
    );
    Ok(0)
}

/// Build the immutable world, laying any configured handler overrides over
/// the canonical registry.
fn build_world(cfg: &ExperimentConfig) -> Result<World, CliError> {
    let mut world = World::build(cfg.to_course_spec()?)?;
    for (event, decl) in cfg.handler_overrides()? {
        world.registry.register(event, decl)?;
    }
    Ok(world)
}

/// FEDSIM_LOG wins; the config's output.log_level is the fallback filter.
fn init_logging(default_filter: &str) {
    let _ = env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("FEDSIM_LOG", default_filter),
    )
    .format_timestamp(None)
    .try_init();
}

fn write_report(dir: &Path, report: &Report) -> Result<(), CliError> {
    write_text(&dir.join("metrics.csv"), &report.evals_csv)?;
    write_text(&dir.join("agg_counts.csv"), &report.agg_counts_csv)?;
    write_text(&dir.join("staleness.csv"), &report.staleness_csv)?;
    write_text(&dir.join("clientwise.csv"), &report.clientwise_csv)?;
    write_text(&dir.join("summary.json"), &report.summary_json)
}

fn trials_csv(outcome: &SearchOutcome) -> String {
    let dims: Vec<&String> = outcome
        .trials
        .first()
        .map(|t| t.point.keys().collect())
        .unwrap_or_default();
    let mut csv = String::from("trial,rung,rounds,loss");
    for d in &dims {
        csv.push(',');
        csv.push_str(d);
    }
    csv.push('\n');
    for t in &outcome.trials {
        let loss = t.loss.map(|l| l.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{}",
            t.trial, t.rung, t.rounds_total, loss
        ));
        for d in &dims {
            csv.push_str(&format!(",{}", t.point[*d]));
        }
        csv.push('\n');
    }
    csv
}

fn join(set: &std::collections::BTreeSet<String>) -> String {
    set.iter()
        .map(String::as_str)
        .collect::<Vec<_>>()
        .join(", ")
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}
