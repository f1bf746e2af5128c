//! `cotravel`: simulate, correlate, query, evaluate and inspect.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 too many
//! malformed events, 5 unknown id.

mod config;

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use cotravel::engine::{Engine, EngineError};
use cotravel::evaluate::{self, EvalOptions};
use cotravel::io::{parse_event, write_rankings};
use cotravel::simulator::{self, GroundTruth};
use cotravel::{Event, LookupTables};
use serde::Serialize;

use config::PipelineConfig;

#[derive(Parser)]
#[command(name = "cotravel", version, about = "Find GSM and WiFi identifiers that travel together")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Simulator seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of pair shards.
    #[arg(long, global = true)]
    shards: Option<usize>,
    /// Disable device-based pruning.
    #[arg(long, global = true)]
    no_prune: bool,
    /// Leave the device match score out of the overall score.
    #[arg(long, global = true)]
    no_device_score: bool,
}

#[derive(Args)]
struct Inputs {
    /// Event JSON Lines; `-` reads standard input.
    #[arg(long)]
    events: Option<PathBuf>,
    /// Lookup tables JSON.
    #[arg(long)]
    tables: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset.
    Simulate {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank all candidate pairs.
    Correlate {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Rank the partners of one identifier; CSV on standard output.
    Query {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        target: String,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Score methods against ground truth over a grid sweep.
    Evaluate {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated quadtree levels.
        #[arg(long, value_delimiter = ',')]
        levels: Vec<u8>,
        /// Comma-separated interval lengths in seconds.
        #[arg(long, value_delimiter = ',')]
        intervals: Vec<f64>,
    },
    /// Dump the accumulator state of one pair as JSON.
    Inspect {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
    },
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(m: impl Into<String>) -> Self {
        Failure { code: 2, message: m.into() }
    }

    fn io(m: impl Into<String>) -> Self {
        Failure { code: 3, message: m.into() }
    }
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> Failure + '_ {
    move |e| Failure::io(format!("{}: {e}", path.display()))
}

fn from_engine(e: EngineError) -> Failure {
    match e {
        EngineError::UnknownId(id) => Failure { code: 5, message: format!("unknown id {id}") },
        other => Failure { code: 4, message: other.to_string() },
    }
}

fn effective_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &cli.common.config {
        Some(p) if !p.exists() => return Err(Failure::io(format!("{}: no such file", p.display()))),
        Some(p) => PipelineConfig::load(p).map_err(Failure::config)?,
        None => PipelineConfig::default(),
    };
    let c = &cli.common;
    if let Some(s) = c.seed {
        cfg.simulator.seed = s;
    }
    if let Some(k) = c.shards {
        cfg.engine.shards = k;
    }
    if c.no_prune {
        cfg.engine.prune = false;
    }
    if c.no_device_score {
        cfg.engine.device_score = false;
    }
    match &cli.command {
        Command::Simulate { out } => set(&mut cfg.paths.out, out),
        Command::Correlate { inputs, out, .. } => {
            set_inputs(&mut cfg, inputs);
            set(&mut cfg.paths.out, out);
        }
        Command::Evaluate { inputs, truth, out, .. } => {
            set_inputs(&mut cfg, inputs);
            set(&mut cfg.paths.truth, truth);
            set(&mut cfg.paths.out, out);
        }
        Command::Query { inputs, .. } | Command::Inspect { inputs, .. } => set_inputs(&mut cfg, inputs),
    }
    cfg.validate().map_err(Failure::config)?;
    Ok(cfg)
}

fn set(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if flag.is_some() {
        slot.clone_from(flag);
    }
}

fn set_inputs(cfg: &mut PipelineConfig, i: &Inputs) {
    set(&mut cfg.paths.events, &i.events);
    set(&mut cfg.paths.tables, &i.tables);
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, Failure> {
    p.as_deref().ok_or_else(|| Failure::config(format!("no {what} path given")))
}

fn prepare_out(cfg: &PipelineConfig) -> Result<PathBuf, Failure> {
    let out = required(&cfg.paths.out, "output directory")?.to_path_buf();
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    let path = out.join("config.toml");
    std::fs::write(&path, cfg.to_toml()).map_err(io_err(&path))?;
    Ok(out)
}

fn load_tables(cfg: &PipelineConfig) -> Result<Option<Arc<LookupTables>>, Failure> {
    let Some(path) = &cfg.paths.tables else { return Ok(None) };
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let (tables, unknown) =
        LookupTables::from_json(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    if !unknown.is_empty() {
        log::warn!("{}: ignoring unknown keys {}", path.display(), unknown.join(", "));
    }
    Ok(Some(Arc::new(tables)))
}

fn open_events(cfg: &PipelineConfig) -> Result<Box<dyn BufRead>, Failure> {
    let path = required(&cfg.paths.events, "events")?;
    if path == Path::new("-") {
        return Ok(Box::new(BufReader::new(io::stdin())));
    }
    Ok(Box::new(BufReader::new(File::open(path).map_err(io_err(path))?)))
}

/// Counts rejected lines and fails once the budget is exceeded.
struct Budget {
    allowed: usize,
    rejected: usize,
}

impl Budget {
    fn reject(&mut self, line: usize, why: impl std::fmt::Display) -> Result<(), Failure> {
        self.rejected += 1;
        log::warn!("line {line}: {why}");
        if self.rejected > self.allowed {
            return Err(Failure { code: 4, message: format!("line {line}: {why} (error budget {} exceeded)", self.allowed) });
        }
        Ok(())
    }
}

const CHUNK: usize = 8192;

/// Parses the event stream in chunks, handing each chunk to `sink` along
/// with the line number of every event.
fn stream_events(
    cfg: &PipelineConfig,
    budget: &mut Budget,
    mut sink: impl FnMut(&[Event], &[usize], &mut Budget) -> Result<(), Failure>,
) -> Result<usize, Failure> {
    let reader = open_events(cfg)?;
    let (mut chunk, mut lines) = (Vec::with_capacity(CHUNK), Vec::with_capacity(CHUNK));
    let mut total = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Failure::io(format!("reading events: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_event(&line, i + 1) {
            Ok(e) => {
                chunk.push(e);
                lines.push(i + 1);
            }
            Err(e) => budget.reject(i + 1, e)?,
        }
        if chunk.len() == CHUNK {
            total += chunk.len();
            sink(&chunk, &lines, budget)?;
            chunk.clear();
            lines.clear();
        }
    }
    total += chunk.len();
    sink(&chunk, &lines, budget)?;
    Ok(total)
}

fn run_engine(cfg: &PipelineConfig) -> Result<(Engine, RunInfo), Failure> {
    let start = Instant::now();
    let mut engine = Engine::new(cfg.settings(), load_tables(cfg)?);
    let mut budget = Budget { allowed: cfg.input.error_budget, rejected: 0 };
    let parsed = stream_events(cfg, &mut budget, |chunk, lines, budget| {
        for (i, err) in engine.ingest_batch(chunk) {
            budget.reject(lines[i], err)?;
        }
        Ok(())
    })?;
    engine.finish().map_err(from_engine)?;
    let stats = engine.stats();
    let info = RunInfo { events_parsed: parsed, events_rejected: budget.rejected, wall_s: start.elapsed().as_secs_f64(), stats };
    Ok((engine, info))
}

#[derive(Serialize)]
struct RunInfo {
    events_parsed: usize,
    events_rejected: usize,
    wall_s: f64,
    stats: cotravel::engine::EngineStats,
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(v).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

fn cmd_simulate(cfg: &PipelineConfig) -> Result<(), Failure> {
    let out = prepare_out(cfg)?;
    let sim = simulator::simulate(&cfg.simulator).map_err(Failure::config)?;
    sim.write_to(&out, &cfg.simulator).map_err(io_err(&out))?;
    log::info!("{} events from {} devices written to {}", sim.events.len(), sim.truth.devices.len(), out.display());
    Ok(())
}

fn cmd_correlate(cfg: &PipelineConfig, limit: Option<usize>) -> Result<(), Failure> {
    let out = prepare_out(cfg)?;
    let (engine, info) = run_engine(cfg)?;
    let ranked = engine.rank_general(limit.unwrap_or(usize::MAX));
    let path = out.join("rankings.csv");
    let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    write_rankings(&mut w, &ranked).and_then(|_| w.flush()).map_err(io_err(&path))?;
    write_json(&out.join("run.json"), &info)
}

fn cmd_query(cfg: &PipelineConfig, target: &str, limit: Option<usize>) -> Result<(), Failure> {
    let (engine, _) = run_engine(cfg)?;
    let ranked = engine.rank_specific(target, limit.unwrap_or(usize::MAX)).map_err(from_engine)?;
    let stdout = io::stdout();
    let mut w = BufWriter::new(stdout.lock());
    write_rankings(&mut w, &ranked).and_then(|_| w.flush()).map_err(|e| Failure::io(e.to_string()))
}

fn cmd_inspect(cfg: &PipelineConfig, a: &str, b: &str) -> Result<(), Failure> {
    let (engine, _) = run_engine(cfg)?;
    let state = engine.inspect(a, b).map_err(from_engine)?;
    println!("{}", serde_json::to_string_pretty(&state).expect("serializable"));
    Ok(())
}

fn cmd_evaluate(cfg: &PipelineConfig, levels: &[u8], intervals: &[f64]) -> Result<(), Failure> {
    let truth_path = required(&cfg.paths.truth, "truth")?;
    let truth = GroundTruth::load(truth_path).map_err(io_err(truth_path))?;
    let out = prepare_out(cfg)?;
    let tables = load_tables(cfg)?;
    let mut budget = Budget { allowed: cfg.input.error_budget, rejected: 0 };
    let mut events = Vec::new();
    stream_events(cfg, &mut budget, |chunk, _, _| {
        events.extend_from_slice(chunk);
        Ok(())
    })?;
    let levels = if levels.is_empty() { vec![cfg.grid.level] } else { levels.to_vec() };
    let intervals = if intervals.is_empty() { vec![cfg.grid.interval_s] } else { intervals.to_vec() };
    let reports = evaluate::sweep(&events, &truth, tables, &cfg.settings(), &levels, &intervals, EvalOptions::default())
        .map_err(from_engine)?;
    let summary = out.join("summary.csv");
    let mut w = BufWriter::new(File::create(&summary).map_err(io_err(&summary))?);
    writeln!(w, "{}", evaluate::REPORT_CSV_HEADER).map_err(io_err(&summary))?;
    for r in &reports {
        let dir = out.join(r.dir_name());
        evaluate::write_report(&dir, r).map_err(io_err(&dir))?;
        let body = std::fs::read_to_string(dir.join("report.csv")).map_err(io_err(&dir))?;
        for line in body.lines().skip(1) {
            writeln!(w, "{line}").map_err(io_err(&summary))?;
        }
    }
    w.flush().map_err(io_err(&summary))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = effective_config(&cli)?;
    match &cli.command {
        Command::Simulate { .. } => cmd_simulate(&cfg),
        Command::Correlate { limit, .. } => cmd_correlate(&cfg, *limit),
        Command::Query { target, limit, .. } => cmd_query(&cfg, target, *limit),
        Command::Evaluate { levels, intervals, .. } => cmd_evaluate(&cfg, levels, intervals),
        Command::Inspect { a, b, .. } => cmd_inspect(&cfg, a, b),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
