//! Config-driven experiment runner for the opincl toolkit.
//!
//! A run reads one JSON config, resolves every default, executes the named
//! command, and writes a JSON report plus CSV artifacts named after a hash
//! of the resolved config.

pub mod builtins;
mod commands;
pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use config::{Command, RawConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Unreadable or schema-invalid config; exit status 1.
    #[error("input error: {0}")]
    Input(String),
    /// A numerical precondition, convergence or evaluation failure inside a
    /// named check; exit status 2.
    #[error("check {check} failed: {message}")]
    Numerical { check: String, message: String },
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical { .. } => 2,
            CliError::Input(_) | CliError::Io(_) => 1,
        }
    }
}

/// Maps a library error raised while running `check`: malformed inputs are
/// input errors, everything else is a numerical failure of that check.
pub(crate) fn at(check: &str) -> impl Fn(opincl::Error) -> CliError + '_ {
    move |e| match e {
        opincl::Error::Input(_) | opincl::Error::DimensionMismatch { .. } | opincl::Error::Unsupported(_) => {
            CliError::Input(format!("{check}: {e}"))
        }
        _ => CliError::Numerical { check: check.to_string(), message: e.to_string() },
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub strict: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub id: String,
    pub passed: bool,
    pub observed: f64,
    pub bound: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ReportError {
    pub check: String,
    pub message: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub command: String,
    pub seed: u64,
    /// Fully resolved config, defaults included.
    pub config: Value,
    pub config_hash: String,
    pub checks: Vec<CheckResult>,
    pub warnings: Vec<String>,
    pub summary: Value,
    pub artifacts: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ReportError>,
    pub passed: bool,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub report_path: PathBuf,
    pub exit_code: i32,
}

impl RunOutcome {
    pub fn failed_checks(&self) -> Vec<&CheckResult> {
        self.report.checks.iter().filter(|c| !c.passed).collect()
    }
}

/// Streams of the run's generator, one per consumer.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Stream {
    Growth = 1,
    Directions = 2,
    Estimator = 3,
    Polytopes = 4,
    Instances = 5,
    Probes = 6,
}

pub(crate) struct Ctx {
    seed: u64,
    stem: String,
    dir: PathBuf,
    csv: bool,
    pub checks: Vec<CheckResult>,
    pub warnings: Vec<String>,
    pub artifacts: Vec<String>,
    pub summary: Map<String, Value>,
}

impl Ctx {
    pub fn rng(&self, stream: Stream) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(stream as u64);
        r
    }

    pub fn sub_seed(&self, stream: Stream) -> u64 {
        self.rng(stream).next_u64()
    }

    /// Records `observed <= bound`.
    pub fn check_le(&mut self, id: &str, observed: f64, bound: f64) -> bool {
        self.check(id, observed <= bound, observed, bound, None)
    }

    pub fn check(&mut self, id: &str, passed: bool, observed: f64, bound: f64, detail: Option<String>) -> bool {
        self.checks.push(CheckResult { id: id.to_string(), passed, observed, bound, detail });
        passed
    }

    pub fn summary(&mut self, key: &str, value: impl Serialize) {
        self.summary.insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
    }

    /// Writes `{stem}-{name}.csv`; the same rows always give the same bytes.
    pub fn write_csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        if !self.csv {
            return Ok(());
        }
        let file = format!("{}-{name}.csv", self.stem);
        let path = self.dir.join(&file);
        let io = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(&path).map_err(io)?;
        w.write_record(header).map_err(io)?;
        for r in rows {
            w.write_record(r).map_err(io)?;
        }
        w.flush().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.artifacts.push(file);
        Ok(())
    }

    pub fn write_grid_csv(
        &mut self,
        name: &str,
        grid: &opincl::Grid,
        columns: &[(&[&str], &opincl::GridFunction)],
    ) -> Result<(), CliError> {
        if !self.csv {
            return Ok(());
        }
        let file = format!("{}-{name}.csv", self.stem);
        let path = self.dir.join(&file);
        let out = fs::File::create(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let names: Vec<String> = (0..grid.axes()).map(|a| if grid.axes() == 1 { "t".into() } else { format!("t{a}") }).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        opincl::gridfn::write_columns_csv(std::io::BufWriter::new(out), grid, &names, columns)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.artifacts.push(file);
        Ok(())
    }
}

pub(crate) fn fmt(v: f64) -> String {
    v.to_string()
}

pub fn list_builtins() -> String {
    builtins::catalog()
}

/// Reads and runs a config file.
pub fn run(config_path: &Path, opts: &RunOptions) -> Result<RunOutcome, CliError> {
    let text = fs::read_to_string(config_path).map_err(|e| CliError::Input(format!("{}: {e}", config_path.display())))?;
    run_str(&text, opts)
}

/// Runs a config given as JSON text. Input errors are returned; numerical
/// failures produce a report with exit status 2.
pub fn run_str(text: &str, opts: &RunOptions) -> Result<RunOutcome, CliError> {
    let raw_value: Value = serde_json::from_str(text).map_err(|e| CliError::Input(format!("config is not valid JSON: {e}")))?;
    let raw: RawConfig = config::parse_block("config", &raw_value)?;
    let seed = opts.seed.unwrap_or(raw.seed);
    let resolved = commands::resolve(&raw)?;

    let mut config = Map::new();
    config.insert("command".into(), Value::String(raw.command.name().into()));
    config.insert("seed".into(), Value::from(seed));
    for (k, v) in resolved.blocks() {
        config.insert(k.into(), v);
    }
    // the output block does not change results, so it stays out of the hash
    let hash = hex::encode(Sha256::digest(serde_json::to_vec(&config).expect("json")));
    let hash = hash[..12].to_string();
    config.insert("output".into(), serde_json::to_value(&raw.output).expect("json"));

    let dir = opts.out_dir.clone().unwrap_or_else(|| PathBuf::from(&raw.output.dir));
    fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let stem = format!("{}-{hash}", raw.command.name());
    let mut ctx = Ctx {
        seed,
        stem: stem.clone(),
        dir: dir.clone(),
        csv: raw.output.csv,
        checks: Vec::new(),
        warnings: Vec::new(),
        artifacts: Vec::new(),
        summary: Map::new(),
    };

    let start = Instant::now();
    let outcome = commands::execute(&resolved, &mut ctx);
    let wall = start.elapsed().as_secs_f64();
    let error = match outcome {
        Ok(()) => None,
        Err(CliError::Numerical { check, message }) => Some(ReportError { check, message }),
        Err(e) => return Err(e),
    };
    let checks_ok = ctx.checks.iter().all(|c| c.passed);
    let passed = error.is_none() && checks_ok && !(opts.strict && !ctx.warnings.is_empty());
    let report = RunReport {
        command: raw.command.name().into(),
        seed,
        config: Value::Object(config),
        config_hash: hash,
        checks: ctx.checks,
        warnings: ctx.warnings,
        summary: Value::Object(ctx.summary),
        artifacts: ctx.artifacts,
        error,
        passed,
        wall_time_s: wall,
    };
    let report_path = write_report(&dir, &stem, &report)?;
    Ok(RunOutcome { report, report_path, exit_code: if passed { 0 } else { 2 } })
}

/// Reports are never overwritten: a rerun lands in `{stem}.1.json`, `{stem}.2.json`, ...
fn write_report(dir: &Path, stem: &str, report: &RunReport) -> Result<PathBuf, CliError> {
    let body = serde_json::to_string_pretty(report).expect("json");
    for n in 0.. {
        let name = if n == 0 { format!("{stem}.json") } else { format!("{stem}.{n}.json") };
        let path = dir.join(name);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                f.write_all(body.as_bytes()).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
                return Ok(path);
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(CliError::Io(format!("{}: {e}", path.display()))),
        }
    }
    unreachable!()
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::SolveInclusion,
        Command::Perturb,
        Command::Penalty,
        Command::Certify,
        Command::SecondOrder,
        Command::GradCheck,
        Command::Dist2Check,
    ];
}
