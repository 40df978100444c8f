//! Command-line front end: `train`, `eval`, `verify`, `sweep`, `latency`.
//!
//! Configuration is a flat TOML file whose keys are [`TrainConfig`]
//! fields; `--override key=value` edits single keys after loading. A run
//! manifest can be passed back as `--config` to repeat the run.

use crate::channel::{latency_ms, max_dim_for_latency, SymbolModel};
use crate::data::{load_mnist, Dataset, Split};
use crate::error::{Error, Result};
use crate::ibloss::KlVariant;
use crate::model::Model;
use crate::numerics::Rng;
use crate::sweep::{self, Axis, DEFAULT_LATENCY_CAP_MS};
use crate::train::{evaluate, fit_with, EpochRecord, TrainConfig};
use crate::verify::{certify_parallel, edge_corpus, random_case, CertReport};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

/// Version tag of every file layout written here.
pub const SCHEMA_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TIMING_FILE: &str = "timing.json";

pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const DATA: i32 = 4;
    pub const DIVERGENCE: i32 = 5;
    pub const VERIFY: i32 = 6;
}

#[derive(Debug, Parser)]
#[command(name = "qmlib", version, about = "Quantized multi-link information bottleneck experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write a run directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Re-evaluate a finished run, optionally under different channel settings.
    Eval {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        /// Noise trials (defaults to the run's `eval_trials`).
        #[arg(long)]
        trials: Option<usize>,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Certify the KL upper bound and its gap bound numerically.
    Verify {
        /// Random configurations on top of the fixed edge-case corpus.
        #[arg(long)]
        n_random: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a grid of configurations along one axis.
    Sweep {
        /// latency | devices | psnr | bits | overlap | beta
        #[arg(long)]
        axis: Axis,
        /// Comma-separated grid values (defaults depend on the axis).
        #[arg(long, value_delimiter = ',')]
        grid: Vec<String>,
        /// Seeds per cell, starting at the configured seed.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Per-device latency cap for the devices axis.
        #[arg(long, default_value_t = DEFAULT_LATENCY_CAP_MS)]
        latency_cap_ms: f64,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Print transmission latency for a configuration as CSV.
    Latency {
        /// Feature dimensions to tabulate (defaults to the configured one).
        #[arg(long, value_delimiter = ',')]
        dims: Vec<usize>,
        /// Also report the largest dimension within this per-device cap.
        #[arg(long)]
        cap_ms: Option<f64>,
        #[arg(long, value_enum, default_value = "per-value")]
        symbols: SymbolArg,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum SymbolArg {
    PerValue,
    PerBit,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Flat TOML configuration (or a run manifest).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value`, applied after the config file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for sweeps and certification.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Directory holding the four MNIST IDX files.
    #[arg(long, env = "QMLIB_MNIST_DIR", default_value = "data/mnist")]
    pub data: PathBuf,
}

/// Error wrapper carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => exit::CONFIG,
        Error::Io { .. }
        | Error::BadMagic { .. }
        | Error::Truncated { .. }
        | Error::CountMismatch { .. }
        | Error::LabelRange { .. } => exit::DATA,
        Error::Divergence { .. } => exit::DIVERGENCE,
        _ => exit::FAILURE,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::new(exit_code(&e), e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

// ---- configuration -------------------------------------------------------

/// Reads a config file. A run manifest contributes its `config` table.
pub fn load_table(path: Option<&Path>) -> Result<toml::Table> {
    let Some(path) = path else {
        return Ok(toml::Table::new());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    match table.remove("config") {
        Some(toml::Value::Table(inner)) => Ok(inner),
        Some(_) => Err(Error::Config(format!("{}: 'config' is not a table", path.display()))),
        None => Ok(table),
    }
}

fn canonical_key(key: &str) -> &str {
    match key {
        "psnr" => "psnr_db",
        "lr" => "learning_rate",
        "d" => "feature_dim",
        "k" | "K" => "devices",
        "t" | "T" => "breakpoints",
        other => other,
    }
}

/// Splits `key=value` and parses the value as a TOML literal, falling back
/// to a bare string.
pub fn parse_override(raw: &str) -> Result<(String, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{raw}' is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override '{raw}' has an empty key")));
    }
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((canonical_key(key).to_string(), parsed))
}

pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for raw in overrides {
        let (key, value) = parse_override(raw)?;
        table.insert(key, value);
    }
    Ok(())
}

/// Typed, validated training config from file + overrides + `--seed`.
pub fn train_config(common: &Common) -> Result<TrainConfig> {
    let mut table = load_table(common.config.as_deref())?;
    apply_overrides(&mut table, &common.overrides)?;
    if let Some(seed) = common.seed {
        table.insert("seed".into(), toml::Value::Integer(seed as i64));
    }
    let config: TrainConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Settings of the `verify` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub n_random: usize,
    /// Replaces the channel variance of every case when set.
    pub sigma2: Option<f64>,
    pub variants: Vec<KlVariant>,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            n_random: 1000,
            sigma2: None,
            variants: vec![KlVariant::Tight, KlVariant::Literal],
            seed: 0,
        }
    }
}

fn verify_config(common: &Common, n_random: Option<usize>) -> CliResult<VerifyConfig> {
    let mut table = load_table(common.config.as_deref())?;
    apply_overrides(&mut table, &common.overrides)?;
    let mut cfg: VerifyConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Failure::from(Error::Config(e.message().to_string())))?;
    if let Some(n) = n_random {
        cfg.n_random = n;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if cfg.n_random == 0 {
        return Err(Failure::new(exit::USAGE, "n_random must be at least 1"));
    }
    if let Some(s2) = cfg.sigma2 {
        if !(s2 > 0.0 && s2.is_finite()) {
            return Err(Error::Config(format!("sigma2 must be positive (got {s2})")).into());
        }
    }
    if cfg.variants.is_empty() {
        return Err(Error::Config("at least one KL variant is required".into()).into());
    }
    Ok(cfg)
}

/// Edge corpus followed by `n_random` seeded random cases.
pub fn verify_cases(cfg: &VerifyConfig) -> Vec<crate::verify::CertCase> {
    let mut rng = Rng::new(cfg.seed);
    let mut cases = edge_corpus();
    cases.extend((0..cfg.n_random).map(|i| random_case(&mut rng, format!("random-{i}"))));
    if let Some(s2) = cfg.sigma2 {
        cases = cases.into_iter().map(|c| c.with_sigma2(s2)).collect();
    }
    cases
}

// ---- run directories -----------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Incomplete,
    Complete,
}

/// `manifest.toml` of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub status: RunStatus,
    pub command: String,
    pub version: String,
    pub schema: u32,
    pub seed: u64,
    pub output_dir: String,
    pub data_dir: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub overrides: Vec<String>,
    /// Channel variance per link, derived from the PSNR settings.
    pub sigma2: Vec<f64>,
    pub latency_ms: f64,
    pub final_error: Option<f64>,
    pub error: Option<String>,
    pub config: TrainConfig,
}

/// `manifest.toml` of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub status: RunStatus,
    pub command: String,
    pub version: String,
    pub schema: u32,
    pub axis: Axis,
    pub grid: Vec<String>,
    pub seeds: Vec<u64>,
    pub latency_cap_ms: f64,
    pub output_dir: String,
    pub data_dir: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub overrides: Vec<String>,
    pub failed_runs: usize,
    pub config: TrainConfig,
}

fn version_tag() -> String {
    format!("qmlib {}", env!("CARGO_PKG_VERSION"))
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::InvalidArgument(format!("toml: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_datasets(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((load_mnist(dir, Split::Train)?, load_mnist(dir, Split::Test)?))
}

fn summary_header(devices: usize) -> Vec<String> {
    let mut h: Vec<String> = ["epoch", "total_loss", "ce_term"].iter().map(|s| s.to_string()).collect();
    h.extend((1..=devices).map(|k| format!("kl_term_{k}")));
    h.extend(["test_error".to_string(), "latency_ms".to_string()]);
    h
}

fn summary_row(r: &EpochRecord) -> Vec<String> {
    let mut row = vec![
        r.epoch.to_string(),
        r.train.total.to_string(),
        r.train.ce_term.to_string(),
    ];
    row.extend(r.train.kl_terms.iter().map(|k| k.to_string()));
    row.extend([r.test_error.to_string(), r.latency_ms.to_string()]);
    row
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}

/// Writers for the per-epoch outputs of a run.
struct EpochSink {
    metrics: BufWriter<File>,
    summary: csv::Writer<File>,
    metrics_path: PathBuf,
}

impl EpochSink {
    fn create(dir: &Path, devices: usize) -> Result<Self> {
        let metrics_path = dir.join(METRICS_FILE);
        let metrics = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        let mut summary = csv::Writer::from_path(dir.join(SUMMARY_FILE)).map_err(csv_err)?;
        summary.write_record(summary_header(devices)).map_err(csv_err)?;
        summary.flush().map_err(|e| Error::io(dir.join(SUMMARY_FILE), e))?;
        Ok(Self {
            metrics: BufWriter::new(metrics),
            summary,
            metrics_path,
        })
    }

    fn record(&mut self, r: &EpochRecord) -> Result<()> {
        let line = serde_json::to_string(r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let io = |e| Error::io(&self.metrics_path, e);
        writeln!(self.metrics, "{line}").map_err(io)?;
        self.metrics.flush().map_err(|e| Error::io(&self.metrics_path, e))?;
        self.summary.write_record(summary_row(r)).map_err(csv_err)?;
        self.summary.flush().map_err(|e| Error::io(&self.metrics_path, e))
    }
}

/// Trains per `config` into `out`. The manifest is written first as
/// incomplete and rewritten as complete once the checkpoint exists.
pub fn run_train(config: &TrainConfig, overrides: &[String], data_dir: &Path, out: &Path) -> Result<RunManifest> {
    let (train, test) = load_datasets(data_dir)?;
    create_dir(out)?;
    let mut manifest = RunManifest {
        status: RunStatus::Incomplete,
        command: "train".into(),
        version: version_tag(),
        schema: SCHEMA_VERSION,
        seed: config.seed,
        output_dir: out.display().to_string(),
        data_dir: data_dir.display().to_string(),
        started_unix: now_unix(),
        finished_unix: None,
        overrides: overrides.to_vec(),
        sigma2: config.channels()?.iter().map(|c| c.sigma2()).collect(),
        latency_ms: config.latency_ms()?,
        final_error: None,
        error: None,
        config: config.clone(),
    };
    let manifest_path = out.join(MANIFEST_FILE);
    write_toml(&manifest_path, &manifest)?;

    let mut sink = EpochSink::create(out, config.devices)?;
    let result = fit_with(config, &train, &test, |record, _| sink.record(record));
    let (model, report) = match result {
        Ok(r) => r,
        Err(e) => {
            manifest.error = Some(e.to_string());
            manifest.finished_unix = Some(now_unix());
            write_toml(&manifest_path, &manifest)?;
            return Err(e);
        }
    };
    model.save(&out.join(CHECKPOINT_FILE))?;
    let timing = serde_json::json!({ "epoch_wall_clock_s": report.wall_clock_s });
    fs::write(out.join(TIMING_FILE), timing.to_string()).map_err(|e| Error::io(out.join(TIMING_FILE), e))?;

    manifest.status = RunStatus::Complete;
    manifest.final_error = Some(report.final_error.mean);
    manifest.finished_unix = Some(now_unix());
    write_toml(&manifest_path, &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub run: String,
    pub psnr_db: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub trials: usize,
    pub mean: f64,
    pub std: f64,
    pub per_trial: Vec<f64>,
}

fn cmd_eval(run: &Path, trials: Option<usize>, common: &Common, data: &DataArgs) -> CliResult<()> {
    let manifest = read_manifest(run)?;
    if manifest.status != RunStatus::Complete {
        return Err(Failure::new(exit::FAILURE, format!("{} is an incomplete run", run.display())));
    }
    let mut table = toml::Value::try_from(&manifest.config)
        .ok()
        .and_then(|v| v.as_table().cloned())
        .ok_or_else(|| Failure::new(exit::FAILURE, "manifest config is not a table"))?;
    apply_overrides(&mut table, &common.overrides)?;
    if let Some(seed) = common.seed {
        table.insert("seed".into(), toml::Value::Integer(seed as i64));
    }
    let config: TrainConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Failure::from(Error::Config(e.message().to_string())))?;
    config.validate()?;
    let model = Model::load(&run.join(CHECKPOINT_FILE))?;
    let test = load_mnist(&data.data, Split::Test)?;
    let trials = trials.unwrap_or(config.eval_trials);
    let result = evaluate(&model, &config, &test, trials)?;
    let channels = config.channels()?;
    let report = EvalReport {
        run: run.display().to_string(),
        psnr_db: config.link_psnr(),
        sigma2: channels.iter().map(|c| c.sigma2()).collect(),
        trials,
        mean: result.mean,
        std: result.std,
        per_trial: result.per_trial,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{json}");
    if let Some(out) = &common.out {
        create_dir(out)?;
        fs::write(out.join("eval.json"), json).map_err(|e| Error::io(out.join("eval.json"), e))?;
    }
    Ok(())
}

fn cmd_verify(common: &Common, n_random: Option<usize>) -> CliResult<CertReport> {
    let cfg = verify_config(common, n_random)?;
    let cases = verify_cases(&cfg);
    let report = certify_parallel(&cases, &cfg.variants, common.jobs);
    let json = serde_json::json!({ "settings": cfg, "report": report });
    let text = serde_json::to_string_pretty(&json).expect("report serializes");
    match &common.out {
        Some(out) => {
            create_dir(out)?;
            fs::write(out.join("verify.json"), &text).map_err(|e| Error::io(out.join("verify.json"), e))?;
        }
        None => println!("{text}"),
    }
    eprintln!(
        "verify: {} cases, {} failures, {} out-of-domain gap checks, worst upper margin {:e}, worst gap slack {:e}",
        report.cases, report.failures, report.out_of_domain, report.worst_upper_margin, report.worst_gap_slack
    );
    if !report.passed {
        return Err(Failure::new(exit::VERIFY, format!("{} certification cases failed", report.failures)));
    }
    Ok(report)
}

/// Runs a sweep into `out`: manifest, per-run JSONL and one CSV row per cell.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    axis: Axis,
    grid: &[String],
    seeds: usize,
    latency_cap_ms: f64,
    base: &TrainConfig,
    overrides: &[String],
    data_dir: &Path,
    out: &Path,
    jobs: usize,
) -> Result<Vec<sweep::CellSummary>> {
    if seeds == 0 {
        return Err(Error::Config("at least one seed per cell is required".into()));
    }
    let grid = if grid.is_empty() { axis.default_grid() } else { grid.to_vec() };
    let cells = sweep::expand(axis, &grid, base, latency_cap_ms)?;
    let (train, test) = load_datasets(data_dir)?;
    create_dir(out)?;
    let seed_list = sweep::seed_list(base.seed, seeds);
    let mut manifest = SweepManifest {
        status: RunStatus::Incomplete,
        command: "sweep".into(),
        version: version_tag(),
        schema: SCHEMA_VERSION,
        axis,
        grid: grid.clone(),
        seeds: seed_list.clone(),
        latency_cap_ms,
        output_dir: out.display().to_string(),
        data_dir: data_dir.display().to_string(),
        started_unix: now_unix(),
        finished_unix: None,
        overrides: overrides.to_vec(),
        failed_runs: 0,
        config: base.clone(),
    };
    let manifest_path = out.join(MANIFEST_FILE);
    write_toml(&manifest_path, &manifest)?;

    let started = std::time::Instant::now();
    let runs = sweep::run_cells(&cells, &seed_list, &train, &test, jobs);
    let rows = sweep::summarize(&cells, seeds, &runs)?;

    let runs_path = out.join("runs.jsonl");
    let mut w = BufWriter::new(File::create(&runs_path).map_err(|e| Error::io(&runs_path, e))?);
    for r in &runs {
        let line = serde_json::to_string(r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(&runs_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&runs_path, e))?;
    let csv_path = out.join("sweep.csv");
    sweep::write_csv(File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?, &rows)?;
    let timing = serde_json::json!({ "wall_clock_s": started.elapsed().as_secs_f64() });
    fs::write(out.join(TIMING_FILE), timing.to_string()).map_err(|e| Error::io(out.join(TIMING_FILE), e))?;

    manifest.status = RunStatus::Complete;
    manifest.failed_runs = runs.iter().filter(|r| r.failure.is_some()).count();
    manifest.finished_unix = Some(now_unix());
    write_toml(&manifest_path, &manifest)?;
    Ok(rows)
}

fn cmd_latency(dims: &[usize], cap_ms: Option<f64>, symbols: SymbolArg, common: &Common) -> CliResult<()> {
    let config = train_config(common)?;
    let channel = config.channels()?[0];
    let model = match symbols {
        SymbolArg::PerValue => SymbolModel::PerValue,
        SymbolArg::PerBit => SymbolModel::PerBit,
    };
    let dims = if dims.is_empty() { vec![config.feature_dim] } else { dims.to_vec() };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "devices",
        "feature_dim",
        "breakpoints",
        "bits_per_value",
        "symbols_per_device",
        "symbol_rate",
        "parallel_links",
        "per_device_ms",
        "system_ms",
    ])
    .map_err(|e| Failure::from(csv_err(e)))?;
    for d in dims {
        let l = latency_ms(d, config.breakpoints, config.devices, &channel, config.parallel_links, model)?;
        w.write_record([
            config.devices.to_string(),
            d.to_string(),
            config.breakpoints.to_string(),
            l.bits_per_value.to_string(),
            l.symbols_per_device.to_string(),
            channel.symbol_rate.to_string(),
            config.parallel_links.to_string(),
            l.per_device_ms.to_string(),
            l.system_ms.to_string(),
        ])
        .map_err(|e| Failure::from(csv_err(e)))?;
    }
    let text = String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8");
    print!("{text}");
    if let Some(cap) = cap_ms {
        eprintln!("largest feature dimension within {cap} ms per device: {}", max_dim_for_latency(cap, &channel));
    }
    if let Some(out) = &common.out {
        create_dir(out)?;
        fs::write(out.join("latency.csv"), text).map_err(|e| Error::io(out.join("latency.csv"), e))?;
    }
    Ok(())
}

fn default_out(command: &str) -> PathBuf {
    PathBuf::from("runs").join(command)
}

pub fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { common, data } => {
            let config = train_config(&common)?;
            let out = common.out.clone().unwrap_or_else(|| default_out("train"));
            let manifest = run_train(&config, &common.overrides, &data.data, &out)?;
            println!(
                "{}: final test error {:.4}",
                out.display(),
                manifest.final_error.unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::Eval {
            run,
            trials,
            common,
            data,
        } => cmd_eval(&run, trials, &common, &data),
        Command::Verify { n_random, common } => cmd_verify(&common, n_random).map(|_| ()),
        Command::Sweep {
            axis,
            grid,
            seeds,
            latency_cap_ms,
            common,
            data,
        } => {
            let base = train_config(&common)?;
            let out = common.out.clone().unwrap_or_else(|| default_out("sweep"));
            let rows = run_sweep(
                axis,
                &grid,
                seeds,
                latency_cap_ms,
                &base,
                &common.overrides,
                &data.data,
                &out,
                common.jobs,
            )?;
            for r in &rows {
                println!(
                    "{}={}: error {} ± {} ({} of {} seeds)",
                    r.axis,
                    r.value,
                    r.error_mean.map_or("-".into(), |e| format!("{e:.4}")),
                    r.error_std.map_or("-".into(), |e| format!("{e:.4}")),
                    r.completed,
                    r.seeds
                );
            }
            Ok(())
        }
        Command::Latency {
            dims,
            cap_ms,
            symbols,
            common,
        } => cmd_latency(&dims, cap_ms, symbols, &common),
    }
}

/// Parses `std::env::args`, runs the command, and returns the exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    crate::runtime::tune_allocator();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => exit::OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
