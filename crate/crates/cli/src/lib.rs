//! Command-line front end: `calib run | oracle | compare | plot-data`.
//!
//! A run directory holds `config.toml` (fully resolved), `history.csv`,
//! `state.json` and, once finished, `summary.json`. Interrupted runs resume
//! from the last completed record.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use calib_core::acquisition::AcquisitionKind;
use calib_core::calibration::{
    detect_convergence, grid_oracle_for, summarize_run, Calibrator, Checkpoint, History, RunSummary,
};
use calib_core::config::RunConfig;
use calib_core::engine::OraclePoint;
use calib_core::CalibError;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<CalibError> for CliError {
    fn from(e: CalibError) -> Self {
        match e {
            CalibError::Config(msg) => CliError::Config(msg),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("io error: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(format!("json error: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(format!("csv error: {e}"))
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "calib",
    version,
    about = "Constrained Bayesian calibration of a simulated engine"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the calibration loop for each (kind, seed) pair.
    Run(RunArgs),
    /// Grid-search the noise-free plant; cached by configuration hash.
    Oracle(OracleArgs),
    /// Per-kind medians over seeds for a directory of runs.
    Compare(CompareArgs),
    /// Tidy CSVs for plotting a finished run.
    PlotData(PlotArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML configuration file; every field has a default.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config field, e.g. `--set run.n_sample=30`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Acquisition kinds (EI, NEI, PI, NPI); defaults to `run.kind`.
    #[arg(long, value_delimiter = ',')]
    pub kind: Vec<String>,
    /// Seeds; defaults to `run.seed`.
    #[arg(long, value_delimiter = ',')]
    pub seed: Vec<u64>,
    /// Output directory; one subdirectory per run.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// Engine-time budget [s].
    #[arg(long)]
    pub budget: Option<f64>,
    #[arg(long)]
    pub n_sample: Option<usize>,
    /// Discard existing artifacts instead of resuming.
    #[arg(long)]
    pub fresh: bool,
    /// Skip the grid oracle; summaries then carry no deltas.
    #[arg(long)]
    pub no_oracle: bool,
    /// Runs executed concurrently.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value = "runs/oracle")]
    pub out: PathBuf,
    /// Grid points per axis.
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Directory containing run subdirectories.
    #[arg(long)]
    pub runs: PathBuf,
    /// Output CSV; defaults to `<runs>/compare.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Run directory containing `history.csv`.
    #[arg(long)]
    pub run: PathBuf,
    /// Output directory; defaults to `<run>/plot`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses arguments, dispatches, and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Run(a) => run_command(&a),
        Command::Oracle(a) => oracle_command(&a),
        Command::Compare(a) => compare_command(&a),
        Command::PlotData(a) => plot_data_command(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> CliResult<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| CliError::Config(format!("empty key in {key:?}")))?;
    let mut t = table;
    for p in parts {
        let entry = t
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("{key}: {p} is not a table")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Loads the config file, applies overrides in order and validates.
pub fn resolve_config(
    args: &ConfigArgs,
    overrides: &[(&str, toml::Value)],
) -> CliResult<RunConfig> {
    let text = match &args.config {
        Some(p) => {
            fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => String::new(),
    };
    let origin = args
        .config
        .as_ref()
        .map_or("<defaults>".to_string(), |p| p.display().to_string());
    // Syntax and type errors are reported against the original file.
    toml::from_str::<RunConfig>(&text).map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
    for s in &args.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        set_path(&mut table, k.trim(), parse_value(v.trim()))?;
    }
    for (k, v) in overrides {
        set_path(&mut table, k, v.clone())?;
    }
    let merged = toml::to_string(&table).map_err(|e| CliError::Config(e.to_string()))?;
    RunConfig::from_toml(&merged).map_err(|e| match e {
        CalibError::Config(msg) => CliError::Config(format!("{origin} with overrides: {msg}")),
        other => other.into(),
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Sections that determine the oracle.
#[derive(Serialize)]
struct OracleKey<'a> {
    geometry: &'a calib_core::config::GeometrySection,
    thermo: &'a calib_core::config::ThermoSection,
    constraints: &'a calib_core::config::ConstraintSection,
    actuators: &'a calib_core::engine::ActuatorBox,
    controller: &'a calib_core::engine::ControllerConfig,
    plant: &'a calib_core::engine::PlantParams,
    oracle: &'a calib_core::config::OracleSection,
}

pub fn oracle_hash(cfg: &RunConfig) -> CliResult<String> {
    let key = OracleKey {
        geometry: &cfg.geometry,
        thermo: &cfg.thermo,
        constraints: &cfg.constraints,
        actuators: &cfg.actuators,
        controller: &cfg.controller,
        plant: &cfg.plant,
        oracle: &cfg.oracle,
    };
    let text = toml::to_string(&key).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// Contents of `oracle.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleFile {
    pub config_hash: String,
    pub resolution: usize,
    pub best: OraclePoint,
}

/// Loads the cached oracle or computes and stores it. The flag is `true` on a cache hit.
pub fn cached_oracle(cfg: &RunConfig, dir: &Path) -> CliResult<(OracleFile, bool)> {
    let hash = oracle_hash(cfg)?;
    let (json, csv_path) = (dir.join("oracle.json"), dir.join("oracle.csv"));
    if let Ok(text) = fs::read_to_string(&json) {
        if let Ok(f) = serde_json::from_str::<OracleFile>(&text) {
            if f.config_hash == hash && csv_path.exists() {
                return Ok((f, true));
            }
        }
    }
    let res = grid_oracle_for(cfg)?;
    fs::create_dir_all(dir)?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record([
        "br",
        "soi_di",
        "q_fuel",
        "imep",
        "gie",
        "p_max",
        "dp_max",
        "converged",
        "feasible",
    ])?;
    for p in &res.points {
        w.write_record([
            p.br.to_string(),
            p.soi_di.to_string(),
            p.q_fuel.to_string(),
            p.imep.to_string(),
            p.gie.to_string(),
            p.p_max.to_string(),
            p.dp_max.to_string(),
            p.converged.to_string(),
            p.feasible.to_string(),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    write_atomic(&csv_path, &bytes)?;
    let file = OracleFile {
        config_hash: hash,
        resolution: res.resolution,
        best: res.best,
    };
    write_atomic(&json, serde_json::to_string_pretty(&file)?.as_bytes())?;
    Ok((file, false))
}

fn oracle_command(a: &OracleArgs) -> CliResult<()> {
    let mut ov = Vec::new();
    if let Some(r) = a.resolution {
        ov.push(("oracle.resolution", toml::Value::Integer(r as i64)));
    }
    let cfg = resolve_config(&a.config, &ov)?;
    let (f, cached) = cached_oracle(&cfg, &a.out)?;
    fs::write(a.out.join("config.toml"), cfg.to_toml()?)?;
    println!(
        "{} oracle ({}x{}): BR {} SOI_DI {} GIE {}",
        if cached { "cached" } else { "computed" },
        f.resolution,
        f.resolution,
        f.best.br,
        f.best.soi_di,
        f.best.gie
    );
    Ok(())
}

pub fn run_dir_name(kind: AcquisitionKind, seed: u64) -> String {
    format!("{}-seed{seed}", kind.as_str())
}

/// Equal apart from the stopping budgets, which may grow between resumes.
fn same_experiment(a: &RunConfig, b: &RunConfig) -> bool {
    let mut b = b.clone();
    b.run.max_iterations = a.run.max_iterations;
    b.run.engine_budget_s = a.run.engine_budget_s;
    *a == b
}

fn open_or_start(cfg: &RunConfig, dir: &Path, fresh: bool) -> CliResult<Calibrator> {
    let (hist_path, state_path, cfg_path) = (
        dir.join("history.csv"),
        dir.join("state.json"),
        dir.join("config.toml"),
    );
    let existing = hist_path.exists() && state_path.exists() && cfg_path.exists();
    if fresh || !existing {
        return Ok(Calibrator::new(cfg.clone())?);
    }
    let prev = RunConfig::from_toml(&fs::read_to_string(&cfg_path)?)?;
    if !same_experiment(cfg, &prev) {
        return Err(CliError::Config(format!(
            "{} holds a run with a different configuration; pass --fresh to replace it",
            dir.display()
        )));
    }
    let history = History::read_csv(fs::File::open(&hist_path)?)?;
    let state: Checkpoint = serde_json::from_str(&fs::read_to_string(&state_path)?)?;
    if state.records > history.len() {
        return Err(CliError::Runtime(format!(
            "{}: state is ahead of the history",
            dir.display()
        )));
    }
    // A row written after the last checkpoint is dropped and recomputed.
    let mut kept = History::new(history.n_pc());
    for r in &history.records()[..state.records] {
        kept.push(r.clone())?;
    }
    Ok(Calibrator::resume(cfg.clone(), kept, state)?)
}

/// Runs (or resumes) one calibration into `dir` and writes its summary.
pub fn run_one(
    cfg: &RunConfig,
    dir: &Path,
    oracle: Option<&OraclePoint>,
    fresh: bool,
) -> CliResult<RunSummary> {
    fs::create_dir_all(dir)?;
    let mut cal = open_or_start(cfg, dir, fresh)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let hist_path = dir.join("history.csv");
    let mut buf = Vec::new();
    cal.history().write_csv(&mut buf)?;
    write_atomic(&hist_path, &buf)?;
    write_atomic(
        &dir.join("state.json"),
        serde_json::to_string(&cal.checkpoint())?.as_bytes(),
    )?;
    while let Some(rec) = cal.step()? {
        let rec = rec.clone();
        let mut f = fs::OpenOptions::new().append(true).open(&hist_path)?;
        cal.history().write_row(&rec, &mut f)?;
        f.flush()?;
        write_atomic(
            &dir.join("state.json"),
            serde_json::to_string(&cal.checkpoint())?.as_bytes(),
        )?;
    }
    let summary = summarize_run(cfg, cal.setup(), cal.history(), oracle);
    write_atomic(
        &dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;
    Ok(summary)
}

fn parse_kind(s: &str) -> CliResult<AcquisitionKind> {
    s.parse()
        .map_err(|e: CalibError| CliError::Config(e.to_string()))
}

fn run_command(a: &RunArgs) -> CliResult<()> {
    let mut ov = Vec::new();
    if let Some(n) = a.max_iterations {
        ov.push(("run.max_iterations", toml::Value::Integer(n as i64)));
    }
    if let Some(b) = a.budget {
        ov.push(("run.engine_budget_s", toml::Value::Float(b)));
    }
    if let Some(n) = a.n_sample {
        ov.push(("run.n_sample", toml::Value::Integer(n as i64)));
    }
    let base = resolve_config(&a.config, &ov)?;
    let kinds = if a.kind.is_empty() {
        vec![base.run.kind]
    } else {
        a.kind
            .iter()
            .map(|k| parse_kind(k))
            .collect::<CliResult<Vec<_>>>()?
    };
    let seeds = if a.seed.is_empty() {
        vec![base.run.seed]
    } else {
        a.seed.clone()
    };
    let jobs: Vec<RunConfig> = kinds
        .iter()
        .flat_map(|&kind| {
            let base = &base;
            seeds.iter().map(move |&seed| {
                let mut c = base.clone();
                c.run.kind = kind;
                c.run.seed = seed;
                c
            })
        })
        .collect();
    fs::create_dir_all(&a.out)?;
    let oracle = if a.no_oracle {
        None
    } else {
        Some(cached_oracle(&base, &a.out.join("oracle"))?.0.best)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let results: Vec<CliResult<RunSummary>> = pool.install(|| {
        jobs.par_iter()
            .map(|c| {
                let dir = a.out.join(run_dir_name(c.run.kind, c.run.seed));
                let s = run_one(c, &dir, oracle.as_ref(), a.fresh)?;
                println!("{}", describe(&s));
                Ok(s)
            })
            .collect()
    });
    results.into_iter().try_for_each(|r| r.map(|_| ()))
}

fn describe(s: &RunSummary) -> String {
    let best = s
        .best
        .as_ref()
        .map_or("no feasible point".to_string(), |b| {
            format!(
                "best GIE {:.5} at BR {:.4} SOI_DI {:.2}",
                b.gie_true, b.br, b.soi_di
            )
        });
    let gap = s
        .delta_gie
        .map_or(String::new(), |d| format!(", gap {:.4} pp", d * 100.0));
    let conv = s
        .convergence_time_s
        .map_or("not converged".to_string(), |t| {
            format!("converged at {t:.1} s")
        });
    format!(
        "{} seed {}: {} iterations, {:.1} s, {best}{gap}, {conv}",
        s.kind.as_str(),
        s.seed,
        s.iterations,
        s.engine_time_s
    )
}

/// Median of finite-or-infinite values; `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct KindRow {
    pub kind: AcquisitionKind,
    pub seeds: usize,
    pub delta_br: Option<f64>,
    pub delta_soi_di: Option<f64>,
    pub delta_j_itc: Option<f64>,
    pub delta_gie: Option<f64>,
    /// Runs that never settle count as infinitely slow.
    pub convergence_s: Option<f64>,
    pub converged_runs: usize,
    pub truth_pressure_violations: usize,
    pub cov_violations: usize,
    pub applied: usize,
}

struct RunFiles {
    summary: RunSummary,
    convergence: Option<f64>,
}

fn load_run(dir: &Path) -> CliResult<Option<RunFiles>> {
    let (s, h, c) = (
        dir.join("summary.json"),
        dir.join("history.csv"),
        dir.join("config.toml"),
    );
    if !(s.exists() && h.exists() && c.exists()) {
        return Ok(None);
    }
    let summary: RunSummary = serde_json::from_str(&fs::read_to_string(s)?)?;
    let cfg = RunConfig::from_toml(&fs::read_to_string(c)?)?;
    let history = History::read_csv(fs::File::open(h)?)?;
    Ok(Some(RunFiles {
        summary,
        convergence: detect_convergence(&history, cfg.run.convergence_tol),
    }))
}

/// Aggregates every run directory below `runs`, recomputing convergence
/// times from the history CSVs.
pub fn compare_runs(runs: &Path) -> CliResult<Vec<KindRow>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(runs)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut loaded = Vec::new();
    for d in dirs {
        if let Some(r) = load_run(&d)? {
            loaded.push(r);
        }
    }
    if loaded.is_empty() {
        return Err(CliError::Runtime(format!(
            "no finished runs under {}",
            runs.display()
        )));
    }
    let mut rows = Vec::new();
    for kind in AcquisitionKind::ALL {
        let group: Vec<&RunFiles> = loaded.iter().filter(|r| r.summary.kind == kind).collect();
        if group.is_empty() {
            continue;
        }
        let col = |f: fn(&RunSummary) -> Option<f64>| {
            median(
                &group
                    .iter()
                    .filter_map(|r| f(&r.summary))
                    .collect::<Vec<_>>(),
            )
        };
        rows.push(KindRow {
            kind,
            seeds: group.len(),
            delta_br: col(|s| s.delta_br),
            delta_soi_di: col(|s| s.delta_soi_di),
            delta_j_itc: col(|s| s.delta_j_itc),
            delta_gie: col(|s| s.delta_gie),
            convergence_s: median(
                &group
                    .iter()
                    .map(|r| r.convergence.unwrap_or(f64::INFINITY))
                    .collect::<Vec<_>>(),
            ),
            converged_runs: group.iter().filter(|r| r.convergence.is_some()).count(),
            truth_pressure_violations: group
                .iter()
                .map(|r| r.summary.truth_pressure_violations)
                .sum(),
            cov_violations: group.iter().map(|r| r.summary.cov_violations).sum(),
            applied: group.iter().map(|r| r.summary.applied).sum(),
        });
    }
    Ok(rows)
}

pub const COMPARE_HEADER: [&str; 11] = [
    "kind",
    "seeds",
    "median_delta_br",
    "median_delta_soi_di",
    "median_delta_j_itc",
    "median_delta_gie",
    "median_convergence_s",
    "converged_runs",
    "truth_pressure_violations",
    "cov_violations",
    "applied",
];

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn compare_command(a: &CompareArgs) -> CliResult<()> {
    let rows = compare_runs(&a.runs)?;
    let out = a.out.clone().unwrap_or_else(|| a.runs.join("compare.csv"));
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&out)?;
    w.write_record(COMPARE_HEADER)?;
    println!(
        "{:<4} {:>5} {:>10} {:>10} {:>12} {:>10} {:>10} {:>6}",
        "kind", "seeds", "dBR", "dSOI", "dJ", "dGIE[pp]", "conv[s]", "viol"
    );
    for r in &rows {
        w.write_record([
            r.kind.as_str().to_string(),
            r.seeds.to_string(),
            opt_cell(r.delta_br),
            opt_cell(r.delta_soi_di),
            opt_cell(r.delta_j_itc),
            opt_cell(r.delta_gie),
            opt_cell(r.convergence_s),
            r.converged_runs.to_string(),
            r.truth_pressure_violations.to_string(),
            r.cov_violations.to_string(),
            r.applied.to_string(),
        ])?;
        let f =
            |v: Option<f64>, scale: f64| v.map_or("-".to_string(), |x| format!("{:.4}", x * scale));
        println!(
            "{:<4} {:>5} {:>10} {:>10} {:>12} {:>10} {:>10} {:>6}",
            r.kind.as_str(),
            r.seeds,
            f(r.delta_br, 1.0),
            f(r.delta_soi_di, 1.0),
            r.delta_j_itc
                .map_or("-".to_string(), |x| format!("{x:.3e}")),
            f(r.delta_gie, 100.0),
            r.convergence_s
                .map_or("-".to_string(), |x| format!("{x:.1}")),
            r.truth_pressure_violations + r.cov_violations
        );
    }
    w.flush()?;
    Ok(())
}

/// Writes `best.csv`, `observed.csv` and `actuators.csv`, one row per record.
pub fn write_plot_data(history: &History, out: &Path) -> CliResult<()> {
    fs::create_dir_all(out)?;
    let writer = |name: &str| {
        csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(out.join(name))
    };
    let recs = history.records();

    let mut w = writer("best.csv")?;
    w.write_record(["iteration", "engine_time", "best_j_itc", "best_gie"])?;
    for ((r, j), g) in recs
        .iter()
        .zip(history.best_cost_trace())
        .zip(history.best_gie_trace())
    {
        w.write_record([
            r.iteration.to_string(),
            r.engine_time.to_string(),
            opt_cell(j),
            opt_cell(g),
        ])?;
    }
    w.flush()?;

    let mut w = writer("observed.csv")?;
    w.write_record([
        "iteration",
        "engine_time",
        "j_itc",
        "gie",
        "imep",
        "cov",
        "p_max",
        "dp_max",
        "feasible",
    ])?;
    for r in recs {
        w.write_record([
            r.iteration.to_string(),
            r.engine_time.to_string(),
            r.j_itc.to_string(),
            r.gie.to_string(),
            r.imep.to_string(),
            r.cov.to_string(),
            r.p_max.to_string(),
            r.dp_max.to_string(),
            r.feasible.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = writer("actuators.csv")?;
    w.write_record(["iteration", "engine_time", "br", "soi_di", "q_fuel"])?;
    for r in recs {
        w.write_record([
            r.iteration.to_string(),
            r.engine_time.to_string(),
            r.br.to_string(),
            r.soi_di.to_string(),
            r.q_fuel.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn plot_data_command(a: &PlotArgs) -> CliResult<()> {
    let path = a.run.join("history.csv");
    let file =
        fs::File::open(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let history = History::read_csv(file)?;
    let out = a.out.clone().unwrap_or_else(|| a.run.join("plot"));
    write_plot_data(&history, &out)?;
    println!(
        "wrote plot data for {} records to {}",
        history.len(),
        out.display()
    );
    Ok(())
}
