//! Command-line front end.
//!
//! Exit codes: 0 success, 1 internal error, 2 input or usage error,
//! 3 trade-off shape check failed.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use crate::fmt_f64;
use crate::ingest::{self, IngestError};
use crate::metrics::KernelConfig;
use crate::plot;
use crate::selection::{
    self, group_into_runs, AuditRow, CheckpointKey, SelectionConfig, DEFAULT_ALPHA, DEFAULT_BETA,
    DEFAULT_PCT_HIGH, DEFAULT_PCT_LOW,
};
use crate::synth::{self, SynthError, SyntheticConfig, TrainConfig};
use crate::tradeoff::{self, DiscreteDGProblem, TradeoffError};

const DEFAULT_GAMMAS_ARG: &str = "0.001,0.01,0.1,1,10,100,1000";

pub const EXIT_OK: u8 = 0;
pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_PROPERTY: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "dgselect",
    version,
    about = "Checkpoint selection for domain generalization and risk-discrepancy trade-off checks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute per-checkpoint ce, accuracy and pairwise-domain MMD from a JSONL feature archive
    ComputeMetrics(ComputeMetricsArgs),
    /// Select a checkpoint from a metrics CSV and print the result as JSON
    Select(SelectArgs),
    /// Sample the risk-discrepancy trade-off curve of a discrete problem and check its shape
    Tradeoff(TradeoffArgs),
    /// Run the synthetic random-search experiment and compare both selection methods
    SynthExperiment(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct KernelArgs {
    /// Gaussian kernel bandwidths, comma separated
    #[arg(long, value_delimiter = ',', default_value = DEFAULT_GAMMAS_ARG)]
    pub gammas: Vec<f64>,
}

impl KernelArgs {
    fn config(&self) -> Result<KernelConfig, CliError> {
        KernelConfig::new(self.gammas.clone())
            .map_err(|e| CliError::Input(format!("--gammas: {e}")))
    }
}

#[derive(Debug, Clone, Args)]
pub struct SelectionArgs {
    /// Weight of the MMD term in the validation loss, in [0, 1]
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Scale of the cross-entropy term, positive
    #[arg(long, default_value_t = DEFAULT_BETA)]
    pub beta: f64,
    /// Lower cross-entropy percentile kept by the pre-filter
    #[arg(long, default_value_t = DEFAULT_PCT_LOW)]
    pub pct_low: f64,
    /// Upper cross-entropy percentile kept by the pre-filter
    #[arg(long, default_value_t = DEFAULT_PCT_HIGH)]
    pub pct_high: f64,
}

impl SelectionArgs {
    fn config(&self) -> Result<SelectionConfig, CliError> {
        let cfg = SelectionConfig {
            alpha: self.alpha,
            beta: self.beta,
            pct_low: self.pct_low,
            pct_high: self.pct_high,
        };
        cfg.validate().map_err(|e| CliError::Input(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct ComputeMetricsArgs {
    /// JSONL archive with one record per (run, step, domain)
    #[arg(long)]
    pub features: PathBuf,
    /// Output metrics CSV
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub kernel: KernelArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Ours,
    Traditional,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Metrics CSV as written by compute-metrics
    #[arg(long)]
    pub metrics: PathBuf,
    /// Selection rule
    #[arg(long, value_enum)]
    pub method: MethodArg,
    #[command(flatten)]
    pub selection: SelectionArgs,
    /// Audit CSV path [default: <metrics stem>.<method>.audit.csv next to the metrics file]
    #[arg(long)]
    pub audit_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolverArg {
    /// Mirror-descent penalty sweep
    Sweep,
    /// Exhaustive search over a lattice of channels (small problems only)
    Bruteforce,
}

#[derive(Debug, Args)]
pub struct TradeoffArgs {
    /// Problem definition JSON
    #[arg(long)]
    pub problem: PathBuf,
    /// Risk budgets as start:stop:step, inclusive of start and of stop within half a step
    #[arg(long, default_value = "0.05:0.5:0.05")]
    pub deltas: String,
    #[arg(long, value_enum, default_value_t = SolverArg::Sweep)]
    pub solver: SolverArg,
    /// Lattice spacing for the brute-force solver; must divide 1
    #[arg(long, default_value_t = 1e-3)]
    pub grid_step: f64,
    /// Output curve CSV
    #[arg(long)]
    pub out: PathBuf,
    /// Allowed increase between consecutive points
    #[arg(long, default_value_t = 2e-3)]
    pub tol_mono: f64,
    /// Allowed decrease between consecutive secant slopes
    #[arg(long, default_value_t = 2e-3)]
    pub tol_convex: f64,
    /// Also write the curve as SVG
    #[arg(long)]
    pub plot: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Spurious coordinate correlated 0.9/0.8 in the seen domains and 0.1 in the unseen one
    Default,
    /// Separable invariant coordinate, no spurious signal
    Smoke,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of random-search trials
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    /// Seed for data generation and hyper-parameter sampling
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output report JSON
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    pub preset: Preset,
    /// Samples per domain [default: 1000, smoke preset 500]
    #[arg(long)]
    pub n_per_domain: Option<usize>,
    /// SGD steps per trial
    #[arg(long, default_value_t = 1000)]
    pub steps: u64,
    /// Steps between checkpoints
    #[arg(long, default_value_t = 50)]
    pub checkpoint_every: u64,
    /// Minibatch size
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[command(flatten)]
    pub selection: SelectionArgs,
    #[command(flatten)]
    pub kernel: KernelArgs,
    /// Also write the ce/mmd trajectories as SVG
    #[arg(long)]
    pub plot: Option<PathBuf>,
    /// Also write the checkpoint feature archive as JSONL
    #[arg(long)]
    pub archive_out: Option<PathBuf>,
    /// Also write the per-checkpoint metrics CSV
    #[arg(long)]
    pub metrics_out: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<selection::SelectionError> for CliError {
    fn from(e: selection::SelectionError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<TradeoffError> for CliError {
    fn from(e: TradeoffError) -> Self {
        match e {
            TradeoffError::NonConvergence { .. } => CliError::Internal(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidConfig(_) | SynthError::Selection(_) => {
                CliError::Input(e.to_string())
            }
            _ => CliError::Internal(e.to_string()),
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Input(format!("cannot create {}: {e}", path.display())))
}

fn write_file(path: &Path, body: &[u8]) -> Result<(), CliError> {
    let mut w = create(path)?;
    w.write_all(body)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::Internal(format!("writing {}: {e}", path.display())))
}

/// Parses `start:stop:step` into the grid start, start+step, … up to
/// `stop + step/2`, each value rounded to 12 decimals.
pub fn parse_delta_grid(spec: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [start, stop, step] = parts.as_slice() else {
        return Err(format!("delta grid {spec:?} is not start:stop:step"));
    };
    let num = |s: &str, what: &str| {
        s.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| format!("delta grid {what} {s:?} is not a finite number"))
    };
    let (start, stop, step) = (num(start, "start")?, num(stop, "stop")?, num(step, "step")?);
    if step <= 0.0 {
        return Err(format!("delta grid step must be positive, got {step}"));
    }
    if start < 0.0 {
        return Err(format!(
            "delta grid start must be non-negative, got {start}"
        ));
    }
    let limit = stop + step / 2.0;
    let mut out = Vec::new();
    for k in 0u64.. {
        let v = start + k as f64 * step;
        if v >= limit {
            break;
        }
        out.push((v * 1e12).round() / 1e12);
        if out.len() > 1_000_000 {
            return Err("delta grid has more than 1e6 points".into());
        }
    }
    if out.is_empty() {
        return Err(format!("delta grid {spec:?} is empty"));
    }
    Ok(out)
}

pub fn default_audit_path(metrics: &Path, method: MethodArg) -> PathBuf {
    let stem = metrics
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("metrics");
    let name = match method {
        MethodArg::Ours => format!("{stem}.ours.audit.csv"),
        MethodArg::Traditional => format!("{stem}.traditional.audit.csv"),
    };
    metrics.with_file_name(name)
}

fn write_audit_csv(rows: &[AuditRow], path: &Path) -> Result<(), CliError> {
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(create(path)?);
    let io = |e: csv::Error| CliError::Internal(format!("writing {}: {e}", path.display()));
    wtr.write_record(["run_id", "step", "ce", "mmd", "loss", "acc"])
        .map_err(io)?;
    for r in rows {
        wtr.write_record([
            r.run_id.clone(),
            r.step.to_string(),
            fmt_f64(r.ce),
            fmt_f64(r.mmd),
            r.loss.map(fmt_f64).unwrap_or_default(),
            fmt_f64(r.acc),
        ])
        .map_err(io)?;
    }
    wtr.flush()
        .map_err(|e| CliError::Internal(format!("writing {}: {e}", path.display())))
}

#[derive(Serialize)]
struct SelectOutput<'a> {
    method: &'a str,
    chosen: &'a CheckpointKey,
    criterion_value: f64,
    candidate_count: usize,
    test_acc: Option<f64>,
    audit_path: String,
    config: SelectionConfig,
}

fn compute_metrics(args: &ComputeMetricsArgs) -> Result<u8, CliError> {
    let kernel = args.kernel.config()?;
    let archive = ingest::read_checkpoint_jsonl(&args.features)?;
    let records = ingest::compute_checkpoint_metrics(&archive, &kernel)?;
    let mut body = Vec::new();
    ingest::write_metrics_csv_to(&records, &mut body)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    write_file(&args.out, &body)?;
    Ok(EXIT_OK)
}

fn select(args: &SelectArgs, stdout: &mut dyn Write) -> Result<u8, CliError> {
    let cfg = args.selection.config()?;
    let records = ingest::read_metrics_csv(&args.metrics)?;
    let runs = group_into_runs(records)?;
    let (result, method) = match args.method {
        MethodArg::Ours => (selection::select_ours(&runs, &cfg)?, "ours"),
        MethodArg::Traditional => (selection::select_traditional(&runs)?, "traditional"),
    };
    let audit_path = args
        .audit_out
        .clone()
        .unwrap_or_else(|| default_audit_path(&args.metrics, args.method));
    write_audit_csv(&result.audit, &audit_path)?;
    let out = SelectOutput {
        method,
        chosen: &result.chosen,
        criterion_value: result.criterion_value,
        candidate_count: result.candidate_count,
        test_acc: result.chosen_record(&runs).and_then(|c| c.test_acc),
        audit_path: audit_path.display().to_string(),
        config: cfg,
    };
    let json = serde_json::to_string_pretty(&out).map_err(|e| CliError::Internal(e.to_string()))?;
    writeln!(stdout, "{json}").map_err(|e| CliError::Internal(e.to_string()))?;
    Ok(EXIT_OK)
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn tradeoff_cmd(args: &TradeoffArgs, stdout: &mut dyn Write) -> Result<u8, CliError> {
    let deltas = parse_delta_grid(&args.deltas).map_err(CliError::Input)?;
    let problem = DiscreteDGProblem::read_json(&args.problem)?;
    let curve = match args.solver {
        SolverArg::Sweep => tradeoff::tradeoff_solver(&problem, &deltas)?,
        SolverArg::Bruteforce => tradeoff::tradeoff_bruteforce(&problem, &deltas, args.grid_step)?,
    };
    let mut body = Vec::new();
    curve
        .write_csv(&mut body)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    write_file(&args.out, &body)?;
    if let Some(p) = &args.plot {
        write_file(p, plot::curve_svg(&curve).as_bytes())?;
    }
    let report = tradeoff::check_monotone_convex(&curve, args.tol_mono, args.tol_convex)?;
    let io = |e: std::io::Error| CliError::Internal(e.to_string());
    writeln!(
        stdout,
        "theorem1: monotone={} convex={}",
        pass(report.monotone.passed),
        pass(report.convex.passed)
    )
    .map_err(io)?;
    writeln!(
        stdout,
        "points={} worst_monotone_violation={} worst_convexity_violation={}",
        report.points_used,
        fmt_f64(report.monotone.worst_violation),
        fmt_f64(report.convex.worst_violation)
    )
    .map_err(io)?;
    Ok(if report.passed() {
        EXIT_OK
    } else {
        EXIT_PROPERTY
    })
}

fn synth_experiment(args: &SynthArgs, stdout: &mut dyn Write) -> Result<u8, CliError> {
    let sel = args.selection.config()?;
    let kernel = args.kernel.config()?;
    let mut scfg = match args.preset {
        Preset::Default => SyntheticConfig {
            seed: args.seed,
            ..SyntheticConfig::default()
        },
        Preset::Smoke => SyntheticConfig::separable_smoke(args.seed),
    };
    if let Some(n) = args.n_per_domain {
        scfg.n_per_domain = n;
    }
    let tcfg = TrainConfig {
        steps: args.steps,
        checkpoint_every: args.checkpoint_every,
        batch_size: args.batch_size,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let exp = synth::run_experiment(&scfg, &tcfg, args.trials, &sel, &kernel)?;
    let json =
        serde_json::to_string_pretty(&exp.report).map_err(|e| CliError::Internal(e.to_string()))?;
    write_file(&args.out, format!("{json}\n").as_bytes())?;
    if let Some(p) = &args.plot {
        write_file(p, plot::trajectories_svg(&exp.report).as_bytes())?;
    }
    if let Some(p) = &args.archive_out {
        let mut body = Vec::new();
        exp.archive
            .write_jsonl(&mut body)
            .map_err(|e| CliError::Internal(e.to_string()))?;
        write_file(p, &body)?;
    }
    if let Some(p) = &args.metrics_out {
        let mut body = Vec::new();
        ingest::write_metrics_csv_to(&exp.records, &mut body)
            .map_err(|e| CliError::Internal(e.to_string()))?;
        write_file(p, &body)?;
    }
    let r = &exp.report;
    let acc = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    writeln!(
        stdout,
        "trials={} ours={}@{} traditional={}@{} delta={} mean_ours={} mean_traditional={}",
        r.trials.len(),
        r.ours.run_id,
        r.ours.step,
        r.traditional.run_id,
        r.traditional.step,
        acc(r.delta),
        acc(r.per_trial_mean_test_acc.ours),
        acc(r.per_trial_mean_test_acc.traditional),
    )
    .map_err(|e| CliError::Internal(e.to_string()))?;
    Ok(EXIT_OK)
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> u8 {
    let result = match &cli.command {
        Command::ComputeMetrics(a) => compute_metrics(a),
        Command::Select(a) => select(a, stdout),
        Command::Tradeoff(a) => tradeoff_cmd(a, stdout),
        Command::SynthExperiment(a) => synth_experiment(a, stdout),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
