//! Library half of the `gbcee` command-line tool, split out so the commands
//! can be driven from tests.

pub mod input;
pub mod report;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use gbcee::benchmarks::{aipw, gformula, BenchmarkResult};
use gbcee::estimate::{estimate, GbceeConfig};
use gbcee::model_space::AdjustmentSet;
use gbcee::simulation::{run_study, Scenario, StudyConfig, StudyEstimator, INTERACTION_COEF};
use gbcee::{Contrast, ContrastKind, VarType, VarianceMethod};
use serde::Serialize;

use crate::input::{read_dataset, ColumnSpec};
use crate::report::{
    inclusion_rows, replication_rows, BenchmarkRow, EstimateConfig, EstimateReport, EstimateResults,
    RunReport, SimulateReport, SimulateResults, Software,
};

const Z_975: f64 = 1.959_963_984_540_054;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Input(String),
    Estimation(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Input(_) => 3,
            CliError::Estimation(_) => 4,
            CliError::Io(_) => 5,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Estimation(m) => write!(f, "estimation error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<gbcee::Error> for CliError {
    fn from(e: gbcee::Error) -> Self {
        match e {
            gbcee::Error::InvalidInput(m) => CliError::Usage(m),
            other => CliError::Estimation(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gbcee", version, about = "Model-averaged double robust causal effect estimation")]
pub struct Cli {
    /// Worker threads; 0 uses every available core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Suppress the human-readable table and timing line.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate a causal contrast from a CSV file.
    Estimate(EstimateArgs),
    /// Run a simulation study on one of the built-in scenarios.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TypeArg {
    Continuous,
    Binary,
}

impl From<TypeArg> for VarType {
    fn from(t: TypeArg) -> Self {
        match t {
            TypeArg::Continuous => VarType::Continuous,
            TypeArg::Binary => VarType::Binary,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ContrastArg {
    Difference,
    Ratio,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VarianceArg {
    Eif,
    Bootstrap,
}

impl From<VarianceArg> for VarianceMethod {
    fn from(v: VarianceArg) -> Self {
        match v {
            VarianceArg::Eif => VarianceMethod::Eif,
            VarianceArg::Bootstrap => VarianceMethod::Bootstrap,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ChainArgs {
    #[arg(long, default_value_t = 500.0)]
    pub omega_c: f64,
    #[arg(long, default_value_t = 0.5)]
    pub omega_b: f64,
    /// Outcome-model chain length.
    #[arg(long, default_value_t = 2000)]
    pub iterations: usize,
    #[arg(long, value_enum, default_value_t = VarianceArg::Eif)]
    pub variance: VarianceArg,
    #[arg(long, default_value_t = 200)]
    pub boot_b: usize,
}

impl ChainArgs {
    fn config(&self, contrast: Contrast, seed: u64) -> GbceeConfig {
        GbceeConfig {
            omega_c: self.omega_c,
            omega_b: self.omega_b,
            mc3_iterations: self.iterations,
            variance_method: self.variance.into(),
            bootstrap_b: self.boot_b,
            contrast,
            seed,
            ..GbceeConfig::default()
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub outcome: String,
    #[arg(long)]
    pub exposure: String,
    #[arg(long, value_delimiter = ',', required = true)]
    pub covariates: Vec<String>,
    #[arg(long, value_enum)]
    pub outcome_type: TypeArg,
    #[arg(long, value_enum)]
    pub exposure_type: TypeArg,
    #[arg(long, value_enum, default_value_t = ContrastArg::Difference)]
    pub contrast: ContrastArg,
    /// Exposure level of the first arm (continuous exposure, binary outcome).
    #[arg(long, requires = "xprime", allow_negative_numbers = true)]
    pub x: Option<f64>,
    /// Exposure level of the reference arm.
    #[arg(long, requires = "x", allow_negative_numbers = true)]
    pub xprime: Option<f64>,
    #[command(flatten)]
    pub chain: ChainArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report path; the report goes to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// One of 1, 2, 3, 4, 5, 2B, 4B.
    #[arg(long)]
    pub scenario: String,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    /// Comma-separated subset of gbcee, full-g, target-g, full-aipw, target-aipw.
    #[arg(long, default_value = "gbcee,full-g,target-g,full-aipw,target-aipw")]
    pub estimators: String,
    #[command(flatten)]
    pub chain: ChainArgs,
    /// Coefficient on the squared covariate sum in Scenarios 4, 5 and 4B.
    #[arg(long, default_value_t = INTERACTION_COEF)]
    pub interaction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report path. Sibling `.inclusion.csv` and `.replications.csv` files
    /// are written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub emit_replications: bool,
}

/// Files a command wants written, plus the table for the terminal.
#[derive(Debug)]
pub struct Output {
    pub report_json: String,
    pub table: String,
    pub extra_files: Vec<(PathBuf, String)>,
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Io(e.to_string()))
}

/// `dir/report.json` becomes `dir/report.<suffix>`.
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn benchmark_row(name: &str, r: gbcee::Result<BenchmarkResult>) -> BenchmarkRow {
    match r {
        Ok(b) => {
            let half = b.variance.map(|v| Z_975 * v.max(0.0).sqrt());
            BenchmarkRow {
                estimator: name.into(),
                delta_hat: Some(b.delta_hat),
                variance: b.variance,
                ci_low: half.map(|h| b.delta_hat - h),
                ci_high: half.map(|h| b.delta_hat + h),
                error: None,
            }
        }
        Err(e) => BenchmarkRow {
            estimator: name.into(),
            delta_hat: None,
            variance: None,
            ci_low: None,
            ci_high: None,
            error: Some(e.to_string()),
        },
    }
}

pub fn cmd_estimate(args: &EstimateArgs) -> Result<(EstimateReport, Output), CliError> {
    let spec = ColumnSpec {
        outcome: args.outcome.clone(),
        exposure: args.exposure.clone(),
        covariates: args.covariates.clone(),
        outcome_type: args.outcome_type.into(),
        exposure_type: args.exposure_type.into(),
    };
    let data = read_dataset(&args.data, &spec)?;
    let kind = match args.contrast {
        ContrastArg::Difference => ContrastKind::Difference,
        ContrastArg::Ratio => ContrastKind::Ratio,
    };
    let contrast = match (args.x, args.xprime) {
        (Some(x), Some(xp)) => Contrast::at_levels(kind, x, xp),
        _ => Contrast { kind, levels: None },
    };
    let cfg = args.chain.config(contrast, args.seed);
    let result = estimate(&data, &cfg)?;

    let benchmarks = if data.exposure_type() == VarType::Binary {
        let full = AdjustmentSet::full(data.m());
        vec![
            benchmark_row("full-g", gformula(&data, &full, kind)),
            benchmark_row("full-aipw", aipw(&data, &full, kind)),
        ]
    } else {
        Vec::new()
    };

    let report: EstimateReport = RunReport {
        software: Software::current(),
        command: "estimate".into(),
        seed: args.seed,
        config: EstimateConfig {
            data: args.data.display().to_string(),
            outcome: spec.outcome,
            exposure: spec.exposure,
            covariates: spec.covariates,
            outcome_type: spec.outcome_type,
            exposure_type: spec.exposure_type,
            n: data.n(),
            gbcee: cfg,
        },
        results: EstimateResults::new(&result, data.covariate_names(), benchmarks),
    };
    let out = Output {
        report_json: to_json(&report)?,
        table: report::render_estimate(&report),
        extra_files: Vec::new(),
    };
    Ok((report, out))
}

pub fn parse_estimators(list: &str) -> Result<Vec<StudyEstimator>, CliError> {
    let v: Vec<StudyEstimator> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse::<StudyEstimator>())
        .collect::<Result<_, _>>()?;
    if v.is_empty() {
        return Err(CliError::Usage(format!(
            "no estimators given; valid: {}",
            StudyEstimator::valid_names()
        )));
    }
    Ok(v)
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(SimulateReport, Output), CliError> {
    let scenario: Scenario = args.scenario.parse()?;
    let estimators = parse_estimators(&args.estimators)?;
    if args.reps < 2 {
        return Err(CliError::Usage(format!(
            "--reps must be at least 2 to compute metrics, got {}",
            args.reps
        )));
    }
    if !args.interaction.is_finite() {
        return Err(CliError::Usage("--interaction must be finite".into()));
    }
    let mut cfg = StudyConfig::new(scenario, args.n, args.reps, estimators, args.seed);
    cfg.interaction = args.interaction;
    cfg.gbcee = args.chain.config(Contrast::difference(), 0);
    cfg.gbcee.validate()?;
    let result = run_study(&cfg)?;

    let report: SimulateReport = RunReport {
        software: Software::current(),
        command: "simulate".into(),
        seed: args.seed,
        config: cfg,
        results: SimulateResults::from(&result),
    };
    let mut extra_files = Vec::new();
    if let Some(out) = &args.out {
        extra_files.push((sibling(out, "inclusion.csv"), to_csv(&inclusion_rows(&result))?));
        if args.emit_replications {
            extra_files.push((sibling(out, "replications.csv"), to_csv(&replication_rows(&result))?));
        }
    } else if args.emit_replications {
        log::warn!("--emit-replications needs --out; no replication file written");
    }
    let out = Output {
        report_json: to_json(&report)?,
        table: report::render_simulate(&report),
        extra_files,
    };
    Ok((report, out))
}

/// Write the report and extra files; print the table unless quiet. Without
/// an output path the report itself goes to stdout and the table is skipped.
pub fn emit(out: &Output, path: Option<&Path>, quiet: bool) -> Result<(), CliError> {
    let write = |p: &Path, s: &str| {
        fs::write(p, s).map_err(|e| CliError::Io(format!("cannot write {}: {e}", p.display())))
    };
    match path {
        Some(p) => {
            write(p, &out.report_json)?;
            if !quiet {
                print!("{}", out.table);
            }
        }
        None => print!("{}", out.report_json),
    }
    for (p, s) in &out.extra_files {
        write(p, s)?;
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    gbcee::par::configure_threads(cli.threads);
    match &cli.command {
        Command::Estimate(a) => {
            let (_, out) = cmd_estimate(a)?;
            emit(&out, a.out.as_deref(), cli.quiet)
        }
        Command::Simulate(a) => {
            let (_, out) = cmd_simulate(a)?;
            emit(&out, a.out.as_deref(), cli.quiet)
        }
    }
}
