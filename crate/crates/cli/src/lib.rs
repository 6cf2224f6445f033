//! Command-line front end: estimation on CSV data, scenario simulation and
//! λ-path inspection.
//!
//! Exit codes: 0 success, 2 usage or validation failure, 3 estimation failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use cfl_core::simbench::{
    run_monte_carlo, threads_from_env, D2Truth, EstimatorKind, McOptions, ScenarioId, ScenarioSpec,
};
use cfl_core::tuning::BicForm;
use cfl_core::{
    estimate, estimate_treated_only, CflError, EstimateConfig, GridSpec, LambdaPolicy, ScoreKind,
};

pub mod io;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Estimation(#[from] CflError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Estimation(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "cfl",
    version,
    about = "Causal fused lasso for heterogeneous treatment effects"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate per-unit effects from a CSV file.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo study on a synthetic scenario.
    Simulate(SimulateArgs),
    /// Write the BIC path over the λ grid.
    Path(PathArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Prognostic,
    Propensity,
}

impl From<KindArg> for ScoreKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Prognostic => ScoreKind::Prognostic,
            KindArg::Propensity => ScoreKind::Propensity,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BicArg {
    /// `rss/σ̂² + df·ln n` with a robust noise estimate.
    KnownVariance,
    /// `n·ln(rss/n) + df·ln n`.
    Profile,
}

impl From<BicArg> for BicForm {
    fn from(b: BicArg) -> Self {
        match b {
            BicArg::KnownVariance => BicForm::KnownVariance,
            BicArg::Profile => BicForm::Profile,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "z")]
    pub z_col: String,
    #[arg(long, default_value = "y")]
    pub y_col: String,
    #[arg(long, value_enum, default_value = "prognostic")]
    pub kind: KindArg,
    /// Share of rows used to fit the score model.
    #[arg(long, default_value_t = 0.5)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = cfl_core::tuning::DEFAULT_GRID_COUNT)]
    pub grid_count: usize,
    #[arg(long, default_value_t = cfl_core::tuning::DEFAULT_GRID_SPAN)]
    pub grid_span: f64,
    #[arg(long, value_enum, default_value = "known-variance")]
    pub bic: BicArg,
    /// Prepend a column of ones to the covariates before fitting the score.
    #[arg(long)]
    pub intercept: bool,
}

impl InputArgs {
    fn grid(&self) -> GridSpec {
        GridSpec {
            count: self.grid_count,
            span: self.grid_span,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub output: PathBuf,
    /// `auto` for BIC selection, or a fixed nonnegative value.
    #[arg(long, default_value = "auto")]
    pub lambda: String,
    /// Fuse only the treated units (propensity kind).
    #[arg(long)]
    pub treated_only: bool,
}

#[derive(Debug, Clone, Args)]
pub struct PathArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scenario: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub d: usize,
    #[arg(long, default_value_t = 50)]
    pub reps: usize,
    /// cfl1, cfl2 or naive.
    #[arg(long, default_value = "cfl1")]
    pub estimator: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub fraction: f64,
    #[arg(long, default_value_t = cfl_core::tuning::DEFAULT_GRID_COUNT)]
    pub grid_count: usize,
    #[arg(long, default_value_t = cfl_core::tuning::DEFAULT_GRID_SPAN)]
    pub grid_span: f64,
    #[arg(long, value_enum, default_value = "known-variance")]
    pub bic: BicArg,
    #[arg(long)]
    pub intercept: bool,
    /// Score scenario D2 against a zero effect instead of its generative contrast.
    #[arg(long)]
    pub zero_d2_truth: bool,
}

fn check_fraction(f: f64) -> Result<(), CliError> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "--fraction must lie in (0, 1), got {f}"
        )))
    }
}

fn check_grid(g: GridSpec) -> Result<(), CliError> {
    if g.count < 2 {
        return Err(CliError::Usage(format!(
            "--grid-count must be at least 2, got {}",
            g.count
        )));
    }
    if !(g.span > 0.0 && g.span < 1.0) {
        return Err(CliError::Usage(format!(
            "--grid-span must lie in (0, 1), got {}",
            g.span
        )));
    }
    Ok(())
}

fn parse_lambda(raw: &str, grid: GridSpec, form: BicForm) -> Result<LambdaPolicy, CliError> {
    if raw.eq_ignore_ascii_case("auto") {
        return Ok(LambdaPolicy::Auto(grid, form));
    }
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(LambdaPolicy::Fixed(v)),
        _ => Err(CliError::Usage(format!(
            "--lambda must be 'auto' or a nonnegative number, got '{raw}'"
        ))),
    }
}

pub fn cmd_estimate(args: &EstimateArgs) -> Result<(), CliError> {
    let input = &args.input;
    check_fraction(input.fraction)?;
    check_grid(input.grid())?;
    let lambda = parse_lambda(&args.lambda, input.grid(), input.bic.into())?;
    let kind: ScoreKind = input.kind.into();
    if args.treated_only && kind != ScoreKind::Propensity {
        return Err(CliError::Usage(
            "--treated-only requires --kind propensity".into(),
        ));
    }
    let table = io::read_input(&input.input, &input.z_col, &input.y_col)?;
    let config = EstimateConfig {
        fraction: input.fraction,
        seed: input.seed,
        lambda,
        intercept: input.intercept,
    };
    let report = if args.treated_only {
        estimate_treated_only(&table.data, &config)?
    } else {
        estimate(&table.data, kind, &config)?
    };
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    io::write_estimate(&args.output, &report, &table.data)?;
    io::write_summary(
        &io::sidecar_path(&args.output, "summary"),
        &report,
        args.treated_only,
    )?;
    if let Some(path) = &report.bic_path {
        io::write_path(&io::sidecar_path(&args.output, "path"), path)?;
    }
    Ok(())
}

pub fn cmd_path(args: &PathArgs) -> Result<(), CliError> {
    let input = &args.input;
    check_fraction(input.fraction)?;
    check_grid(input.grid())?;
    let table = io::read_input(&input.input, &input.z_col, &input.y_col)?;
    let config = EstimateConfig {
        fraction: input.fraction,
        seed: input.seed,
        lambda: LambdaPolicy::Auto(input.grid(), input.bic.into()),
        intercept: input.intercept,
    };
    let report = estimate(&table.data, input.kind.into(), &config)?;
    let path = report.bic_path.expect("auto policy records the path");
    io::write_path(&args.output, &path)
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<String, CliError> {
    let id: ScenarioId = args
        .scenario
        .parse()
        .map_err(|e: CflError| CliError::Usage(e.to_string()))?;
    let kind: EstimatorKind = args
        .estimator
        .parse()
        .map_err(|e: CflError| CliError::Usage(e.to_string()))?;
    if kind == EstimatorKind::Cfl2 && id.has_constant_propensity() {
        return Err(CliError::Usage(format!(
            "cfl2 is not suitable for scenario {id}: the propensity score is constant in this experimental design"
        )));
    }
    check_fraction(args.fraction)?;
    let grid = GridSpec {
        count: args.grid_count,
        span: args.grid_span,
    };
    check_grid(grid)?;
    if args.reps == 0 {
        return Err(CliError::Usage("--reps must be at least 1".into()));
    }
    let mut spec = ScenarioSpec::new(id, args.n, args.d, args.seed);
    if args.zero_d2_truth {
        spec.d2_truth = D2Truth::Zero;
    }
    let options = McOptions {
        config: EstimateConfig {
            fraction: args.fraction,
            seed: args.seed,
            lambda: LambdaPolicy::Auto(grid, args.bic.into()),
            intercept: args.intercept,
        },
        threads: threads_from_env(),
    };
    let summary =
        run_monte_carlo(&spec, kind, args.reps, args.seed, &options).map_err(|e| match e {
            CflError::InvalidInput(msg) => CliError::Usage(msg),
            other => CliError::Estimation(other),
        })?;
    io::write_simulation(&args.output, &summary)?;
    Ok(io::summary_line(&summary))
}

/// Runs a parsed command and maps the outcome to a process exit code.
pub fn run(cli: Cli) -> ExitCode {
    let result = match &cli.command {
        Command::Estimate(a) => cmd_estimate(a),
        Command::Path(a) => cmd_path(a),
        Command::Simulate(a) => cmd_simulate(a).map(|line| println!("{line}")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
