//! Command-line front end: loads configs and datasets, dispatches to the
//! estimation, cross-fitting, GMM, implication-check, and simulation
//! machinery, and writes JSON reports with embedded run manifests plus
//! aligned plain-text tables.
//!
//! Exit codes: 0 success, 2 validation error, 3 estimation degeneracy,
//! 4 testable implications violated, 1 anything else.

mod io;
mod manifest;
mod table;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use gliv::diagnostics::{self, BinGrid, Tolerance};
use gliv::dml::{self, KindLearner};
use gliv::estimators::{self, ParameterId};
use gliv::gmm::{self, GmmOptions, MomentSpec};
use gliv::nuisance::{Dataset, ModelKind, NuisanceFit, DEFAULT_TRIM_FLOOR};
use gliv::simulation::{self, DgpSpec, EstimatorKind, Target, XKind};
use gliv::{ErrorKind, TypeConfig};

use manifest::RunManifest;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Degeneracy(String),
    /// Testable implications violated (not an error in the library sense).
    ImplicationsViolated,
    Other(String),
}

impl From<gliv::Error> for CliError {
    fn from(e: gliv::Error) -> Self {
        match e.kind() {
            ErrorKind::Validation => CliError::Validation(e.to_string()),
            ErrorKind::Degeneracy => CliError::Degeneracy(e.to_string()),
            ErrorKind::Numeric => CliError::Other(e.to_string()),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Degeneracy(_) => 3,
            CliError::ImplicationsViolated => 4,
            CliError::Other(_) => 1,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Validation(m) => format!("validation error: {m}"),
            CliError::Degeneracy(m) => format!("estimation degeneracy: {m}"),
            CliError::ImplicationsViolated => "testable implications violated".to_string(),
            CliError::Other(m) => format!("error: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "gliv",
    version,
    about = "Estimation and diagnostics for local IV models with unordered multi-valued treatments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Projection estimates of structural functions and type probabilities.
    Estimate(EstimateArgs),
    /// Cross-fitted orthogonal-moment estimate of a single parameter.
    Dml(DmlArgs),
    /// Two-step optimally weighted GMM from a moment-spec JSON.
    Gmm(GmmArgs),
    /// Plug-in checks of the model's testable implications.
    TestImplications(TestArgs),
    /// Seeded Monte Carlo study on the built-in processes.
    Simulate(SimulateArgs),
    /// Draw a dataset from a built-in process and write it as CSV.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Preset name (`main_example`, `binary_late`) or config JSON path.
    #[arg(long)]
    config: String,
    /// Dataset CSV with header `y,t,z,x1,...,xd`.
    #[arg(long)]
    data: String,
    /// First-stage model: `cells` or `series:<degree>`.
    #[arg(long, default_value = "cells")]
    model: String,
    /// Propensity trim floor.
    #[arg(long, default_value_t = DEFAULT_TRIM_FLOOR)]
    trim: f64,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated parameter ids (default: the full structural-function
    /// family of the configuration).
    #[arg(long)]
    params: Option<String>,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<String>,
    /// Dump per-observation influence values to this CSV.
    #[arg(long)]
    influence_csv: Option<String>,
    /// Suppress the plain-text table.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct DmlArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Parameter id, e.g. `beta:t1:1`.
    #[arg(long)]
    target: String,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Learner for the fold fits: `cells` or `series:<degree>`.
    #[arg(long, default_value = "cells")]
    learner: String,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct GmmArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Moment-spec JSON path.
    #[arg(long)]
    spec: String,
    /// Numerical-derivative step (default n^(-1/4)).
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct TestArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Number of equal-probability outcome bins.
    #[arg(long, default_value_t = 10)]
    bins: usize,
    /// Explicit comma-separated breakpoints (overrides --bins).
    #[arg(long)]
    breakpoints: Option<String>,
    /// `auto` (3 plug-in standard errors) or a fixed number.
    #[arg(long, default_value = "auto")]
    tolerance: String,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// `discrete` or `continuous` covariate law.
    #[arg(long)]
    dgp: String,
    #[arg(long, default_value_t = 3000)]
    n: usize,
    #[arg(long, default_value_t = 10_000)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated targets, e.g. `beta:t1:1,sigma:beta:t1:1`.
    #[arg(long)]
    targets: String,
    /// `cep` or `dml:<folds>`.
    #[arg(long, default_value = "cep")]
    estimator: String,
    /// First-stage model: `cells` or `series:<degree>`.
    #[arg(long, default_value = "cells")]
    model: String,
    #[arg(long, default_value_t = DEFAULT_TRIM_FLOOR)]
    trim: f64,
    /// Map the instrument draw's success to the first level instead.
    #[arg(long)]
    flip_z: bool,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long)]
    out: Option<String>,
    /// Write the aligned text table here as well.
    #[arg(long)]
    text_out: Option<String>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    dgp: String,
    #[arg(long, default_value_t = 3000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    flip_z: bool,
    /// Output CSV path.
    #[arg(long)]
    out: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Estimate(args) => cmd_estimate(args),
        Command::Dml(args) => cmd_dml(args),
        Command::Gmm(args) => cmd_gmm(args),
        Command::TestImplications(args) => cmd_test(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Generate(args) => cmd_generate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn parse_model(spec: &str) -> Result<ModelKind, CliError> {
    if spec == "cells" {
        return Ok(ModelKind::DiscreteCells);
    }
    if let Some(deg) = spec.strip_prefix("series:") {
        let degree = deg
            .parse::<usize>()
            .map_err(|_| CliError::Validation(format!("bad series degree `{deg}`")))?;
        return Ok(ModelKind::PolynomialSeries { degree });
    }
    Err(CliError::Validation(format!(
        "unknown model `{spec}` (expected `cells` or `series:<degree>`)"
    )))
}

fn env_seed(cli_seed: u64) -> u64 {
    std::env::var("GLIV_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(cli_seed)
}

fn env_threads(cli_threads: usize) -> usize {
    std::env::var("GLIV_THREADS").ok().and_then(|s| s.parse().ok()).unwrap_or(cli_threads)
}

fn load_inputs(args: &DataArgs) -> Result<(TypeConfig, Dataset, NuisanceFit), CliError> {
    let config = io::load_config(&args.config)?;
    let data = io::read_dataset(&args.data, &config)?;
    let model = parse_model(&args.model)?;
    let fit = NuisanceFit::fit(&data, &config, model, args.trim)?;
    Ok((config, data, fit))
}

#[derive(Serialize)]
pub struct ParameterRow {
    id: ParameterId,
    estimate: f64,
    std_error: f64,
}

#[derive(Serialize)]
pub struct ResidualP0 {
    t: String,
    value: f64,
    note: &'static str,
}

#[derive(Serialize)]
pub struct EstimateReportJson {
    manifest: RunManifest,
    n: usize,
    parameters: Vec<ParameterRow>,
    /// Influence-function covariance; estimate covariance is this over n.
    covariance: Vec<Vec<f64>>,
    equality_notes: Vec<String>,
    /// Residual never-switch probabilities `1 - sum_k p_{t,k}`.
    residual_p0: Vec<ResidualP0>,
}

fn cmd_estimate(args: EstimateArgs) -> Result<(), CliError> {
    let (config, data, fit) = load_inputs(&args.data)?;
    let params: Vec<ParameterId> = match &args.params {
        None => estimators::default_lasf_params(&config),
        Some(list) => list
            .split(',')
            .map(|s| s.trim().parse::<ParameterId>().map_err(CliError::from))
            .collect::<Result<_, _>>()?,
    };
    let report = estimators::estimate_all(&data, &config, &fit, &params)?;

    // Residual probability of the never-switching level per treatment.
    let mut residual_p0 = Vec::new();
    for t in config.treatments() {
        let mut total = 0.0;
        for k in 1..=config.n_instruments() {
            total += estimators::estimate_p(&data, &config, &fit, t, k)?;
        }
        residual_p0.push(ResidualP0 {
            t: t.clone(),
            value: 1.0 - total,
            note: "residual: one minus the summed switch-level probabilities",
        });
    }

    if let Some(path) = &args.influence_csv {
        let mut writer = csv::Writer::from_path(path)
            .map_err(|e| CliError::Other(format!("cannot write `{path}`: {e}")))?;
        let header: Vec<String> = params.iter().map(|p| p.to_string()).collect();
        writer.write_record(&header).map_err(|e| CliError::Other(e.to_string()))?;
        for i in 0..report.influence.nrows() {
            let row: Vec<String> =
                (0..params.len()).map(|j| format!("{}", report.influence[(i, j)])).collect();
            writer.write_record(&row).map_err(|e| CliError::Other(e.to_string()))?;
        }
        writer.flush().map_err(|e| CliError::Other(e.to_string()))?;
    }

    let manifest = RunManifest::new("estimate")
        .with_config(&args.data.config)
        .with_dataset(&args.data.data)
        .flag("model", &args.data.model)
        .flag("trim", args.data.trim)
        .flag("params", params.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(","));
    let json = EstimateReportJson {
        manifest,
        n: report.n,
        parameters: params
            .iter()
            .enumerate()
            .map(|(i, id)| ParameterRow {
                id: id.clone(),
                estimate: report.estimates[i],
                std_error: report.standard_errors[i],
            })
            .collect(),
        covariance: report.covariance.clone(),
        equality_notes: report.equality_notes.clone(),
        residual_p0,
    };
    io::emit_json(&json, args.out.as_deref())?;
    if !args.quiet {
        print!("{}", table::estimate_table(&json));
    }
    Ok(())
}

#[derive(Serialize)]
pub struct DmlReportJson {
    manifest: RunManifest,
    target: ParameterId,
    estimate: f64,
    std_error: f64,
    /// Influence variance; estimator variance is this over n.
    variance: f64,
    ci95: (f64, f64),
    folds: usize,
    n: usize,
}

fn cmd_dml(args: DmlArgs) -> Result<(), CliError> {
    let config = io::load_config(&args.data.config)?;
    let data = io::read_dataset(&args.data.data, &config)?;
    let target: ParameterId = args.target.parse().map_err(CliError::from)?;
    let seed = env_seed(args.seed);
    let plan = dml::make_plan(data.n(), args.folds, seed)?;
    let learner = KindLearner { kind: parse_model(&args.learner)?, trim_floor: args.data.trim };
    let est = dml::dml2_generic(&data, &config, &target, &plan, &learner)?;
    let manifest = RunManifest::new("dml")
        .with_config(&args.data.config)
        .with_dataset(&args.data.data)
        .with_seed(seed)
        .flag("target", &args.target)
        .flag("folds", args.folds)
        .flag("learner", &args.learner)
        .flag("trim", args.data.trim);
    let json = DmlReportJson {
        manifest,
        target: target.clone(),
        estimate: est.estimate,
        std_error: est.std_error(),
        variance: est.variance,
        ci95: est.confidence_interval(1.96),
        folds: est.folds,
        n: est.n,
    };
    io::emit_json(&json, args.out.as_deref())?;
    if !args.quiet {
        print!("{}", table::dml_table(&json));
    }
    Ok(())
}

#[derive(Serialize)]
pub struct GmmReportJson {
    manifest: RunManifest,
    eta_tilde: Vec<f64>,
    eta_hat: Vec<f64>,
    std_errors: Vec<f64>,
    /// (Gamma' V^-1 Gamma)^-1; estimate covariance is this over n.
    covariance: Vec<Vec<f64>>,
    v_hat: Vec<Vec<f64>>,
    gamma_hat: Vec<Vec<f64>>,
    objective_value: f64,
    epsilon: f64,
    n: usize,
    pseudoinverse_weighting: bool,
    near_flat_objective: bool,
}

fn to_rows(m: &gliv::nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

fn cmd_gmm(args: GmmArgs) -> Result<(), CliError> {
    let (config, data, fit) = load_inputs(&args.data)?;
    let text = std::fs::read_to_string(&args.spec)
        .map_err(|e| CliError::Validation(format!("cannot read spec `{}`: {e}", args.spec)))?;
    let spec: MomentSpec = serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("invalid moment spec: {e}")))?;
    let result = gmm::fit_gmm(&data, &config, &fit, &spec, GmmOptions { epsilon: args.epsilon })?;
    let manifest = RunManifest::new("gmm")
        .with_config(&args.data.config)
        .with_dataset(&args.data.data)
        .flag("spec", &args.spec)
        .flag("model", &args.data.model)
        .flag("trim", args.data.trim)
        .flag("epsilon", result.epsilon);
    let json = GmmReportJson {
        manifest,
        eta_tilde: result.first_stage_eta.clone(),
        eta_hat: result.eta_hat.clone(),
        std_errors: result.standard_errors.clone(),
        covariance: to_rows(&result.covariance),
        v_hat: to_rows(&result.v_hat),
        gamma_hat: to_rows(&result.gamma_hat),
        objective_value: result.objective_value,
        epsilon: result.epsilon,
        n: result.n,
        pseudoinverse_weighting: result.pseudoinverse_weighting,
        near_flat_objective: result.near_flat_objective,
    };
    io::emit_json(&json, args.out.as_deref())?;
    if !args.quiet {
        print!("{}", table::gmm_table(&json));
    }
    Ok(())
}

#[derive(Serialize)]
pub struct TestReportJson {
    manifest: RunManifest,
    #[serde(flatten)]
    report: diagnostics::ImplicationReport,
}

fn cmd_test(args: TestArgs) -> Result<(), CliError> {
    let (config, data, fit) = load_inputs(&args.data)?;
    let bins = match &args.breakpoints {
        Some(list) => {
            let breaks: Vec<f64> = list
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| CliError::Validation(format!("bad breakpoint `{s}`")))
                })
                .collect::<Result<_, _>>()?;
            BinGrid::from_breaks(breaks)?
        }
        None => BinGrid::equal_probability(data.ys(), args.bins)?,
    };
    let tolerance = match args.tolerance.as_str() {
        "auto" => Tolerance::Auto,
        v => Tolerance::Fixed(v.parse::<f64>().map_err(|_| {
            CliError::Validation(format!("bad tolerance `{v}` (expected `auto` or a number)"))
        })?),
    };
    let raw = diagnostics::q_kernel_estimates(&data, &config, &fit, &bins)?;
    let report = diagnostics::check_implications(&raw, tolerance);
    let manifest = RunManifest::new("test-implications")
        .with_config(&args.data.config)
        .with_dataset(&args.data.data)
        .flag("bins", bins.n_bins())
        .flag("tolerance", &args.tolerance)
        .flag("model", &args.data.model)
        .flag("trim", args.data.trim);
    let passed = report.passed;
    let json = TestReportJson { manifest, report };
    io::emit_json(&json, args.out.as_deref())?;
    if !args.quiet {
        print!("{}", table::implication_table(&json.report));
    }
    if passed {
        Ok(())
    } else {
        Err(CliError::ImplicationsViolated)
    }
}

#[derive(Serialize)]
pub struct SimulateReportJson {
    manifest: RunManifest,
    dgp: String,
    n: usize,
    reps_requested: usize,
    failures: usize,
    rows: Vec<simulation::McRow>,
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    if args.n == 0 {
        return Err(CliError::Validation("sample size must be at least 1".into()));
    }
    let x_kind = match args.dgp.as_str() {
        "discrete" => XKind::DiscreteFive,
        "continuous" => XKind::ContinuousUniform,
        other => {
            return Err(CliError::Validation(format!(
                "unknown process `{other}` (expected `discrete` or `continuous`)"
            )))
        }
    };
    let seed = env_seed(args.seed);
    let threads = env_threads(args.threads);
    let spec = DgpSpec { x_kind, n: args.n, seed, flip_z: args.flip_z };
    let targets: Vec<Target> = args
        .targets
        .split(',')
        .map(|s| s.trim().parse::<Target>().map_err(CliError::from))
        .collect::<Result<_, _>>()?;
    let model = parse_model(&args.model)?;
    let estimator = if args.estimator == "cep" {
        EstimatorKind::Cep { model, trim_floor: args.trim }
    } else if let Some(folds) = args.estimator.strip_prefix("dml:") {
        let folds = folds.parse::<usize>().map_err(|_| {
            CliError::Validation(format!("bad fold count in `{}`", args.estimator))
        })?;
        EstimatorKind::Dml2 { folds, model, trim_floor: args.trim }
    } else {
        return Err(CliError::Validation(format!(
            "unknown estimator `{}` (expected `cep` or `dml:<folds>`)",
            args.estimator
        )));
    };
    let summary = simulation::run_monte_carlo(&spec, args.reps, &targets, &estimator, threads)?;
    let manifest = RunManifest::new("simulate")
        .with_seed(seed)
        .flag("dgp", &args.dgp)
        .flag("n", args.n)
        .flag("reps", args.reps)
        .flag("targets", &args.targets)
        .flag("estimator", &args.estimator)
        .flag("model", &args.model)
        .flag("trim", args.trim)
        .flag("flip_z", args.flip_z)
        .flag("threads", threads);
    let json = SimulateReportJson {
        manifest,
        dgp: args.dgp.clone(),
        n: args.n,
        reps_requested: summary.reps_requested,
        failures: summary.failures,
        rows: summary.rows.clone(),
    };
    io::emit_json(&json, args.out.as_deref())?;
    let text = table::simulate_table(&json);
    if let Some(path) = &args.text_out {
        std::fs::write(path, &text)
            .map_err(|e| CliError::Other(format!("cannot write `{path}`: {e}")))?;
    }
    if !args.quiet {
        print!("{text}");
    }
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> Result<(), CliError> {
    if args.n == 0 {
        return Err(CliError::Validation("sample size must be at least 1".into()));
    }
    let x_kind = match args.dgp.as_str() {
        "discrete" => XKind::DiscreteFive,
        "continuous" => XKind::ContinuousUniform,
        other => {
            return Err(CliError::Validation(format!(
                "unknown process `{other}` (expected `discrete` or `continuous`)"
            )))
        }
    };
    let seed = env_seed(args.seed);
    let spec = DgpSpec { x_kind, n: args.n, seed, flip_z: args.flip_z };
    let sim = simulation::generate(&spec);
    let config = TypeConfig::main_example();
    io::write_dataset_csv(&args.out, &sim, &config)?;
    Ok(())
}
