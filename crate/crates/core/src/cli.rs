//! Command-line front end: data ingestion, command dispatch and report
//! serialisation.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::mcmc::{mcmc_interval, read_trace_csv, recompute_logliks, rw_metropolis, write_trace, McmcOptions, McmcTrace};
use crate::models::{build_gev_regression, build_iid_gev, GevRegression, GevRegressionSpec, IidGev, LikelihoodModel, ScaleLink};
use crate::numerics::{deviance_threshold, Matrix, Vector};
use crate::optimizer::{fit_mle, profile_bound, BoundOptions, MleFit, Side};
use crate::oracle::naive_bound;
use crate::target::{Coordinate, LinearTarget, ReturnLevel, TargetFunction};
use crate::tracers::{trace_band, trace_bubble, trace_contour, BubbleOptions, BubbleStatus, ContourOptions, TracerOptions};

pub const SCHEMA_VERSION: u32 = 1;

/// Numeric columns read from a CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub columns: Vec<(String, Vec<f64>)>,
    /// Rows dropped because a selected cell did not parse as a number.
    pub dropped_rows: usize,
    pub provenance: String,
}

impl Dataset {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, |(_, v)| v.len())
    }
}

/// Read the selected numeric columns; rows with an unparseable selected cell
/// are dropped and counted.
pub fn load_csv(path: &Path, columns: &[&str]) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_path(path)?;
    let header = reader.headers()?.clone();
    let index: Vec<usize> = columns
        .iter()
        .map(|c| {
            header
                .iter()
                .position(|h| h == *c)
                .ok_or_else(|| Error::Schema(format!("column {c:?} not found in {}", path.display())))
        })
        .collect::<Result<_>>()?;
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); columns.len()];
    let mut dropped = 0;
    for rec in reader.records() {
        let rec = rec?;
        let row: Option<Vec<f64>> = index
            .iter()
            .map(|&j| rec.get(j).and_then(|c| c.parse::<f64>().ok()).filter(|v| v.is_finite()))
            .collect();
        match row {
            Some(r) => r.into_iter().zip(values.iter_mut()).for_each(|(v, col)| col.push(v)),
            None => dropped += 1,
        }
    }
    if values.first().is_none_or(|v| v.is_empty()) {
        return Err(Error::EmptyData(path.display().to_string()));
    }
    let kept = values[0].len();
    Ok(Dataset {
        name: path.file_stem().map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned()),
        columns: columns.iter().map(|c| c.to_string()).zip(values).collect(),
        dropped_rows: dropped,
        provenance: format!("{}: {kept} rows kept, {dropped} dropped", path.display()),
    })
}

/// Linear predictor written as `1 + x + z`: an optional intercept and
/// column names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Formula {
    pub intercept: bool,
    pub columns: Vec<String>,
}

impl Formula {
    /// Parse `1 + a + b`. The intercept is kept unless a `0` term is given.
    pub fn parse(text: &str) -> Result<Self> {
        let mut intercept = true;
        let mut columns = Vec::new();
        for term in text.split('+').map(str::trim) {
            match term {
                "1" => intercept = true,
                "0" => intercept = false,
                t if !t.is_empty()
                    && t.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
                    && t.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') =>
                {
                    if !columns.iter().any(|c| c == t) {
                        columns.push(t.to_string());
                    }
                }
                t => return Err(Error::Schema(format!("formula term {t:?} is not an intercept or a column name"))),
            }
        }
        if !intercept && columns.is_empty() {
            return Err(Error::Schema(format!("formula {text:?} has no terms")));
        }
        Ok(Self { intercept, columns })
    }

    fn term_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.intercept {
            names.push("intercept".to_string());
        }
        names.extend(self.columns.iter().cloned());
        names
    }

    /// Design row in model units: covariates divided by `time_unit`.
    fn row(&self, values: &dyn Fn(&str) -> f64, time_unit: f64) -> Vec<f64> {
        let mut row = Vec::new();
        if self.intercept {
            row.push(1.0);
        }
        row.extend(self.columns.iter().map(|c| values(c) / time_unit));
        row
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Independent GEV sample (µ, σ, ξ).
    Gev,
    /// GEV regression with linear predictors for µ, σ and ξ.
    GevReg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkArg {
    Log,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CiMethod {
    Optim,
    Naive,
    Bubble,
    Mcmc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandMethod {
    Ode,
    Optim,
}

#[derive(Debug, Clone, Parser, Serialize, Deserialize, PartialEq)]
pub struct ModelArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// Response column.
    #[arg(long, default_value = "r1")]
    pub column: String,
    #[arg(long, value_enum, default_value = "gev")]
    pub model: ModelKind,
    /// Location formula for gev-reg, e.g. "1 + year".
    #[arg(long, default_value = "1")]
    pub loc: String,
    /// Scale formula for gev-reg.
    #[arg(long, default_value = "1")]
    pub scale: String,
    /// Shape formula for gev-reg.
    #[arg(long, default_value = "1")]
    pub shape: String,
    /// Link between the scale predictor and σ (gev-reg).
    #[arg(long, value_enum, default_value = "log")]
    pub scale_link: LinkArg,
    /// Covariates are divided by this before fitting, so trend coefficients
    /// are per `time-unit` covariate units.
    #[arg(long, default_value_t = 100.0)]
    pub time_unit: f64,
    /// Fit on the raw design columns instead of centred and scaled ones.
    #[arg(long)]
    pub no_standardize: bool,
}

#[derive(Debug, Clone, Parser, Serialize, Deserialize, PartialEq)]
pub struct TargetArgs {
    /// Parameter name (see `fit`), or `rl` for a return level.
    #[arg(long)]
    pub param: String,
    /// Return period for `--param rl`.
    #[arg(long)]
    pub period: Option<f64>,
    /// Covariate values for regression return levels, `name=value`
    /// (defaults to the last data row).
    #[arg(long = "at", value_name = "NAME=VALUE")]
    pub at: Vec<String>,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Maximum-likelihood fit.
    Fit {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Profile-likelihood confidence interval for one quantity.
    Ci {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        target: TargetArgs,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[arg(long, value_enum, default_value = "optim")]
        method: CiMethod,
        /// Sampler iterations for `--method mcmc`.
        #[arg(long, default_value_t = 10_000)]
        iterations: usize,
        /// Keep every `thin`-th sampler draw.
        #[arg(long, default_value_t = 10)]
        thin: usize,
        #[arg(long, env = "PROLIK_SEED", default_value_t = 1)]
        seed: u64,
        /// Read sampler iterates from this CSV instead of sampling.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Recompute the log-likelihood of iterates read with `--trace`.
        #[arg(long)]
        recompute_loglik: bool,
    },
    /// Confidence band for return levels over a range of return periods.
    Rlband {
        #[command(flatten)]
        model: ModelArgs,
        /// `lo:hi:log[:n]` or `lo:hi:lin[:n]`.
        #[arg(long, default_value = "2:1000:log:100")]
        periods: String,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[arg(long, value_enum, default_value = "ode")]
        method: BandMethod,
        #[arg(long = "at", value_name = "NAME=VALUE")]
        at: Vec<String>,
    },
    /// Profile contour of two parameters.
    Contour {
        #[command(flatten)]
        model: ModelArgs,
        /// Two parameter names separated by a comma.
        #[arg(long, default_value = "sigma,xi")]
        pair: String,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[arg(long, default_value_t = 360)]
        points: usize,
    },
    /// Bound paths as the confidence level grows from near zero.
    BubblePath {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        target: TargetArgs,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
    },
    /// Random-walk Metropolis sample under a flat prior.
    McmcSample {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 10_000)]
        iterations: usize,
        #[arg(long, default_value_t = 10)]
        thin: usize,
        #[arg(long, env = "PROLIK_SEED", default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Parser, Serialize, Deserialize, PartialEq)]
#[command(name = "prolik", version, about = "Profile-likelihood intervals, bands and contours for GEV models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads for independent grid points and branches.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, value_enum, global = true, default_value = "json")]
    pub format: OutputFormat,
    /// Write the output here instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub kind: ModelKind,
    pub data: String,
    pub response: String,
    pub n: usize,
    pub dropped_rows: usize,
    pub parameters: Vec<String>,
    pub formulas: Option<[Formula; 3]>,
    pub scale_link: Option<ScaleLink>,
    pub time_unit: Option<f64>,
    pub standardize: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub converged: bool,
    pub warnings: Vec<String>,
    pub details: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: u32,
    pub tool: String,
    pub version: String,
    pub command: Cli,
    pub model: ModelReport,
    pub seed: Option<u64>,
    pub results: Value,
    pub diagnostics: Diagnostics,
}

/// Report plus the flat table used for `--format csv`.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub report: RunReport,
    pub table: Table,
}

#[derive(Debug, Clone, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    fn push<I: IntoIterator<Item = String>>(&mut self, row: I) {
        self.rows.push(row.into_iter().collect());
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("CSV output is UTF-8"))
    }
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

/// A fitted model together with what is needed to build targets.
#[allow(clippy::large_enum_variant)]
enum Fitted {
    Iid(IidGev),
    Reg { model: GevRegression, formulas: [Formula; 3], data: Dataset, time_unit: f64 },
}

impl Fitted {
    fn model(&self) -> &dyn LikelihoodModel {
        match self {
            Fitted::Iid(m) => m,
            Fitted::Reg { model, .. } => model,
        }
    }

    /// Names of the reported (original-unit) parameters.
    fn names(&self) -> Vec<String> {
        self.model().names()
    }

    /// Map from internal θ to reported parameters.
    fn coef_map(&self) -> Matrix {
        match self {
            Fitted::Iid(_) => Matrix::identity(3, 3),
            Fitted::Reg { model, .. } => model.coef_map().clone(),
        }
    }

    fn param_index(&self, name: &str) -> Result<usize> {
        let names = self.names();
        if let Some(j) = names.iter().position(|n| n == name) {
            return Ok(j);
        }
        // A block name alone selects its only column.
        let block: Vec<usize> = names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.split('.').next() == Some(name))
            .map(|(j, _)| j)
            .collect();
        match block.as_slice() {
            [j] => Ok(*j),
            _ => Err(Error::Schema(format!("unknown parameter {name:?}; available: {}", names.join(", ")))),
        }
    }

    fn covariate_row(&self, at: &[String]) -> Result<Vec<(String, f64)>> {
        let Fitted::Reg { data, formulas, .. } = self else {
            if !at.is_empty() {
                return Err(Error::Schema("--at applies to regression models only".into()));
            }
            return Ok(Vec::new());
        };
        let last = data.n_rows() - 1;
        let mut values: Vec<(String, f64)> = Vec::new();
        for f in formulas {
            for c in &f.columns {
                if !values.iter().any(|(n, _)| n == c) {
                    values.push((c.clone(), data.column(c).expect("formula columns are loaded")[last]));
                }
            }
        }
        for spec in at {
            let (name, value) = spec
                .split_once('=')
                .ok_or_else(|| Error::Schema(format!("--at expects NAME=VALUE, got {spec:?}")))?;
            let value: f64 = value.trim().parse().map_err(|_| Error::Schema(format!("--at value {value:?} is not a number")))?;
            let slot = values
                .iter_mut()
                .find(|(n, _)| n == name.trim())
                .ok_or_else(|| Error::Schema(format!("--at names {name:?}, which is not a covariate")))?;
            slot.1 = value;
        }
        Ok(values)
    }

    fn return_level(&self, at: &[String]) -> Result<(ReturnLevel, Vec<(String, f64)>)> {
        match self {
            Fitted::Iid(_) => Ok((ReturnLevel::iid(), self.covariate_row(at)?)),
            Fitted::Reg { model, formulas, time_unit, .. } => {
                let cov = self.covariate_row(at)?;
                let lookup = |c: &str| cov.iter().find(|(n, _)| n == c).map_or(f64::NAN, |(_, v)| *v);
                let rows: Vec<Vec<f64>> = formulas.iter().map(|f| f.row(&lookup, *time_unit)).collect();
                Ok((ReturnLevel::regression(model, &rows[0], &rows[1], &rows[2])?, cov))
            }
        }
    }

    /// Target for `--param`, its extra variable s, and a description.
    fn target(&self, args: &TargetArgs) -> Result<(Box<dyn TargetFunction>, f64, Value)> {
        if args.param == "rl" {
            let period = args.period.ok_or_else(|| Error::Schema("--param rl needs --period".into()))?;
            if !(period > 1.0) {
                return Err(Error::Domain(format!("return period must exceed 1, got {period}")));
            }
            let (rl, cov) = self.return_level(&args.at)?;
            let label = format!("rl{period}");
            let desc = json!({ "param": label, "period": period, "s": period.ln(), "covariates": cov });
            return Ok((Box::new(rl.with_label(label)), period.ln(), desc));
        }
        if args.period.is_some() || !args.at.is_empty() {
            return Err(Error::Schema("--period and --at apply to --param rl only".into()));
        }
        let j = self.param_index(&args.param)?;
        let name = self.names()[j].clone();
        let desc = json!({ "param": name });
        let target: Box<dyn TargetFunction> = match self {
            Fitted::Iid(_) => Box::new(Coordinate::new(j, name)),
            Fitted::Reg { model, .. } => Box::new(LinearTarget::fixed(model.coef_map().row(j).transpose(), name)),
        };
        Ok((target, 0.0, desc))
    }
}

fn build(args: &ModelArgs) -> Result<(Fitted, ModelReport)> {
    match args.model {
        ModelKind::Gev => {
            let data = load_csv(&args.data, &[args.column.as_str()])?;
            let model = build_iid_gev(data.column(&args.column).expect("column was loaded"))?;
            let report = ModelReport {
                kind: ModelKind::Gev,
                data: args.data.display().to_string(),
                response: args.column.clone(),
                n: data.n_rows(),
                dropped_rows: data.dropped_rows,
                parameters: model.names(),
                formulas: None,
                scale_link: None,
                time_unit: None,
                standardize: None,
            };
            Ok((Fitted::Iid(model), report))
        }
        ModelKind::GevReg => {
            if !(args.time_unit > 0.0 && args.time_unit.is_finite()) {
                return Err(Error::Domain(format!("time unit must be positive, got {}", args.time_unit)));
            }
            let formulas = [Formula::parse(&args.loc)?, Formula::parse(&args.scale)?, Formula::parse(&args.shape)?];
            let mut cols: Vec<&str> = vec![args.column.as_str()];
            for f in &formulas {
                for c in &f.columns {
                    if !cols.contains(&c.as_str()) {
                        cols.push(c);
                    }
                }
            }
            let data = load_csv(&args.data, &cols)?;
            let n = data.n_rows();
            let design = |f: &Formula| {
                let rows: Vec<Vec<f64>> = (0..n)
                    .map(|i| f.row(&|c: &str| data.column(c).expect("formula columns are loaded")[i], args.time_unit))
                    .collect();
                Matrix::from_fn(n, rows[0].len(), |i, j| rows[i][j])
            };
            let mut spec = GevRegressionSpec::new(
                design(&formulas[0]),
                design(&formulas[1]),
                design(&formulas[2]),
                Vector::from_column_slice(data.column(&args.column).expect("response was loaded")),
            );
            spec.names_mu = formulas[0].term_names();
            spec.names_sigma = formulas[1].term_names();
            spec.names_xi = formulas[2].term_names();
            spec.scale_link = match args.scale_link {
                LinkArg::Log => ScaleLink::Log,
                LinkArg::Identity => ScaleLink::Identity,
            };
            spec.standardize = !args.no_standardize;
            let model = build_gev_regression(&spec)?;
            let report = ModelReport {
                kind: ModelKind::GevReg,
                data: args.data.display().to_string(),
                response: args.column.clone(),
                n,
                dropped_rows: data.dropped_rows,
                parameters: model.names(),
                formulas: Some(formulas.clone()),
                scale_link: Some(spec.scale_link),
                time_unit: Some(args.time_unit),
                standardize: Some(spec.standardize),
            };
            Ok((Fitted::Reg { model, formulas, data, time_unit: args.time_unit }, report))
        }
    }
}

fn fit(fitted: &Fitted) -> Result<MleFit> {
    fit_mle(fitted.model(), None)
}

struct Collected {
    results: Value,
    details: Value,
    warnings: Vec<String>,
    table: Table,
    seed: Option<u64>,
}

/// Execute a parsed command line.
pub fn run(cli: &Cli) -> Result<Outcome> {
    let (model_args, seed) = match &cli.command {
        Command::Fit { model } | Command::Rlband { model, .. } | Command::Contour { model, .. } | Command::BubblePath { model, .. } => (model, None),
        Command::Ci { model, seed, method, trace, .. } => (model, (*method == CiMethod::Mcmc && trace.is_none()).then_some(*seed)),
        Command::McmcSample { model, seed, .. } => (model, Some(*seed)),
    };
    let (fitted, model_report) = build(model_args)?;
    let mle = fit(&fitted)?;
    let mut out = match &cli.command {
        Command::Fit { .. } => run_fit(&fitted, &mle)?,
        Command::Ci { target, level, method, iterations, thin, seed, trace, recompute_loglik, .. } => {
            run_ci(&fitted, &mle, target, *level, *method, (*iterations, *thin), *seed, trace.as_deref(), *recompute_loglik)?
        }
        Command::Rlband { periods, level, method, at, .. } => run_rlband(&fitted, &mle, periods, *level, *method, at)?,
        Command::Contour { pair, level, points, .. } => run_contour(&fitted, &mle, pair, *level, *points)?,
        Command::BubblePath { target, level, .. } => run_bubble_path(&fitted, &mle, target, *level)?,
        Command::McmcSample { iterations, thin, seed, .. } => run_mcmc_sample(&fitted, &mle, *iterations, *thin, *seed)?,
    };
    if !mle.converged {
        out.warnings.insert(0, "maximum-likelihood fit did not meet its convergence tolerance".into());
    }
    let converged = out.warnings.is_empty();
    let report = RunReport {
        schema: SCHEMA_VERSION,
        tool: "prolik".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: cli.clone(),
        model: model_report,
        seed: out.seed.or(seed),
        results: out.results,
        diagnostics: Diagnostics { converged, warnings: out.warnings, details: out.details },
    };
    Ok(Outcome { report, table: out.table })
}

fn bound_json(b: &crate::optimizer::ProfileBound) -> Value {
    json!({
        "value": b.value,
        "theta": b.theta.as_slice(),
        "nu": b.nu,
        "kkt_residual": b.kkt_residual,
        "constraint_residual": b.constraint_residual,
        "converged": b.converged,
        "iterations": b.iterations,
    })
}

fn run_fit(fitted: &Fitted, mle: &MleFit) -> Result<Collected> {
    let map = fitted.coef_map();
    let estimate = &map * &mle.theta_hat;
    let mut warnings = Vec::new();
    let std_errors: Vec<f64> = match mle.covariance() {
        Ok(cov) => (&map * cov * map.transpose()).diagonal().iter().map(|v| v.sqrt()).collect(),
        Err(e) => {
            warnings.push(format!("standard errors unavailable: {e}"));
            vec![f64::NAN; estimate.len()]
        }
    };
    let names = fitted.names();
    let mut table = Table::new(&["parameter", "estimate", "std_error"]);
    for (j, n) in names.iter().enumerate() {
        table.push([n.clone(), num(estimate[j]), num(std_errors[j])]);
    }
    let results = json!({
        "parameters": names,
        "estimate": estimate.as_slice(),
        "std_error": std_errors,
        "loglik_max": mle.loglik_max,
        "theta_internal": mle.theta_hat.as_slice(),
    });
    let details = json!({ "iterations": mle.iterations, "converged": mle.converged, "hessian_at_max": mle.hessian_at_max });
    Ok(Collected { results, details, warnings, table, seed: None })
}

#[allow(clippy::too_many_arguments)]
fn run_ci(
    fitted: &Fitted,
    mle: &MleFit,
    target_args: &TargetArgs,
    level: f64,
    method: CiMethod,
    (iterations, thin): (usize, usize),
    seed: u64,
    trace_path: Option<&Path>,
    recompute: bool,
) -> Result<Collected> {
    let model = fitted.model();
    let (target, s, desc) = fitted.target(target_args)?;
    let delta = deviance_threshold(level, 1)?;
    let estimate = target.value(&mle.theta_hat, s);
    let mut warnings = Vec::new();
    let (lower, upper, details) = match method {
        CiMethod::Optim => {
            let (lo, hi) = rayon::join(
                || profile_bound(model, &target, s, mle, delta, Side::Lower, &BoundOptions::default()),
                || profile_bound(model, &target, s, mle, delta, Side::Upper, &BoundOptions::default()),
            );
            let (lo, hi) = (lo?, hi?);
            for b in [&lo, &hi] {
                if !b.converged {
                    warnings.push(format!("{:?} bound did not meet the KKT tolerances", b.side));
                }
            }
            (lo.value, hi.value, json!({ "lower": bound_json(&lo), "upper": bound_json(&hi) }))
        }
        CiMethod::Naive => {
            let (lo, hi) = rayon::join(
                || naive_bound(model, mle, &target, s, delta, Side::Lower),
                || naive_bound(model, mle, &target, s, delta, Side::Upper),
            );
            let (lo, hi) = (lo?, hi?);
            for b in [&lo, &hi] {
                if !b.converged {
                    warnings.push(format!("{:?} bound: profile residual {:.2e} or inner maximisation not converged", b.side, b.residual));
                }
            }
            (lo.value, hi.value, json!({ "lower": lo, "upper": hi }))
        }
        CiMethod::Bubble => {
            let opts = BubbleOptions::default();
            let (lo, hi) = rayon::join(
                || trace_bubble(model, &target, s, mle, delta, Side::Lower, &opts),
                || trace_bubble(model, &target, s, mle, delta, Side::Upper, &opts),
            );
            let (lo, hi) = (lo?, hi?);
            let mut value = |tr: &crate::tracers::BubbleTrace| match (&tr.status, &tr.bound) {
                (BubbleStatus::Reached, Some(b)) => {
                    if !b.converged {
                        warnings.push(format!("{:?} bubble endpoint misses the KKT tolerances", tr.side));
                    }
                    b.value
                }
                _ => {
                    warnings.push(format!("{:?} bubble path stopped before the target level ({:?})", tr.side, tr.path.status));
                    f64::NAN
                }
            };
            let (l, u) = (value(&lo), value(&hi));
            let side_json = |tr: &crate::tracers::BubbleTrace| {
                json!({
                    "status": tr.status,
                    "delta1": tr.delta1,
                    "bound": tr.bound.as_ref().map(bound_json),
                    "nu_series": tr.nu_series(),
                    "max_residual": tr.path.max_residual(),
                })
            };
            (l, u, json!({ "lower": side_json(&lo), "upper": side_json(&hi) }))
        }
        CiMethod::Mcmc => {
            let trace = match trace_path {
                Some(p) => {
                    let mut t = read_trace_csv(p)?;
                    if recompute {
                        recompute_logliks(&mut t, model)?;
                    } else if t.iterates.iter().any(|th| th.len() != model.dim()) {
                        return Err(Error::Dimension(format!("iterates must have the model's {} coordinates", model.dim())));
                    }
                    t
                }
                None => sample(model, mle, iterations, thin, seed)?,
            };
            let iv = mcmc_interval(&trace, |th| target.value(th, s), delta)?;
            if iv.n_feasible < 10 {
                warnings.push(format!("only {} iterates lie in the likelihood region", iv.n_feasible));
            }
            if iv.loglik_max > mle.loglik_max + 1e-8 * (1.0 + mle.loglik_max.abs()) {
                warnings.push("an iterate exceeds the fitted maximum; the fit may be a local optimum".into());
            }
            let details = json!({
                "n_iterates": trace.len(),
                "n_feasible": iv.n_feasible,
                "loglik_max_iterates": iv.loglik_max,
                "acceptance_rate": trace.acceptance_rate,
                "source": trace.source,
            });
            (iv.lower, iv.upper, details)
        }
    };
    let mut table = Table::new(&["param", "estimate", "lower", "upper"]);
    table.push([desc["param"].as_str().unwrap_or_default().to_string(), num(estimate), num(lower), num(upper)]);
    let results = json!({
        "target": desc,
        "method": method,
        "level": level,
        "delta": delta,
        "estimate": estimate,
        "lower": lower,
        "upper": upper,
    });
    Ok(Collected { results, details, warnings, table, seed: None })
}

fn sample(model: &dyn LikelihoodModel, mle: &MleFit, iterations: usize, thin: usize, seed: u64) -> Result<McmcTrace> {
    let mut opts = McmcOptions::new(iterations, seed);
    opts.thin = thin;
    opts.proposal_cov = mle.covariance().ok();
    rw_metropolis(model, &mle.theta_hat, &opts)
}

/// Parse `lo:hi:log[:n]` or `lo:hi:lin[:n]` into return periods.
pub fn parse_periods(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').map(str::trim).collect();
    let bad = || Error::Schema(format!("--periods expects lo:hi:log[:n] or lo:hi:lin[:n], got {text:?}"));
    if !(3..=4).contains(&parts.len()) {
        return Err(bad());
    }
    let lo: f64 = parts[0].parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].parse().map_err(|_| bad())?;
    let n: usize = match parts.get(3) {
        Some(p) => p.parse().map_err(|_| bad())?,
        None => 100,
    };
    if !(lo > 1.0 && hi > lo && n >= 2) {
        return Err(Error::Domain(format!("periods need 1 < lo < hi and n ≥ 2, got {text:?}")));
    }
    let frac = |k: usize| k as f64 / (n - 1) as f64;
    match parts[2] {
        "log" => Ok((0..n).map(|k| if k + 1 == n { hi } else { (lo.ln() + (hi.ln() - lo.ln()) * frac(k)).exp() }).collect()),
        "lin" => Ok((0..n).map(|k| lo + (hi - lo) * frac(k)).collect()),
        _ => Err(bad()),
    }
}

fn run_rlband(fitted: &Fitted, mle: &MleFit, periods: &str, level: f64, method: BandMethod, at: &[String]) -> Result<Collected> {
    let model = fitted.model();
    let periods = parse_periods(periods)?;
    let s_grid: Vec<f64> = periods.iter().map(|t| t.ln()).collect();
    let (target, cov) = fitted.return_level(at)?;
    let delta = deviance_threshold(level, 1)?;
    let mut warnings = Vec::new();
    let n = periods.len();
    let mut lower = vec![f64::NAN; n];
    let mut upper = vec![f64::NAN; n];
    let details = match method {
        BandMethod::Ode => {
            let opts = TracerOptions::default();
            let (lo, hi) = rayon::join(
                || trace_band(model, &target, mle, delta, Side::Lower, &s_grid, &opts),
                || trace_band(model, &target, mle, delta, Side::Upper, &s_grid, &opts),
            );
            let (lo, hi) = (lo?, hi?);
            for (tr, dst) in [(&lo, &mut lower), (&hi, &mut upper)] {
                if !tr.completed() {
                    warnings.push(format!("{:?} band stopped after {} of {n} grid points ({:?})", tr.side, tr.points.len(), tr.status));
                }
                for (k, p) in tr.points.iter().enumerate() {
                    dst[k] = p.value;
                }
            }
            let side_json = |tr: &crate::tracers::BandTrace| {
                json!({
                    "status": tr.status,
                    "points": tr.points,
                    "path": {
                        "s": tr.path.times,
                        "theta": tr.path.states.iter().map(|y| y.rows(0, y.len() - 1).iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>(),
                        "nu": tr.path.states.iter().map(|y| y[y.len() - 1]).collect::<Vec<f64>>(),
                    },
                    "max_residual": tr.path.max_residual(),
                })
            };
            json!({ "lower": side_json(&lo), "upper": side_json(&hi) })
        }
        BandMethod::Optim => {
            let bounds: Vec<Result<(crate::optimizer::ProfileBound, crate::optimizer::ProfileBound)>> = s_grid
                .par_iter()
                .map(|&s| {
                    let lo = profile_bound(model, &target, s, mle, delta, Side::Lower, &BoundOptions::default())?;
                    let hi = profile_bound(model, &target, s, mle, delta, Side::Upper, &BoundOptions::default())?;
                    Ok((lo, hi))
                })
                .collect();
            let mut pts = Vec::with_capacity(n);
            for (k, b) in bounds.into_iter().enumerate() {
                let (lo, hi) = b?;
                if !(lo.converged && hi.converged) {
                    warnings.push(format!("bounds at period {} did not meet the KKT tolerances", periods[k]));
                }
                lower[k] = lo.value;
                upper[k] = hi.value;
                pts.push(json!({ "s": s_grid[k], "lower": bound_json(&lo), "upper": bound_json(&hi) }));
            }
            json!({ "points": pts })
        }
    };
    let estimate: Vec<f64> = s_grid.iter().map(|&s| target.value(&mle.theta_hat, s)).collect();
    let mut table = Table::new(&["period", "lower", "upper"]);
    for k in 0..n {
        table.push([num(periods[k]), num(lower[k]), num(upper[k])]);
    }
    let results = json!({
        "method": method,
        "level": level,
        "delta": delta,
        "covariates": cov,
        "period": periods,
        "estimate": estimate,
        "lower": lower,
        "upper": upper,
    });
    Ok(Collected { results, details, warnings, table, seed: None })
}

fn run_contour(fitted: &Fitted, mle: &MleFit, pair: &str, level: f64, points: usize) -> Result<Collected> {
    let names: Vec<&str> = pair.split(',').map(str::trim).collect();
    let [a, b] = names.as_slice() else {
        return Err(Error::Schema(format!("--pair expects two names separated by a comma, got {pair:?}")));
    };
    let map = fitted.coef_map();
    let idx = [fitted.param_index(a)?, fitted.param_index(b)?];
    for &j in &idx {
        let row = map.row(j);
        let unit = row.iter().enumerate().all(|(k, &v)| if k == j { v == 1.0 } else { v == 0.0 });
        if !unit {
            return Err(Error::UnsupportedModel(format!(
                "{} is not a coordinate of the fitted parameterisation; use --no-standardize",
                fitted.names()[j]
            )));
        }
    }
    let opts = ContourOptions { points_per_branch: points, ..ContourOptions::default() };
    let trace = trace_contour(fitted.model(), mle, (idx[0], idx[1]), level, &opts)?;
    let mut warnings = Vec::new();
    if trace.warning {
        warnings.push(format!("contour branches disagree by {:.2e} or a branch halted", trace.overlap_gap));
    }
    let full = fitted.names();
    let mut table = Table::new(&["normal_angle", full[idx[0]].as_str(), full[idx[1]].as_str()]);
    for p in &trace.points {
        table.push([num(p.normal_angle), num(p.psi[0]), num(p.psi[1])]);
    }
    let results = json!({
        "pair": [full[idx[0]], full[idx[1]]],
        "level": level,
        "delta": trace.delta,
        "estimate": [mle.theta_hat[idx[0]], mle.theta_hat[idx[1]]],
        "points": trace.points,
    });
    let details = json!({
        "overlap_gap": trace.overlap_gap,
        "max_level_residual": trace.points.iter().map(|p| p.level_residual).fold(0.0, f64::max),
        "max_first_order_residual": trace.points.iter().map(|p| p.first_order_residual).fold(0.0, f64::max),
        "branches": trace.branches.iter().map(|br| json!({
            "branch": br.branch,
            "status": br.path.status,
            "steps": br.path.times.len(),
            "path": { "t": br.path.times, "theta": br.path.states },
        })).collect::<Vec<_>>(),
    });
    Ok(Collected { results, details, warnings, table, seed: None })
}

fn run_bubble_path(fitted: &Fitted, mle: &MleFit, target_args: &TargetArgs, level: f64) -> Result<Collected> {
    let model = fitted.model();
    let (target, s, desc) = fitted.target(target_args)?;
    let delta = deviance_threshold(level, 1)?;
    let opts = BubbleOptions::default();
    let (lo, hi) = rayon::join(
        || trace_bubble(model, &target, s, mle, delta, Side::Lower, &opts),
        || trace_bubble(model, &target, s, mle, delta, Side::Upper, &opts),
    );
    let (lo, hi) = (lo?, hi?);
    let mut warnings = Vec::new();
    let mut table = Table::new(&["side", "delta", "value", "nu"]);
    let mut sides = Vec::new();
    for tr in [&lo, &hi] {
        if tr.status != BubbleStatus::Reached {
            warnings.push(format!("{:?} path stopped at δ = {} ({:?})", tr.side, tr.path.final_time(), tr.path.status));
        } else if tr.bound.as_ref().is_some_and(|b| !b.converged) {
            warnings.push(format!("{:?} endpoint misses the KKT tolerances", tr.side));
        }
        let p = model.dim();
        let values: Vec<f64> = tr.path.states.iter().map(|y| target.value(&y.rows(0, p).into_owned(), s)).collect();
        let side = format!("{:?}", tr.side).to_lowercase();
        for ((d, y), v) in tr.path.times.iter().zip(&tr.path.states).zip(&values) {
            table.push([side.clone(), num(*d), num(*v), num(y[p])]);
        }
        sides.push(json!({
            "side": tr.side,
            "status": tr.status,
            "delta1": tr.delta1,
            "bound": tr.bound.as_ref().map(bound_json),
            "delta": tr.path.times,
            "value": values,
            "nu": tr.nu_series().into_iter().map(|(_, nu)| nu).collect::<Vec<f64>>(),
            "theta": tr.path.states.iter().map(|y| y.rows(0, p).iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>(),
        }));
    }
    let results = json!({
        "target": desc,
        "level": level,
        "delta": delta,
        "estimate": target.value(&mle.theta_hat, s),
        "lower": lo.bound.as_ref().map(|b| b.value),
        "upper": hi.bound.as_ref().map(|b| b.value),
    });
    let details = json!({
        "paths": sides,
        "max_residual": lo.path.max_residual().max(hi.path.max_residual()),
    });
    Ok(Collected { results, details, warnings, table, seed: None })
}

fn run_mcmc_sample(fitted: &Fitted, mle: &MleFit, iterations: usize, thin: usize, seed: u64) -> Result<Collected> {
    let model = fitted.model();
    let trace = sample(model, mle, iterations, thin, seed)?;
    let mut warnings = Vec::new();
    let rate = trace.acceptance_rate.unwrap_or(f64::NAN);
    if !(0.1..=0.5).contains(&rate) {
        warnings.push(format!("acceptance rate {rate:.3} is far from the 0.234 target"));
    }
    let p = model.dim();
    let mut header: Vec<String> = (1..=p).map(|j| format!("theta_{j}")).collect();
    header.push("loglik".into());
    let mut table = Table { header, rows: Vec::new() };
    for (th, l) in trace.iterates.iter().zip(&trace.logliks) {
        table.push(th.iter().map(|v| num(*v)).chain(std::iter::once(num(*l))));
    }
    let results = json!({
        "iterations": trace.len(),
        "thin": thin,
        "acceptance_rate": trace.acceptance_rate,
        "parameters": model.names(),
        "trace": trace,
    });
    Ok(Collected { results, details: json!({}), warnings, table, seed: Some(seed) })
}

/// Render a report in the requested format.
pub fn render(outcome: &Outcome, format: OutputFormat) -> Result<String> {
    match format {
        OutputFormat::Json => Ok(serde_json::to_string_pretty(&outcome.report)? + "\n"),
        OutputFormat::Csv => outcome.table.to_csv(),
    }
}

/// Entry point of the `prolik` binary; returns the process exit code
/// (0 ok, 1 error, 2 finished with convergence warnings).
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(converged) => {
            if converged {
                0
            } else {
                2
            }
        }
        Err(e) => {
            let body = json!({ "schema": SCHEMA_VERSION, "error": { "code": e.code(), "message": e.to_string() } });
            eprintln!("{}", serde_json::to_string_pretty(&body).unwrap_or_else(|_| e.to_string()));
            1
        }
    }
}

fn execute(cli: &Cli) -> Result<bool> {
    let outcome = match cli.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Domain(format!("cannot start {n} worker threads: {e}")))?
            .install(|| run(cli))?,
        None => run(cli)?,
    };
    let text = render(&outcome, cli.format)?;
    match &cli.out {
        Some(path) => std::fs::write(path, text)?,
        None => match std::io::stdout().lock().write_all(text.as_bytes()) {
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
            r => r?,
        },
    }
    for w in &outcome.report.diagnostics.warnings {
        eprintln!("warning: {w}");
    }
    Ok(outcome.report.diagnostics.converged)
}

/// Write sampler iterates in the iterate CSV layout.
pub fn write_iterates<W: Write>(trace: &McmcTrace, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    write_trace(trace, &mut w)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_terms() {
        let f = Formula::parse("1 + year + x_2").unwrap();
        assert!(f.intercept);
        assert_eq!(f.columns, vec!["year", "x_2"]);
        assert!(!Formula::parse("0 + t").unwrap().intercept);
        assert!(Formula::parse("1 + log(x)").is_err());
        assert!(Formula::parse("x:z").is_err());
    }

    #[test]
    fn periods() {
        let p = parse_periods("2:1000:log:12").unwrap();
        assert_eq!(p.len(), 12);
        assert!((p[0] - 2.0).abs() < 1e-12 && (p[11] - 1000.0).abs() < 1e-9);
        assert_eq!(parse_periods("2:10:lin:5").unwrap(), vec![2.0, 4.0, 6.0, 8.0, 10.0]);
        assert_eq!(parse_periods("2:1000:log").unwrap().len(), 100);
        assert!(parse_periods("1:10:log").is_err());
        assert!(parse_periods("2:10:cubic").is_err());
    }
}
