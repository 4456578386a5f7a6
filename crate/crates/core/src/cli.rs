//! Command-line front end: `assign`, `analyze`, `quantile` and `simulate`.
//!
//! Exit codes: 0 success, 2 unreadable or unparsable input, 3 invalid
//! parameters or data, 4 no acceptable assignment within the attempt budget.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::balance::{build_design_matrices, mean_rows, threshold_for, BalanceCriterion, Fallback, Method, Rerandomizer};
use crate::design::{Assignment, PopulationInput, StratifiedPopulation};
use crate::error::Error;
use crate::inference::{
    analyze, ci_srrom_fixed_r2, v_pa, InferenceReport, LawConfig, NuTable, TruncatedGaussianLaw, DEFAULT_LAW_DRAWS,
    DEFAULT_LAW_SEED,
};
use crate::rng::stream_rng;
use crate::sim::{run_study_with_threads, Case, DgpConfig, MethodKind, PropensityMode, StudyConfig};

pub const SCHEMA_VERSION: u32 = 1;
/// Environment variable holding the default `--threads` value.
pub const THREADS_ENV: &str = "STRATRR_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Lib(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } | CliError::Parse(_) => 2,
            CliError::Lib(Error::AttemptsExhausted { .. }) => 4,
            CliError::Invalid(_) | CliError::Lib(_) => 3,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "stratrr", version, about = "Stratified rerandomization designs and inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw one accepted assignment for a unit table.
    Assign(AssignArgs),
    /// Point estimate and confidence interval from an assigned, observed table.
    Analyze(AnalyzeArgs),
    /// Quantiles of the limiting law of the estimator.
    Quantile(QuantileArgs),
    /// Run a replication study.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ThresholdMode {
    /// `p_{a_k} = p_a^{1/K}`.
    Fair,
    /// `p_{a_k} = p_a`.
    Unfair,
}

#[derive(Debug, Clone, Args)]
pub struct TableArgs {
    /// Input CSV with `unit_id`, `stratum` and covariate columns.
    #[arg(short, long)]
    pub input: PathBuf,
    /// Covariate columns (comma-separated); defaults to every `x_` column.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    /// Propensity: one number for all strata and/or `label=value` pairs.
    #[arg(long)]
    pub propensity: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct CriterionArgs {
    /// sr, srrom, srrsm or srrdm.
    #[arg(long, default_value = "srrom")]
    pub method: Method,
    /// Target acceptance probability.
    #[arg(long, default_value_t = 0.001)]
    pub pa: f64,
    /// SRRsM stratum thresholds.
    #[arg(long, value_enum, default_value_t = ThresholdMode::Fair)]
    pub srrsm_mode: ThresholdMode,
}

impl CriterionArgs {
    fn criterion(&self, p: usize, strata: usize) -> CliResult<BalanceCriterion> {
        Ok(match self.method {
            Method::Sr => BalanceCriterion::sr(),
            Method::Srrom => BalanceCriterion::srrom(p, self.pa)?,
            Method::Srrdm => BalanceCriterion::srrdm(p, self.pa)?,
            Method::Srrsm => match self.srrsm_mode {
                ThresholdMode::Fair => BalanceCriterion::srrsm_fair(p, self.pa, strata)?,
                ThresholdMode::Unfair => BalanceCriterion::srrsm_unfair(p, self.pa, strata)?,
            },
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct AssignArgs {
    #[command(flatten)]
    pub table: TableArgs,
    #[command(flatten)]
    pub criterion: CriterionArgs,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = crate::balance::DEFAULT_MAX_ATTEMPTS)]
    pub max_attempts: u64,
    /// Draw plain SR instead of failing when the budget runs out.
    #[arg(long)]
    pub fallback_sr: bool,
    /// Write covariates centered at their stratum means.
    #[arg(long)]
    pub center: bool,
    /// Output CSV: the input rows plus a `treated` column.
    #[arg(short, long)]
    pub output: PathBuf,
    /// Sidecar JSON; defaults to the output path with `.json` appended.
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct LawArgs {
    /// Monte Carlo draws for law quantiles.
    #[arg(long, default_value_t = DEFAULT_LAW_DRAWS)]
    pub draws: usize,
    #[arg(long, default_value_t = DEFAULT_LAW_SEED)]
    pub law_seed: u64,
}

impl LawArgs {
    fn config(&self) -> LawConfig {
        LawConfig { draws: self.draws, seed: self.law_seed }
    }
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub table: TableArgs,
    #[command(flatten)]
    pub criterion: CriterionArgs,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// SRRoM only: use this `R²` instead of the estimate.
    #[arg(long)]
    pub r2: Option<f64>,
    #[command(flatten)]
    pub law: LawArgs,
    /// JSON report path; stdout when absent.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct QuantileArgs {
    /// Covariate dimension.
    #[arg(short, long)]
    pub p: usize,
    /// Acceptance probabilities, one per truncated term.
    #[arg(long, value_delimiter = ',', conflicts_with = "a")]
    pub pa: Option<Vec<f64>>,
    /// Thresholds, one per truncated term.
    #[arg(long, value_delimiter = ',')]
    pub a: Option<Vec<f64>>,
    /// `R²`, one per term.
    #[arg(long, value_delimiter = ',', required = true)]
    pub r2: Vec<f64>,
    /// Stratum weights `π_k` for a mixture; equal by default.
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    /// Stratum variances `Σ_[k]ττ` for a mixture; 1 by default.
    #[arg(long, value_delimiter = ',')]
    pub sigma: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.025, 0.975])]
    pub xi: Vec<f64>,
    #[command(flatten)]
    pub law: LawArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// TOML study configuration.
    #[arg(short, long, required_unless_present = "paper_scale")]
    pub config: Option<PathBuf>,
    /// Start from a full-scale case (case1 to case4) instead of a file.
    #[arg(long, value_parser = parse_case)]
    pub paper_scale: Option<Case>,
    /// `key=value` overrides: K, nk, reps, seed, pa, alpha, propensity,
    /// methods, draws, p, noise_var, redraw.
    pub overrides: Vec<String>,
    /// Worker threads; falls back to the environment, then to all cores.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Also write per-replication records to `replications.csv`.
    #[arg(long)]
    pub records: bool,
    #[arg(short, long)]
    pub out: PathBuf,
}

fn parse_case(s: &str) -> std::result::Result<Case, String> {
    let n = s
        .trim_start_matches("case")
        .parse::<u8>()
        .map_err(|_| format!("expected case1..case4, got {s:?}"))?;
    Case::from_number(n).map_err(|e| e.to_string())
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code; diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: &Command) -> CliResult<()> {
    match cmd {
        Command::Assign(a) => cmd_assign(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Quantile(a) => cmd_quantile(a),
        Command::Simulate(a) => cmd_simulate(a),
    }
}

/// A parsed unit table.
#[derive(Debug, Clone)]
pub struct UnitTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub unit_ids: Vec<String>,
    pub covariate_names: Vec<String>,
    pub covariate_idx: Vec<usize>,
    pub labels: Vec<String>,
    pub stratum_of: Vec<usize>,
    pub covariates: Vec<f64>,
    pub treated: Option<Vec<bool>>,
    pub outcome: Option<Vec<f64>>,
}

fn parse_f64(s: &str, row: usize, col: &str) -> CliResult<f64> {
    s.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| CliError::Parse(format!("row {row}, column {col}: {s:?} is not a finite number")))
}

impl UnitTable {
    pub fn read(path: &Path, covariates: Option<&[String]>) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|source| CliError::Io { path: path.into(), source })?;
        Self::parse(&text, covariates)
    }

    pub fn parse(text: &str, covariates: Option<&[String]>) -> CliResult<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| CliError::Parse(e.to_string()))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let find = |name: &str| headers.iter().position(|h| h == name);
        let id_col = find("unit_id").ok_or_else(|| CliError::Parse("missing unit_id column".into()))?;
        let stratum_col = find("stratum").ok_or_else(|| CliError::Parse("missing stratum column".into()))?;
        let covariate_names: Vec<String> = match covariates {
            Some(list) => list.to_vec(),
            None => headers.iter().filter(|h| h.starts_with("x_")).cloned().collect(),
        };
        if covariate_names.is_empty() {
            return Err(CliError::Parse("no covariate columns (x_* or --covariates)".into()));
        }
        let covariate_idx = covariate_names
            .iter()
            .map(|c| find(c).ok_or_else(|| CliError::Parse(format!("missing covariate column {c}"))))
            .collect::<CliResult<Vec<_>>>()?;
        let treated_col = find("treated");
        let outcome_col = find("outcome");

        let mut t = UnitTable {
            headers: headers.clone(),
            rows: Vec::new(),
            unit_ids: Vec::new(),
            covariate_names,
            covariate_idx,
            labels: Vec::new(),
            stratum_of: Vec::new(),
            covariates: Vec::new(),
            treated: treated_col.map(|_| Vec::new()),
            outcome: outcome_col.map(|_| Vec::new()),
        };
        let mut label_idx: HashMap<String, usize> = HashMap::new();
        for (r, rec) in rdr.records().enumerate() {
            let row = r + 2;
            let rec = rec.map_err(|e| CliError::Parse(e.to_string()))?;
            if rec.len() != headers.len() {
                return Err(CliError::Parse(format!("row {row}: {} fields, header has {}", rec.len(), headers.len())));
            }
            let fields: Vec<String> = rec.iter().map(|f| f.trim().to_string()).collect();
            t.unit_ids.push(fields[id_col].clone());
            let label = fields[stratum_col].clone();
            let next = label_idx.len();
            let k = *label_idx.entry(label.clone()).or_insert_with(|| {
                t.labels.push(label);
                next
            });
            t.stratum_of.push(k);
            for (&j, name) in t.covariate_idx.iter().zip(&t.covariate_names) {
                t.covariates.push(parse_f64(&fields[j], row, name)?);
            }
            if let (Some(j), Some(v)) = (treated_col, t.treated.as_mut()) {
                v.push(match fields[j].as_str() {
                    "1" => true,
                    "0" => false,
                    other => return Err(CliError::Parse(format!("row {row}, column treated: {other:?} is not 0 or 1"))),
                });
            }
            if let (Some(j), Some(v)) = (outcome_col, t.outcome.as_mut()) {
                v.push(parse_f64(&fields[j], row, "outcome")?);
            }
            t.rows.push(fields);
        }
        if t.rows.is_empty() {
            return Err(CliError::Parse("no data rows".into()));
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.covariate_names.len()
    }

    fn stratum_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.labels.len()];
        self.stratum_of.iter().for_each(|&k| sizes[k] += 1);
        sizes
    }

    /// Propensities from `spec`, or from the treated counts when `spec` is
    /// absent and a `treated` column exists, else 0.5.
    pub fn propensities(&self, spec: Option<&str>) -> CliResult<Vec<f64>> {
        let k = self.labels.len();
        if let Some(spec) = spec {
            let mut default = None;
            let mut by_label = HashMap::new();
            for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                match item.split_once('=') {
                    Some((l, v)) => {
                        let v = v.trim().parse::<f64>().map_err(|_| CliError::Invalid(format!("bad propensity {item:?}")))?;
                        by_label.insert(l.trim().to_string(), v);
                    }
                    None => {
                        default = Some(item.parse::<f64>().map_err(|_| CliError::Invalid(format!("bad propensity {item:?}")))?)
                    }
                }
            }
            if let Some(unknown) = by_label.keys().find(|l| !self.labels.contains(l)) {
                return Err(CliError::Invalid(format!("propensity given for unknown stratum {unknown}")));
            }
            return self
                .labels
                .iter()
                .map(|l| {
                    by_label
                        .get(l)
                        .copied()
                        .or(default)
                        .ok_or_else(|| CliError::Invalid(format!("no propensity for stratum {l}")))
                })
                .collect();
        }
        match &self.treated {
            Some(z) => {
                let sizes = self.stratum_sizes();
                let mut n1 = vec![0usize; k];
                for (i, &t) in z.iter().enumerate() {
                    n1[self.stratum_of[i]] += t as usize;
                }
                Ok(n1.iter().zip(&sizes).map(|(&a, &b)| a as f64 / b as f64).collect())
            }
            None => Ok(vec![0.5; k]),
        }
    }

    pub fn population(&self, propensity: Vec<f64>) -> CliResult<StratifiedPopulation> {
        let input = PopulationInput {
            dim: self.dim(),
            covariates: self.covariates.clone(),
            stratum_of: self.stratum_of.clone(),
            labels: self.labels.clone(),
            propensity,
            potential: None,
            observed: self.outcome.clone(),
        };
        Ok(input.build()?)
    }

    fn write_with_treated(&self, path: &Path, z: &[bool], centered: Option<&[f64]>) -> CliResult<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = self.headers.clone();
        header.push("treated".into());
        w.write_record(&header).map_err(|e| CliError::Parse(e.to_string()))?;
        let p = self.dim();
        for (i, row) in self.rows.iter().enumerate() {
            let mut out = row.clone();
            if let Some(x) = centered {
                for (j, &col) in self.covariate_idx.iter().enumerate() {
                    out[col] = x[i * p + j].to_string();
                }
            }
            out.push(if z[i] { "1" } else { "0" }.into());
            w.write_record(&out).map_err(|e| CliError::Parse(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Parse(e.to_string()))?;
        write_file(path, &bytes)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|source| CliError::Io { path: path.into(), source })
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Parse(e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn manifest(command: &str, settings: Value) -> Value {
    json!({
        "schema": SCHEMA_VERSION,
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "settings": settings,
    })
}

/// Covariates minus their stratum means, row-major.
fn centered_covariates(pop: &StratifiedPopulation) -> Vec<f64> {
    let p = pop.dim();
    let mut x = pop.covariates().to_vec();
    for s in pop.strata() {
        let m = mean_rows(pop, &s.units);
        for &i in &s.units {
            x[i * p..(i + 1) * p].iter_mut().zip(&m).for_each(|(v, mj)| *v -= mj);
        }
    }
    x
}

fn cmd_assign(args: &AssignArgs) -> CliResult<()> {
    let table = UnitTable::read(&args.table.input, args.table.covariates.as_deref())?;
    if table.treated.is_some() {
        return Err(CliError::Invalid("input already has a treated column".into()));
    }
    let props = table.propensities(args.table.propensity.as_deref())?;
    let pop = table.population(props.clone())?;
    let dm = build_design_matrices(&pop)?;
    let fallback = if args.fallback_sr { Fallback::FallBackToSr } else { Fallback::ErrorOut };
    let crit = args
        .criterion
        .criterion(pop.dim(), pop.num_strata())?
        .with_max_attempts(args.max_attempts)
        .with_fallback(fallback);
    let rr = Rerandomizer::new(&pop, &dm, &crit)?;
    let mut rng = stream_rng(args.seed, 0);
    let out = rr.draw(&mut rng)?;

    let centered = args.center.then(|| centered_covariates(&pop));
    table.write_with_treated(&args.output, &out.assignment.z, centered.as_deref())?;

    let mut notes: Vec<String> = pop.warnings().iter().map(ToString::to_string).collect();
    for k in rr.infeasible_strata() {
        notes.push(format!("stratum {}: no assignment meets its threshold", pop.stratum(k).label));
    }
    if out.fell_back {
        notes.push("attempt budget exhausted; returned a stratified randomization".into());
    }
    let sidecar = json!({
        "manifest": manifest("assign", json!({
            "input": args.table.input,
            "output": args.output,
            "covariates": table.covariate_names,
            "strata": table.labels,
            "propensity": props,
            "method": crit.method,
            "pa": args.criterion.pa,
            "srrsm_mode": format!("{:?}", args.criterion.srrsm_mode).to_lowercase(),
            "seed": args.seed,
            "max_attempts": args.max_attempts,
            "fallback": crit.fallback,
            "center": args.center,
        })),
        "thresholds": crit.thresholds,
        "target_acceptance": crit.target_acceptance,
        "statistics": out.statistics,
        "attempts": out.attempts,
        "stratum_attempts": out.stratum_attempts,
        "fell_back": out.fell_back,
        "treated": pop.total_treated(),
        "notes": notes,
    });
    let path = args.sidecar.clone().unwrap_or_else(|| {
        let mut s = args.output.clone().into_os_string();
        s.push(".json");
        s.into()
    });
    write_json(&path, &sidecar)
}

/// The report `analyze` would produce for an in-memory table.
pub fn analyze_table(table: &UnitTable, args: &AnalyzeArgs) -> CliResult<InferenceReport> {
    let z = table.treated.clone().ok_or_else(|| CliError::Invalid("analyze needs a treated column".into()))?;
    let y = table.outcome.clone().ok_or_else(|| CliError::Invalid("analyze needs an outcome column".into()))?;
    let props = table.propensities(args.table.propensity.as_deref())?;
    let pop = table.population(props)?;
    let assignment = Assignment::new(z);
    pop.check_assignment(&assignment)?;
    let dm = build_design_matrices(&pop)?;
    let crit = args.criterion.criterion(pop.dim(), pop.num_strata())?;
    let law = args.law.config();
    match (args.r2, crit.method) {
        (Some(r2), Method::Srrom) => {
            let t = NuTable::new(pop.dim(), &crit.thresholds, law)?;
            Ok(ci_srrom_fixed_r2(&pop, &dm, &assignment, &y, args.alpha, &t, r2)?)
        }
        (Some(_), _) => Err(CliError::Invalid("--r2 applies to srrom only".into())),
        (None, _) => Ok(analyze(&pop, &dm, &assignment, &y, &crit, args.alpha, law)?),
    }
}

fn cmd_analyze(args: &AnalyzeArgs) -> CliResult<()> {
    let table = UnitTable::read(&args.table.input, args.table.covariates.as_deref())?;
    let report = analyze_table(&table, args)?;
    let out = json!({
        "manifest": manifest("analyze", json!({
            "input": args.table.input,
            "covariates": table.covariate_names,
            "strata": table.labels,
            "method": args.criterion.method,
            "pa": args.criterion.pa,
            "srrsm_mode": format!("{:?}", args.criterion.srrsm_mode).to_lowercase(),
            "alpha": args.alpha,
            "r2_override": args.r2,
            "law_draws": args.law.draws,
            "law_seed": args.law.law_seed,
        })),
        "report": report,
    });
    match &args.output {
        Some(p) => write_json(p, &out),
        None => {
            println!("{}", serde_json::to_string_pretty(&out).map_err(|e| CliError::Parse(e.to_string()))?);
            Ok(())
        }
    }
}

/// The JSON document `quantile` prints.
pub fn quantile_report(args: &QuantileArgs) -> CliResult<Value> {
    let p = args.p;
    if p == 0 {
        return Err(CliError::Invalid("p must be positive".into()));
    }
    let thresholds: Vec<f64> = match (&args.pa, &args.a) {
        (Some(pa), _) => pa.iter().map(|&t| threshold_for(p, t)).collect::<Result<_, _>>()?,
        (None, Some(a)) => a.clone(),
        (None, None) => return Err(CliError::Invalid("give --pa or --a".into())),
    };
    if let Some(bad) = thresholds.iter().find(|a| !(**a > 0.0)) {
        return Err(CliError::Invalid(format!("threshold must be positive, got {bad}")));
    }
    let k = thresholds.len();
    if args.r2.len() != k {
        return Err(CliError::Invalid(format!("{k} threshold(s) need {k} r2 value(s)")));
    }
    if let Some(bad) = args.xi.iter().find(|x| !(**x > 0.0 && **x < 1.0)) {
        return Err(CliError::Invalid(format!("xi must be in (0, 1), got {bad}")));
    }
    let law = if k == 1 && args.weights.is_none() && args.sigma.is_none() {
        TruncatedGaussianLaw::overall(args.r2[0], p, thresholds[0], args.law.config())?
    } else {
        let weights = args.weights.clone().unwrap_or_else(|| vec![1.0 / k as f64; k]);
        let sigma = args.sigma.clone().unwrap_or_else(|| vec![1.0; k]);
        if args.r2.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(CliError::Invalid("r2 values must be in [0, 1]".into()));
        }
        TruncatedGaussianLaw::mixture(p, &weights, &sigma, &args.r2, &thresholds, args.law.config())?
    };
    let quantiles = law.quantiles(&args.xi)?;
    let v: Vec<f64> = thresholds.iter().map(|&a| v_pa(p, a)).collect::<Result<_, _>>()?;
    let pa: Vec<f64> = thresholds
        .iter()
        .map(|&a| if a.is_infinite() { 1.0 } else { crate::numeric::chi2_cdf(p as u32, a).unwrap_or(f64::NAN) })
        .collect();
    Ok(json!({
        "manifest": manifest("quantile", json!({
            "p": p,
            "pa": args.pa,
            "a": args.a,
            "r2": args.r2,
            "weights": args.weights,
            "sigma": args.sigma,
            "xi": args.xi,
            "law_draws": args.law.draws,
            "law_seed": args.law.law_seed,
        })),
        "thresholds": thresholds,
        "acceptance": pa,
        "v_pa": v,
        "variance": law.variance()?,
        "quantiles": quantiles,
    }))
}

fn cmd_quantile(args: &QuantileArgs) -> CliResult<()> {
    let doc = quantile_report(args)?;
    println!("{}", serde_json::to_string_pretty(&doc).map_err(|e| CliError::Parse(e.to_string()))?);
    Ok(())
}

fn parse_kv<T: std::str::FromStr>(key: &str, v: &str) -> CliResult<T> {
    v.parse().map_err(|_| CliError::Invalid(format!("bad value for {key}: {v:?}")))
}

/// Applies one `key=value` override to a study configuration.
pub fn apply_override(cfg: &mut StudyConfig, item: &str) -> CliResult<()> {
    let (key, v) = item
        .split_once('=')
        .ok_or_else(|| CliError::Invalid(format!("override {item:?} is not key=value")))?;
    let dgp = &mut cfg.dgp;
    match key.trim() {
        "K" | "k" => {
            let k: usize = parse_kv(key, v)?;
            match dgp.case {
                Case::ManySmall => dgp.stratum_sizes = vec![dgp.stratum_sizes.first().copied().unwrap_or(10); k],
                Case::ManySmallPlusTwoLarge => {
                    let small = dgp.stratum_sizes.first().copied().unwrap_or(10);
                    let mut s = vec![small; k];
                    s.extend([100, 100]);
                    dgp.stratum_sizes = s;
                }
                _ => return Err(CliError::Invalid("cases 3 and 4 have K = 2".into())),
            }
        }
        "nk" => {
            let nk: usize = parse_kv(key, v)?;
            match dgp.case {
                Case::ManySmall => dgp.stratum_sizes.iter_mut().for_each(|s| *s = nk),
                Case::ManySmallPlusTwoLarge => {
                    let small = dgp.stratum_sizes.len().saturating_sub(2);
                    dgp.stratum_sizes[..small].iter_mut().for_each(|s| *s = nk);
                }
                _ => dgp.stratum_sizes = vec![nk, nk],
            }
        }
        "p" => dgp.p = parse_kv(key, v)?,
        "noise_var" => dgp.noise_var = parse_kv(key, v)?,
        "seed" => dgp.seed = parse_kv(key, v)?,
        "linear_only" => dgp.linear_only = parse_kv(key, v)?,
        "propensity" => {
            dgp.propensity = match v {
                "equal" => PropensityMode::Equal,
                "unequal" => PropensityMode::Unequal,
                _ => return Err(CliError::Invalid(format!("propensity must be equal or unequal, got {v:?}"))),
            }
        }
        "reps" => cfg.reps = parse_kv(key, v)?,
        "pa" => cfg.pa = parse_kv(key, v)?,
        "alpha" => cfg.alpha = parse_kv(key, v)?,
        "draws" => cfg.law.draws = parse_kv(key, v)?,
        "law_seed" => cfg.law.seed = parse_kv(key, v)?,
        "max_attempts" => cfg.max_attempts = parse_kv(key, v)?,
        "redraw" => cfg.redraw_population = parse_kv(key, v)?,
        "methods" => {
            cfg.methods = v
                .split(['+', ';'])
                .map(|m| m.parse::<MethodKind>())
                .collect::<Result<_, _>>()?
        }
        other => return Err(CliError::Invalid(format!("unknown override key {other:?}"))),
    }
    Ok(())
}

/// Study configuration from a file or a full-scale preset plus overrides.
pub fn study_config(args: &SimulateArgs) -> CliResult<StudyConfig> {
    let mut cfg = match (&args.paper_scale, &args.config) {
        (Some(case), _) => {
            let first = match case {
                Case::ManySmall => 25,
                Case::ManySmallPlusTwoLarge => 10,
                _ => 100,
            };
            StudyConfig::new(DgpConfig::paper(*case, first)?).with_reps(10_000).with_pa(0.001)
        }
        (None, Some(path)) => {
            let text = fs::read_to_string(path).map_err(|source| CliError::Io { path: path.clone(), source })?;
            toml::from_str(&text).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?
        }
        (None, None) => return Err(CliError::Invalid("give --config or --paper-scale".into())),
    };
    for o in &args.overrides {
        apply_override(&mut cfg, o)?;
    }
    if let Some(case) = args.paper_scale {
        let size = match case {
            Case::ManySmall => cfg.dgp.num_strata(),
            Case::ManySmallPlusTwoLarge => cfg.dgp.num_strata() - 2,
            _ => cfg.dgp.stratum_sizes[0],
        };
        let preset = DgpConfig::paper(case, size)?;
        if preset.stratum_sizes != cfg.dgp.stratum_sizes || cfg.dgp.p != 8 || cfg.dgp.noise_var != 10.0 {
            return Err(CliError::Invalid(format!("overrides leave the full-scale design of case {}", case.number())));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_threads(flag: Option<usize>) -> CliResult<usize> {
    if let Some(t) = flag {
        return Ok(t.max(1));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| CliError::Invalid(format!("{THREADS_ENV}={v:?} is not a count"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn cmd_simulate(args: &SimulateArgs) -> CliResult<()> {
    let mut cfg = study_config(args)?;
    if args.records {
        cfg.record_replications = true;
    }
    let threads = resolve_threads(args.threads)?;
    let res = run_study_with_threads(&cfg, threads)?;
    fs::create_dir_all(&args.out).map_err(|source| CliError::Io { path: args.out.clone(), source })?;

    let thresholds = {
        let p = cfg.dgp.p;
        let k = cfg.dgp.num_strata();
        json!({
            "srrom": threshold_for(p, cfg.pa).ok(),
            "srrsm_fair": threshold_for(p, cfg.pa.powf(1.0 / k as f64)).ok(),
            "srrsm_unfair": threshold_for(p, cfg.pa).ok(),
        })
    };
    let man = manifest("simulate", json!({
        "config": args.config,
        "paper_scale": args.paper_scale.map(Case::number),
        "overrides": args.overrides,
        "study": cfg,
        "K": cfg.dgp.num_strata(),
        "n": cfg.dgp.n(),
        "propensities": cfg.dgp.propensities(),
        "thresholds": thresholds,
    }));
    write_json(&args.out.join("manifest.json"), &man)?;
    write_json(
        &args.out.join("metrics.json"),
        &json!({
            "manifest": man,
            "n": res.n,
            "tau": res.tau,
            "metrics": res.metrics,
            "theory": res.theory,
        }),
    )?;
    let table = res.table();
    write_file(&args.out.join("metrics.txt"), table.as_bytes())?;
    if cfg.record_replications {
        write_file(&args.out.join("replications.csv"), res.records_csv()?.as_bytes())?;
    }
    print!("{table}");
    Ok(())
}
