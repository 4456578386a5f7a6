//! Simulation studies: data-generating process, replication engine and
//! evaluation metrics (bias, SD, RMSE, CI length, coverage).
//!
//! The population is generated once per study and held fixed, so all
//! replication-to-replication randomness comes from the assignment.
//! Replication `r` of method `m` reads its own RNG stream, which makes
//! results independent of thread count and scheduling.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::balance::{build_design_matrices, threshold_for, BalanceCriterion, DesignMatrices, Method, Rerandomizer};
use crate::design::{PopulationInput, PotentialOutcomes, StratifiedPopulation};
use crate::error::{Error, Result};
use crate::inference::{
    ci_sr, ci_srrom_with_table, ci_srrsm_with_table, stratified_diff_in_means, theoretical_variances, LawConfig,
    NuTable, TheoreticalVariances,
};
use crate::numeric::SpdMatrix;
use crate::rng::{derive_seed, stream_rng};

const POPULATION_SALT: u64 = 0x504f_5055;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    /// Many strata of size 10.
    ManySmall,
    /// Many strata of size 10 followed by two strata of size 100.
    ManySmallPlusTwoLarge,
    /// Two large strata sharing one set of outcome coefficients.
    TwoLargeHomogeneous,
    /// Two large strata with independently drawn coefficients.
    TwoLargeHeterogeneous,
}

impl Case {
    pub fn number(self) -> u8 {
        match self {
            Case::ManySmall => 1,
            Case::ManySmallPlusTwoLarge => 2,
            Case::TwoLargeHomogeneous => 3,
            Case::TwoLargeHeterogeneous => 4,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Case::ManySmall),
            2 => Ok(Case::ManySmallPlusTwoLarge),
            3 => Ok(Case::TwoLargeHomogeneous),
            4 => Ok(Case::TwoLargeHeterogeneous),
            _ => Err(Error::Config(format!("case must be 1 to 4, got {n}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityMode {
    /// 0.5 everywhere.
    Equal,
    /// 0.4 for the first half of the strata (1-based `k ≤ K/2`), 0.6 after.
    Unequal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub case: Case,
    pub stratum_sizes: Vec<usize>,
    pub propensity: PropensityMode,
    /// Covariate dimension.
    pub p: usize,
    /// Variance of the outcome disturbances.
    pub noise_var: f64,
    pub seed: u64,
    /// Zero the `exp(Xᵀβ_z2)` term, leaving a linear outcome model.
    #[serde(default)]
    pub linear_only: bool,
}

impl DgpConfig {
    fn with_sizes(case: Case, stratum_sizes: Vec<usize>) -> Self {
        Self { case, stratum_sizes, propensity: PropensityMode::Equal, p: 8, noise_var: 10.0, seed: 2022, linear_only: false }
    }

    /// `K` strata of size 10.
    pub fn case1(k: usize) -> Self {
        Self::with_sizes(Case::ManySmall, vec![10; k])
    }

    /// `k_small` strata of size 10, then two of size 100.
    pub fn case2(k_small: usize) -> Self {
        let mut sizes = vec![10; k_small];
        sizes.extend([100, 100]);
        Self::with_sizes(Case::ManySmallPlusTwoLarge, sizes)
    }

    pub fn case3(nk: usize) -> Self {
        Self::with_sizes(Case::TwoLargeHomogeneous, vec![nk, nk])
    }

    pub fn case4(nk: usize) -> Self {
        Self::with_sizes(Case::TwoLargeHeterogeneous, vec![nk, nk])
    }

    /// A paper-scale case with its size parameter: `K` for Cases 1 and 2
    /// (small-strata count for Case 2), `n_[k]` for Cases 3 and 4.
    pub fn paper(case: Case, size: usize) -> Result<Self> {
        let allowed: &[usize] = match case {
            Case::ManySmall => &[25, 50, 100],
            Case::ManySmallPlusTwoLarge => &[10, 20, 50],
            Case::TwoLargeHomogeneous | Case::TwoLargeHeterogeneous => &[100, 200, 500],
        };
        if !allowed.contains(&size) {
            return Err(Error::Config(format!("case {} takes one of {allowed:?}, got {size}", case.number())));
        }
        Ok(match case {
            Case::ManySmall => Self::case1(size),
            Case::ManySmallPlusTwoLarge => Self::case2(size),
            Case::TwoLargeHomogeneous => Self::case3(size),
            Case::TwoLargeHeterogeneous => Self::case4(size),
        })
    }

    pub fn with_propensity(mut self, mode: PropensityMode) -> Self {
        self.propensity = mode;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn num_strata(&self) -> usize {
        self.stratum_sizes.len()
    }

    pub fn n(&self) -> usize {
        self.stratum_sizes.iter().sum()
    }

    pub fn propensities(&self) -> Vec<f64> {
        let k = self.num_strata();
        (1..=k)
            .map(|j| match self.propensity {
                PropensityMode::Equal => 0.5,
                PropensityMode::Unequal if 2 * j <= k => 0.4,
                PropensityMode::Unequal => 0.6,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stratum_sizes.is_empty() || self.p == 0 {
            return Err(Error::Config("need at least one stratum and one covariate".into()));
        }
        if !(self.noise_var >= 0.0 && self.noise_var.is_finite()) {
            return Err(Error::Config(format!("noise_var must be non-negative, got {}", self.noise_var)));
        }
        if matches!(self.case, Case::TwoLargeHomogeneous | Case::TwoLargeHeterogeneous) && self.num_strata() != 2 {
            return Err(Error::Config("cases 3 and 4 have exactly two strata".into()));
        }
        Ok(())
    }
}

/// `t₃` as `N / √(χ²₃/3)` with `χ²₃` a sum of three squared normals.
fn t3<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    let chi: f64 = (0..3).map(|_| rng.sample::<f64, _>(StandardNormal).powi(2)).sum();
    z / (chi / 3.0).sqrt()
}

struct Coefficients {
    b11: Vec<f64>,
    b12: Vec<f64>,
    b01: Vec<f64>,
    b02: Vec<f64>,
}

fn draw_coefficients<R: Rng + ?Sized>(p: usize, linear_only: bool, rng: &mut R) -> Coefficients {
    let mut c = Coefficients { b11: vec![0.0; p], b12: vec![0.0; p], b01: vec![0.0; p], b02: vec![0.0; p] };
    for j in 0..p {
        c.b11[j] = t3(rng);
        c.b12[j] = 0.1 * t3(rng);
        c.b01[j] = c.b11[j] + t3(rng);
        c.b02[j] = c.b12[j] + 0.1 * t3(rng);
    }
    if linear_only {
        c.b12.iter_mut().chain(c.b02.iter_mut()).for_each(|v| *v = 0.0);
    }
    c
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Realizes covariates and both potential outcomes once for `cfg.seed`:
/// `X ~ N(0, Σ)` with `Σ_ij = 0.5^{|i−j|}`,
/// `Y(z) = Xᵀβ_z1 + exp(Xᵀβ_z2) + ε(z)`, `ε(z) ~ N(0, noise_var)`.
pub fn generate_population(cfg: &DgpConfig) -> Result<StratifiedPopulation> {
    cfg.validate()?;
    let p = cfg.p;
    let n = cfg.n();
    let mut rng = stream_rng(derive_seed(cfg.seed, POPULATION_SALT), 0);

    let per_stratum = cfg.case == Case::TwoLargeHeterogeneous;
    let coefs: Vec<Coefficients> = if per_stratum {
        (0..cfg.num_strata()).map(|_| draw_coefficients(p, cfg.linear_only, &mut rng)).collect()
    } else {
        vec![draw_coefficients(p, cfg.linear_only, &mut rng)]
    };

    let ar = SpdMatrix::from_upper(p, |i, j| 0.5f64.powi((j - i) as i32));
    let chol = ar.cholesky()?;
    let sd = cfg.noise_var.sqrt();
    let mut x = Vec::with_capacity(n * p);
    let mut y1 = Vec::with_capacity(n);
    let mut y0 = Vec::with_capacity(n);
    let mut g = vec![0.0; p];
    for (k, &size) in cfg.stratum_sizes.iter().enumerate() {
        let c = &coefs[if per_stratum { k } else { 0 }];
        for _ in 0..size {
            g.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            let xi = chol.mul_lower(&g);
            let e1: f64 = rng.sample(StandardNormal);
            let e0: f64 = rng.sample(StandardNormal);
            let exp1 = if cfg.linear_only { 0.0 } else { dot(&xi, &c.b12).exp() };
            let exp0 = if cfg.linear_only { 0.0 } else { dot(&xi, &c.b02).exp() };
            y1.push(dot(&xi, &c.b11) + exp1 + sd * e1);
            y0.push(dot(&xi, &c.b01) + exp0 + sd * e0);
            x.extend_from_slice(&xi);
        }
    }
    PopulationInput::from_sizes(&cfg.stratum_sizes, cfg.propensities(), p, x)
        .with_potential(PotentialOutcomes { treated: y1, control: y0 })
        .build()
}

/// The designs compared in a study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Sr,
    Srrom,
    /// SRRsM with `p_{a_k} = p_a^{1/K}`.
    SrrsmFair,
    /// SRRsM with `p_{a_k} = p_a`.
    SrrsmUnfair,
    Srrdm,
}

impl MethodKind {
    pub fn label(self) -> &'static str {
        match self {
            MethodKind::Sr => "SR",
            MethodKind::Srrom => "SRRoM",
            MethodKind::SrrsmFair => "SRRsM(f)",
            MethodKind::SrrsmUnfair => "SRRsM(u)",
            MethodKind::Srrdm => "SRRdM",
        }
    }

    pub fn criterion(self, p: usize, strata: usize, pa: f64, max_attempts: u64) -> Result<BalanceCriterion> {
        let c = match self {
            MethodKind::Sr => return Ok(BalanceCriterion::sr()),
            MethodKind::Srrom => BalanceCriterion::srrom(p, pa)?,
            MethodKind::SrrsmFair => BalanceCriterion::srrsm_fair(p, pa, strata)?,
            MethodKind::SrrsmUnfair => BalanceCriterion::srrsm_unfair(p, pa, strata)?,
            MethodKind::Srrdm => BalanceCriterion::srrdm(p, pa)?,
        };
        Ok(c.with_max_attempts(max_attempts))
    }
}

impl std::str::FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "sr" => Ok(MethodKind::Sr),
            "srrom" => Ok(MethodKind::Srrom),
            "srrsm_fair" | "srrsm(f)" | "srrsm" => Ok(MethodKind::SrrsmFair),
            "srrsm_unfair" | "srrsm(u)" => Ok(MethodKind::SrrsmUnfair),
            "srrdm" => Ok(MethodKind::Srrdm),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

fn default_methods() -> Vec<MethodKind> {
    vec![MethodKind::Sr, MethodKind::Srrom, MethodKind::SrrsmFair, MethodKind::SrrsmUnfair]
}

fn default_reps() -> usize {
    2000
}

fn default_alpha() -> f64 {
    0.05
}

fn default_pa() -> f64 {
    0.001
}

fn default_law() -> LawConfig {
    LawConfig { draws: 50_000, seed: crate::inference::DEFAULT_LAW_SEED }
}

fn default_max_attempts() -> u64 {
    crate::balance::DEFAULT_MAX_ATTEMPTS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub dgp: DgpConfig,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodKind>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Target acceptance probability `p_a`.
    #[serde(default = "default_pa")]
    pub pa: f64,
    #[serde(default = "default_law")]
    pub law: LawConfig,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u64,
    /// Draw a fresh population for every replication.
    #[serde(default)]
    pub redraw_population: bool,
    /// Keep per-replication records in the result.
    #[serde(default)]
    pub record_replications: bool,
}

impl StudyConfig {
    pub fn new(dgp: DgpConfig) -> Self {
        Self {
            dgp,
            methods: default_methods(),
            reps: default_reps(),
            alpha: default_alpha(),
            pa: default_pa(),
            law: default_law(),
            max_attempts: default_max_attempts(),
            redraw_population: false,
            record_replications: false,
        }
    }

    pub fn with_methods(mut self, methods: &[MethodKind]) -> Self {
        self.methods = methods.to_vec();
        self
    }

    pub fn with_reps(mut self, reps: usize) -> Self {
        self.reps = reps;
        self
    }

    pub fn with_pa(mut self, pa: f64) -> Self {
        self.pa = pa;
        self
    }

    pub fn with_law(mut self, law: LawConfig) -> Self {
        self.law = law;
        self
    }

    pub fn recording(mut self) -> Self {
        self.record_replications = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        if self.reps == 0 {
            return Err(Error::Config("reps must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        if !(self.pa > 0.0 && self.pa <= 1.0) {
            return Err(Error::Config(format!("pa must be in (0, 1], got {}", self.pa)));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods requested".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub rep: usize,
    pub method: String,
    pub tau: f64,
    pub tau_hat: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub attempts: u64,
    pub fell_back: bool,
}

impl ReplicationRecord {
    pub fn error(&self) -> f64 {
        self.tau_hat - self.tau
    }

    pub fn covered(&self) -> Option<bool> {
        Some(self.lower? <= self.tau && self.tau <= self.upper?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationMetrics {
    pub method: String,
    pub reps: usize,
    pub bias: f64,
    /// Sample standard deviation of `τ̂` (divisor `reps − 1`).
    pub sd: f64,
    pub rmse: f64,
    pub mean_ci_length: Option<f64>,
    pub coverage: Option<f64>,
    /// Replications that used the SR fallback.
    pub fallbacks: usize,
    /// Replications that failed (e.g. attempts exhausted) and are excluded.
    pub failures: usize,
    pub mean_attempts: f64,
}

/// Neumaier-compensated running sum.
#[derive(Debug, Default, Clone, Copy)]
struct Kahan {
    sum: f64,
    c: f64,
}

impl Kahan {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.c += (self.sum - t) + v;
        } else {
            self.c += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn total(&self) -> f64 {
        self.sum + self.c
    }
}

impl ReplicationMetrics {
    /// Aggregates records in order. `rmse² = bias² + sd²(R−1)/R` holds up to
    /// rounding because `rmse` is derived from the same centered sums.
    pub fn from_records(method: &str, records: &[ReplicationRecord], failures: usize) -> Self {
        let r = records.len();
        let rf = r as f64;
        let mut s = Kahan::default();
        for rec in records {
            s.add(rec.error());
        }
        let bias = if r > 0 { s.total() / rf } else { f64::NAN };
        let mut ss = Kahan::default();
        for rec in records {
            let d = rec.error() - bias;
            ss.add(d * d);
        }
        let sd = if r > 1 { (ss.total() / (rf - 1.0)).sqrt() } else { f64::NAN };
        let rmse = (bias * bias + ss.total() / rf).sqrt();
        let with_ci: Vec<&ReplicationRecord> = records.iter().filter(|x| x.lower.is_some()).collect();
        let (mean_ci_length, coverage) = if with_ci.is_empty() {
            (None, None)
        } else {
            let mut len = Kahan::default();
            let mut cov = 0usize;
            for rec in &with_ci {
                len.add(rec.upper.unwrap() - rec.lower.unwrap());
                cov += rec.covered().unwrap() as usize;
            }
            let m = with_ci.len() as f64;
            (Some(len.total() / m), Some(cov as f64 / m))
        };
        let mut att = Kahan::default();
        records.iter().for_each(|x| att.add(x.attempts as f64));
        Self {
            method: method.to_string(),
            reps: r,
            bias,
            sd,
            rmse,
            mean_ci_length,
            coverage,
            fallbacks: records.iter().filter(|x| x.fell_back).count(),
            failures,
            mean_attempts: att.total() / rf.max(1.0),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyResult {
    pub config: StudyConfig,
    pub n: usize,
    /// `τ` of the fixed population (of the first population when redrawing).
    pub tau: f64,
    pub metrics: Vec<ReplicationMetrics>,
    /// Oracle variances for SRRoM and SRRsM(u) at `p_a` (fixed population only).
    pub theory: Option<TheoreticalVariances>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub records: Vec<ReplicationRecord>,
}

struct Prepared {
    pop: StratifiedPopulation,
    dm: DesignMatrices,
    tau: f64,
}

fn prepare(dgp: &DgpConfig) -> Result<Prepared> {
    let pop = generate_population(dgp)?;
    let dm = build_design_matrices(&pop)?;
    let tau = pop.tau()?;
    Ok(Prepared { pop, dm, tau })
}

struct MethodPlan {
    kind: MethodKind,
    criterion: BalanceCriterion,
    table: Option<NuTable>,
    salt: u64,
}

fn run_one(plan: &MethodPlan, prep: &Prepared, rr: &Rerandomizer<'_>, seed: u64, rep: usize, alpha: f64) -> Result<ReplicationRecord> {
    let mut rng = stream_rng(derive_seed(seed, plan.salt), rep as u64);
    let out = rr.draw(&mut rng)?;
    let (pop, dm) = (&prep.pop, &prep.dm);
    let y = pop.observed_outcomes(&out.assignment)?;
    let ci = match (plan.kind, out.fell_back) {
        (MethodKind::Srrdm, _) => None,
        (MethodKind::Sr, _) | (_, true) => Some(ci_sr(pop, dm, &out.assignment, &y, alpha)?.ci),
        (MethodKind::Srrom, false) => {
            Some(ci_srrom_with_table(pop, dm, &out.assignment, &y, alpha, plan.table.as_ref().unwrap())?.ci)
        }
        (MethodKind::SrrsmFair | MethodKind::SrrsmUnfair, false) => {
            Some(ci_srrsm_with_table(pop, dm, &out.assignment, &y, alpha, plan.table.as_ref().unwrap())?.ci)
        }
    };
    Ok(ReplicationRecord {
        rep,
        method: plan.kind.label().to_string(),
        tau: prep.tau,
        tau_hat: stratified_diff_in_means(pop, &out.assignment, &y)?,
        lower: ci.map(|c| c.lower),
        upper: ci.map(|c| c.upper),
        attempts: out.attempts,
        fell_back: out.fell_back,
    })
}

/// Runs every method for `cfg.reps` replications on the current rayon pool.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyResult> {
    cfg.validate()?;
    let base = prepare(&cfg.dgp)?;
    run_prepared(cfg, base)
}

/// Like [`run_study`] on a caller-supplied population with both potential
/// outcomes. `cfg.dgp` only contributes the seed; the population is never
/// redrawn.
pub fn run_study_on(pop: StratifiedPopulation, cfg: &StudyConfig) -> Result<StudyResult> {
    if cfg.redraw_population {
        return Err(Error::Config("a supplied population cannot be redrawn".into()));
    }
    let mut cfg = cfg.clone();
    cfg.dgp.p = pop.dim();
    cfg.dgp.stratum_sizes = pop.strata().iter().map(|s| s.size()).collect();
    if cfg.dgp.num_strata() != 2 {
        // the case label is informational here
        cfg.dgp.case = Case::ManySmall;
    }
    cfg.validate()?;
    let dm = build_design_matrices(&pop)?;
    let tau = pop.tau()?;
    run_prepared(&cfg, Prepared { pop, dm, tau })
}

fn run_prepared(cfg: &StudyConfig, base: Prepared) -> Result<StudyResult> {
    let p = base.pop.dim();
    let k = base.pop.num_strata();

    let plans: Vec<MethodPlan> = cfg
        .methods
        .iter()
        .map(|&kind| {
            let criterion = kind.criterion(p, k, cfg.pa, cfg.max_attempts)?;
            let table = match kind {
                MethodKind::Srrom | MethodKind::SrrsmFair | MethodKind::SrrsmUnfair => {
                    Some(NuTable::new(p, &criterion.thresholds, cfg.law)?)
                }
                _ => None,
            };
            // salt by method identity so adding a method leaves others unchanged
            let salt = 1 + kind as u64;
            Ok(MethodPlan { kind, criterion, table, salt })
        })
        .collect::<Result<_>>()?;

    let mut metrics = Vec::with_capacity(plans.len());
    let mut records = Vec::new();
    for plan in &plans {
        let results: Vec<Result<ReplicationRecord>> = if cfg.redraw_population {
            (0..cfg.reps)
                .into_par_iter()
                .map(|rep| {
                    let dgp = cfg.dgp.clone().with_seed(derive_seed(cfg.dgp.seed, 0x1000_0000 + rep as u64));
                    let prep = prepare(&dgp)?;
                    let rr = Rerandomizer::new(&prep.pop, &prep.dm, &plan.criterion)?;
                    run_one(plan, &prep, &rr, cfg.dgp.seed, rep, cfg.alpha)
                })
                .collect()
        } else {
            let rr = Rerandomizer::new(&base.pop, &base.dm, &plan.criterion)?;
            (0..cfg.reps)
                .into_par_iter()
                .map(|rep| run_one(plan, &base, &rr, cfg.dgp.seed, rep, cfg.alpha))
                .collect()
        };
        let mut ok = Vec::with_capacity(results.len());
        let mut failures = 0;
        for r in results {
            match r {
                Ok(rec) => ok.push(rec),
                Err(Error::AttemptsExhausted { .. }) => failures += 1,
                Err(e) => return Err(e),
            }
        }
        metrics.push(ReplicationMetrics::from_records(plan.kind.label(), &ok, failures));
        if cfg.record_replications {
            records.extend(ok);
        }
    }

    let theory = if cfg.redraw_population {
        None
    } else {
        let a = threshold_for(p, cfg.pa)?;
        theoretical_variances(&base.pop, &base.dm, a, &vec![a; k]).ok()
    };

    Ok(StudyResult { config: cfg.clone(), n: base.pop.len(), tau: base.tau, metrics, theory, records })
}

/// Runs the study on a dedicated pool with `threads` workers.
pub fn run_study_with_threads(cfg: &StudyConfig, threads: usize) -> Result<StudyResult> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| run_study(cfg))
}

impl StudyResult {
    /// Aligned text table with the columns Bias, SD, RMSE, CI length, CP(%).
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:>10} {:>10} {:>10} {:>10} {:>8} {:>9}",
            "Method", "Bias", "SD", "RMSE", "CI length", "CP(%)", "Fallback"
        );
        for m in &self.metrics {
            let len = m.mean_ci_length.map_or("-".to_string(), |v| format!("{v:.4}"));
            let cp = m.coverage.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
            let _ = writeln!(
                out,
                "{:<10} {:>10.4} {:>10.4} {:>10.4} {:>10} {:>8} {:>9}",
                m.method, m.bias, m.sd, m.rmse, len, cp, m.fallbacks
            );
        }
        out
    }

    pub fn metric(&self, kind: MethodKind) -> Option<&ReplicationMetrics> {
        self.metrics.iter().find(|m| m.method == kind.label())
    }

    /// Per-replication `τ̂ − τ` samples as CSV.
    pub fn records_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["rep", "method", "tau_hat", "error", "lower", "upper", "covered", "attempts", "fell_back"])
            .map_err(|e| Error::Config(e.to_string()))?;
        for r in &self.records {
            let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
            w.write_record([
                r.rep.to_string(),
                r.method.clone(),
                r.tau_hat.to_string(),
                r.error().to_string(),
                opt(r.lower),
                opt(r.upper),
                r.covered().map_or(String::new(), |c| (c as u8).to_string()),
                r.attempts.to_string(),
                (r.fell_back as u8).to_string(),
            ])
            .map_err(|e| Error::Config(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

impl MethodKind {
    pub fn method(self) -> Method {
        match self {
            MethodKind::Sr => Method::Sr,
            MethodKind::Srrom => Method::Srrom,
            MethodKind::SrrsmFair | MethodKind::SrrsmUnfair => Method::Srrsm,
            MethodKind::Srrdm => Method::Srrdm,
        }
    }
}
