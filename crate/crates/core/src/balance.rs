//! Design-stage matrices, Mahalanobis balance statistics, and the
//! rejection-sampling rerandomizer.
//!
//! Three acceptance rules are supported:
//!
//! * overall (`SRRoM`): `M = n τ̂_Xᵀ Σxx⁻¹ τ̂_X < a`
//! * stratum-specific (`SRRsM`): `M_[k] = n_[k] τ̂_[k]Xᵀ Σ_[k]xx⁻¹ τ̂_[k]X < a_k`
//!   for every `k`, each stratum redrawn on its own
//! * pooled difference in means (`SRRdM`): `M = n τ̃_Xᵀ U_xx⁻¹ τ̃_X < a`

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::design::{
    binomial, partial_shuffle, stratified_randomize, Assignment, StratifiedPopulation, Stratum,
};
use crate::error::{Error, Result};
use crate::numeric::{chi2_quantile, Cholesky, NumericError, SpdMatrix};

/// Strata with at most this many assignments are enumerated up front when
/// SRRsM starts, to detect strata where no assignment can pass.
const FEASIBILITY_ENUMERATION_LIMIT: u128 = 20_000;

pub const DEFAULT_MAX_ATTEMPTS: u64 = 1_000_000;

/// Column means of the rows in `units`.
pub(crate) fn mean_rows(pop: &StratifiedPopulation, units: &[usize]) -> Vec<f64> {
    let p = pop.dim();
    let mut m = vec![0.0; p];
    for &i in units {
        for (acc, v) in m.iter_mut().zip(pop.x(i)) {
            *acc += v;
        }
    }
    let len = units.len() as f64;
    m.iter_mut().for_each(|v| *v /= len);
    m
}

/// Sample covariance (divisor `len - 1`) of the rows in `units`.
pub(crate) fn cov_rows(pop: &StratifiedPopulation, units: &[usize], mean: &[f64]) -> SpdMatrix {
    let p = pop.dim();
    let mut acc = vec![0.0; p * p];
    let mut centered = vec![0.0; p];
    for &i in units {
        for ((c, v), m) in centered.iter_mut().zip(pop.x(i)).zip(mean) {
            *c = v - m;
        }
        for a in 0..p {
            for b in a..p {
                acc[a * p + b] += centered[a] * centered[b];
            }
        }
    }
    let div = (units.len() - 1) as f64;
    SpdMatrix::from_upper(p, |a, b| acc[a * p + b] / div)
}

/// Everything about the covariates that is known before assignment.
#[derive(Debug, Clone)]
pub struct DesignMatrices {
    n: usize,
    /// `X̄_[k]`.
    pub stratum_means: Vec<Vec<f64>>,
    /// `S_[k]XX`.
    pub stratum_cov: Vec<SpdMatrix>,
    /// `Σxx = Σ_k π_[k] S_[k]XX / (p_[k](1 − p_[k]))`.
    pub sigma_xx: SpdMatrix,
    /// `Σ_[k]xx = S_[k]XX / (p_[k](1 − p_[k]))`.
    pub stratum_sigma_xx: Vec<SpdMatrix>,
    /// `U_xx = Σ_k π_[k] p_[k](1 − p_[k]) S_[k]XX / (p₁² p₀²)`.
    pub u_xx: SpdMatrix,
    /// `√n / (p₁ p₀) · Σ_k π_[k] (p_[k] − p₁) X̄_[k]`, at the current `n`.
    pub omega: Vec<f64>,
    /// `n₁ / n`.
    pub p1: f64,
    /// Ridge factor `λ` when regularization was requested.
    pub ridge: Option<f64>,
    stratum_totals: Vec<Vec<f64>>,
    sigma_chol: Cholesky,
    u_chol: Cholesky,
    stratum_chol: Vec<std::result::Result<Cholesky, usize>>,
}

/// Computes all design-stage matrices and certifies `Σxx` by Cholesky.
pub fn build_design_matrices(pop: &StratifiedPopulation) -> Result<DesignMatrices> {
    build_design_matrices_inner(pop, None)
}

/// As [`build_design_matrices`], adding `λ · mean(diag) · I` to every
/// covariance that gets factored.
pub fn build_design_matrices_with_ridge(pop: &StratifiedPopulation, lambda: f64) -> Result<DesignMatrices> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("ridge factor must be positive, got {lambda}")));
    }
    build_design_matrices_inner(pop, Some(lambda))
}

fn build_design_matrices_inner(pop: &StratifiedPopulation, ridge: Option<f64>) -> Result<DesignMatrices> {
    let n = pop.len();
    let p = pop.dim();
    let p1 = pop.total_treated() as f64 / n as f64;
    let p0 = 1.0 - p1;

    let mut stratum_means = Vec::with_capacity(pop.num_strata());
    let mut stratum_cov = Vec::with_capacity(pop.num_strata());
    let mut stratum_sigma_xx = Vec::with_capacity(pop.num_strata());
    let mut stratum_totals = Vec::with_capacity(pop.num_strata());
    let mut sigma_xx = SpdMatrix::zeros(p);
    let mut u_xx = SpdMatrix::zeros(p);
    let mut omega = vec![0.0; p];

    for (k, s) in pop.strata().iter().enumerate() {
        let mean = mean_rows(pop, &s.units);
        let cov = cov_rows(pop, &s.units, &mean);
        let pk = s.propensity;
        let pi = pop.weight(k);
        let vk = pk * (1.0 - pk);
        sigma_xx.add_scaled(pi / vk, &cov);
        u_xx.add_scaled(pi * vk / (p1 * p1 * p0 * p0), &cov);
        for (o, m) in omega.iter_mut().zip(&mean) {
            *o += pi * (pk - p1) * m;
        }
        stratum_totals.push(mean.iter().map(|m| m * s.size() as f64).collect());
        stratum_sigma_xx.push(cov.scaled(1.0 / vk));
        stratum_means.push(mean);
        stratum_cov.push(cov);
    }
    let scale = (n as f64).sqrt() / (p1 * p0);
    omega.iter_mut().for_each(|o| *o *= scale);

    if let Some(lambda) = ridge {
        sigma_xx.add_ridge(lambda);
        u_xx.add_ridge(lambda);
        stratum_sigma_xx.iter_mut().for_each(|m| {
            m.add_ridge(lambda);
        });
    }

    let sigma_chol = sigma_xx.cholesky().map_err(|e| Error::singular("sigma_xx", None, e))?;
    let u_chol = u_xx.cholesky().map_err(|e| Error::singular("u_xx", None, e))?;
    let stratum_chol = stratum_sigma_xx
        .iter()
        .map(|m| match m.cholesky() {
            Ok(c) => Ok(c),
            Err(NumericError::Singular { pivot }) => Err(pivot),
            Err(_) => Err(0),
        })
        .collect();

    Ok(DesignMatrices {
        n,
        stratum_means,
        stratum_cov,
        sigma_xx,
        stratum_sigma_xx,
        u_xx,
        omega,
        p1,
        ridge,
        stratum_totals,
        sigma_chol,
        u_chol,
        stratum_chol,
    })
}

impl DesignMatrices {
    pub fn dim(&self) -> usize {
        self.sigma_xx.dim()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn sigma_chol(&self) -> &Cholesky {
        &self.sigma_chol
    }

    pub fn u_chol(&self) -> &Cholesky {
        &self.u_chol
    }

    /// Cholesky factor of `Σ_[k]xx`, or a `SingularCovariance` error naming
    /// the stratum.
    pub fn stratum_chol(&self, pop: &StratifiedPopulation, k: usize) -> Result<&Cholesky> {
        self.stratum_chol[k].as_ref().map_err(|&pivot| Error::SingularCovariance {
            matrix: "stratum sigma_xx",
            stratum: Some(pop.stratum(k).label.clone()),
            pivot,
        })
    }
}

/// `τ̂_[k]X` for one stratum given the sum of treated covariate rows.
fn stratum_diff(stratum: &Stratum, total: &[f64], treated_sum: &[f64], out: &mut [f64]) {
    let n1 = stratum.treated as f64;
    let n0 = stratum.controls() as f64;
    for ((o, t), s) in out.iter_mut().zip(treated_sum).zip(total) {
        *o = t / n1 - (s - t) / n0;
    }
}

fn treated_sum(pop: &StratifiedPopulation, stratum: &Stratum, z: &[bool], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for &i in stratum.units.iter().filter(|&&i| z[i]) {
        for (o, v) in out.iter_mut().zip(pop.x(i)) {
            *o += v;
        }
    }
}

/// `τ̂_[k]X`, the covariate difference in means inside stratum `k`.
pub fn tau_x_stratum(pop: &StratifiedPopulation, dm: &DesignMatrices, assignment: &Assignment, k: usize) -> Vec<f64> {
    let s = pop.stratum(k);
    let mut sum = vec![0.0; pop.dim()];
    treated_sum(pop, s, &assignment.z, &mut sum);
    let mut out = vec![0.0; pop.dim()];
    stratum_diff(s, &dm.stratum_totals[k], &sum, &mut out);
    out
}

/// `τ̂_X = Σ_k π_[k] τ̂_[k]X`.
pub fn tau_x_hat(pop: &StratifiedPopulation, dm: &DesignMatrices, assignment: &Assignment) -> Vec<f64> {
    let mut out = vec![0.0; pop.dim()];
    for k in 0..pop.num_strata() {
        let d = tau_x_stratum(pop, dm, assignment, k);
        let w = pop.weight(k);
        out.iter_mut().zip(&d).for_each(|(o, v)| *o += w * v);
    }
    out
}

/// `τ̃_X`: treated mean minus control mean, pooling all strata.
pub fn tau_x_tilde(pop: &StratifiedPopulation, assignment: &Assignment) -> Vec<f64> {
    let p = pop.dim();
    let (mut t, mut c) = (vec![0.0; p], vec![0.0; p]);
    for i in 0..pop.len() {
        let acc = if assignment.z[i] { &mut t } else { &mut c };
        acc.iter_mut().zip(pop.x(i)).for_each(|(a, v)| *a += v);
    }
    let n1 = pop.total_treated() as f64;
    let n0 = (pop.len() - pop.total_treated()) as f64;
    t.iter().zip(&c).map(|(a, b)| a / n1 - b / n0).collect()
}

/// `M_{τ̂X} = n τ̂_Xᵀ Σxx⁻¹ τ̂_X`.
pub fn mahalanobis_overall(dm: &DesignMatrices, tau_x: &[f64], n: usize) -> f64 {
    n as f64 * dm.sigma_chol.quad_form(tau_x)
}

/// `M_[k] = n_[k] τ̂_[k]Xᵀ Σ_[k]xx⁻¹ τ̂_[k]X`.
pub fn mahalanobis_stratum(
    pop: &StratifiedPopulation,
    dm: &DesignMatrices,
    assignment: &Assignment,
    k: usize,
) -> Result<f64> {
    let chol = dm.stratum_chol(pop, k)?;
    let d = tau_x_stratum(pop, dm, assignment, k);
    Ok(pop.stratum(k).size() as f64 * chol.quad_form(&d))
}

/// `M_{τ̃X} = n τ̃_Xᵀ U_xx⁻¹ τ̃_X`.
pub fn mahalanobis_dm(pop: &StratifiedPopulation, dm: &DesignMatrices, assignment: &Assignment) -> f64 {
    let t = tau_x_tilde(pop, assignment);
    pop.len() as f64 * dm.u_chol.quad_form(&t)
}

/// Threshold `a` with asymptotic acceptance `Pr(χ²_p < a) = target`.
/// A target of exactly 1 accepts everything and yields `+∞`.
pub fn threshold_for(p: usize, target: f64) -> Result<f64> {
    if target == 1.0 {
        return Ok(f64::INFINITY);
    }
    if !(target > 0.0 && target < 1.0) {
        return Err(NumericError::Domain(format!("target acceptance must be in (0, 1], got {target}")).into());
    }
    Ok(chi2_quantile(p as u32, target)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Plain stratified randomization.
    Sr,
    /// Overall Mahalanobis criterion.
    Srrom,
    /// Stratum-specific Mahalanobis criteria.
    Srrsm,
    /// Pooled difference-in-means criterion.
    Srrdm,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Sr => "SR",
            Method::Srrom => "SRRoM",
            Method::Srrsm => "SRRsM",
            Method::Srrdm => "SRRdM",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sr" => Ok(Method::Sr),
            "srrom" => Ok(Method::Srrom),
            "srrsm" => Ok(Method::Srrsm),
            "srrdm" => Ok(Method::Srrdm),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    ErrorOut,
    FallBackToSr,
}

/// An acceptance rule plus its thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceCriterion {
    pub method: Method,
    /// One threshold for SRRoM/SRRdM, one per stratum for SRRsM, none for SR.
    pub thresholds: Vec<f64>,
    /// Target acceptance probabilities the thresholds were derived from.
    pub target_acceptance: Vec<f64>,
    pub max_attempts: u64,
    pub fallback: Fallback,
}

impl BalanceCriterion {
    pub fn sr() -> Self {
        Self {
            method: Method::Sr,
            thresholds: Vec::new(),
            target_acceptance: Vec::new(),
            max_attempts: 1,
            fallback: Fallback::ErrorOut,
        }
    }

    pub fn srrom(p: usize, target: f64) -> Result<Self> {
        Ok(Self {
            method: Method::Srrom,
            thresholds: vec![threshold_for(p, target)?],
            target_acceptance: vec![target],
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            fallback: Fallback::ErrorOut,
        })
    }

    pub fn srrdm(p: usize, target: f64) -> Result<Self> {
        Ok(Self { method: Method::Srrdm, ..Self::srrom(p, target)? })
    }

    /// Stratum-specific criterion with per-stratum targets `p_{a_k}`.
    pub fn srrsm(p: usize, targets: &[f64]) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::Config("SRRsM needs one target per stratum".into()));
        }
        Ok(Self {
            method: Method::Srrsm,
            thresholds: targets.iter().map(|&t| threshold_for(p, t)).collect::<Result<_>>()?,
            target_acceptance: targets.to_vec(),
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            fallback: Fallback::FallBackToSr,
        })
    }

    /// `p_{a_k} = p_a^{1/K}`: same joint acceptance as SRRoM at `p_a`.
    pub fn srrsm_fair(p: usize, target: f64, strata: usize) -> Result<Self> {
        Self::srrsm(p, &vec![target.powf(1.0 / strata as f64); strata])
    }

    /// `p_{a_k} = p_a` in every stratum.
    pub fn srrsm_unfair(p: usize, target: f64, strata: usize) -> Result<Self> {
        Self::srrsm(p, &vec![target; strata])
    }

    pub fn with_max_attempts(mut self, max_attempts: u64) -> Self {
        self.max_attempts = max_attempts.max(1);
        self
    }

    pub fn with_fallback(mut self, fallback: Fallback) -> Self {
        self.fallback = fallback;
        self
    }

    /// The single threshold of an overall criterion (`+∞` for SR).
    pub fn threshold(&self) -> f64 {
        self.thresholds.first().copied().unwrap_or(f64::INFINITY)
    }
}

/// An accepted (or fallback) assignment and how it was obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct RerandOutcome {
    pub assignment: Assignment,
    /// Total candidate draws; for SRRsM, stratum draws summed over strata.
    pub attempts: u64,
    /// SRRsM only: draws per stratum.
    pub stratum_attempts: Vec<u64>,
    pub fell_back: bool,
    /// Balance statistic(s) of the returned assignment: one value for
    /// SR/SRRoM/SRRdM (the overall or pooled distance), `K` for SRRsM.
    pub statistics: Vec<f64>,
}

/// A criterion bound to a population, ready to draw repeatedly.
pub struct Rerandomizer<'a> {
    pop: &'a StratifiedPopulation,
    dm: &'a DesignMatrices,
    criterion: BalanceCriterion,
    /// SRRsM: strata where enumeration found no acceptable assignment.
    infeasible: Vec<bool>,
}

impl<'a> Rerandomizer<'a> {
    pub fn new(pop: &'a StratifiedPopulation, dm: &'a DesignMatrices, criterion: &BalanceCriterion) -> Result<Self> {
        let k = pop.num_strata();
        match criterion.method {
            Method::Sr => {}
            Method::Srrom | Method::Srrdm => {
                if criterion.thresholds.len() != 1 {
                    return Err(Error::Config("overall criteria take exactly one threshold".into()));
                }
            }
            Method::Srrsm => {
                if criterion.thresholds.len() != k {
                    return Err(Error::Config(format!(
                        "SRRsM needs {k} thresholds, got {}",
                        criterion.thresholds.len()
                    )));
                }
            }
        }
        if criterion.thresholds.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::Config("thresholds must be positive".into()));
        }
        let mut infeasible = vec![false; k];
        if criterion.method == Method::Srrsm {
            for (kk, flag) in infeasible.iter_mut().enumerate() {
                let chol = dm.stratum_chol(pop, kk)?;
                *flag = !stratum_has_acceptable(pop, dm, chol, kk, criterion.thresholds[kk]);
            }
        }
        Ok(Self { pop, dm, criterion: criterion.clone(), infeasible })
    }

    pub fn criterion(&self) -> &BalanceCriterion {
        &self.criterion
    }

    /// Strata known (by enumeration) to admit no acceptable assignment.
    pub fn infeasible_strata(&self) -> Vec<usize> {
        self.infeasible.iter().enumerate().filter(|(_, &f)| f).map(|(k, _)| k).collect()
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<RerandOutcome> {
        match self.criterion.method {
            Method::Sr => {
                let assignment = stratified_randomize(self.pop, rng);
                let m = mahalanobis_overall(self.dm, &tau_x_hat(self.pop, self.dm, &assignment), self.pop.len());
                Ok(RerandOutcome {
                    assignment,
                    attempts: 1,
                    stratum_attempts: Vec::new(),
                    fell_back: false,
                    statistics: vec![m],
                })
            }
            Method::Srrom | Method::Srrdm => self.draw_overall(rng),
            Method::Srrsm => self.draw_per_stratum(rng),
        }
    }

    fn fallback<R: Rng + ?Sized>(&self, rng: &mut R, attempts: u64, stratum_attempts: Vec<u64>, stratum: Option<usize>) -> Result<RerandOutcome> {
        match self.criterion.fallback {
            Fallback::ErrorOut => Err(Error::AttemptsExhausted {
                attempts,
                stratum: stratum.map(|k| self.pop.stratum(k).label.clone()),
            }),
            Fallback::FallBackToSr => {
                let assignment = stratified_randomize(self.pop, rng);
                let statistics = self.statistics(&assignment)?;
                Ok(RerandOutcome { assignment, attempts, stratum_attempts, fell_back: true, statistics })
            }
        }
    }

    fn statistics(&self, assignment: &Assignment) -> Result<Vec<f64>> {
        Ok(match self.criterion.method {
            Method::Srrsm => (0..self.pop.num_strata())
                .map(|k| mahalanobis_stratum(self.pop, self.dm, assignment, k))
                .collect::<Result<_>>()?,
            Method::Srrdm => vec![mahalanobis_dm(self.pop, self.dm, assignment)],
            _ => vec![mahalanobis_overall(self.dm, &tau_x_hat(self.pop, self.dm, assignment), self.pop.len())],
        })
    }

    fn draw_overall<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<RerandOutcome> {
        let pop = self.pop;
        let p = pop.dim();
        let n = pop.len() as f64;
        let a = self.criterion.threshold();
        let pooled = self.criterion.method == Method::Srrdm;
        let n1 = pop.total_treated() as f64;
        let n0 = n - n1;
        let grand_total: Vec<f64> = (0..p)
            .map(|j| self.dm.stratum_totals.iter().map(|t| t[j]).sum())
            .collect();

        let mut perms: Vec<Vec<usize>> = pop.strata().iter().map(|s| s.units.clone()).collect();
        let mut sum = vec![0.0; p];
        let mut diff = vec![0.0; p];
        let mut stat = vec![0.0; p];

        for attempt in 1..=self.criterion.max_attempts {
            stat.iter_mut().for_each(|v| *v = 0.0);
            for (k, (s, perm)) in pop.strata().iter().zip(perms.iter_mut()).enumerate() {
                partial_shuffle(perm, s.treated, rng);
                sum.iter_mut().for_each(|v| *v = 0.0);
                for &i in &perm[..s.treated] {
                    sum.iter_mut().zip(pop.x(i)).for_each(|(o, v)| *o += v);
                }
                if pooled {
                    stat.iter_mut().zip(&sum).for_each(|(o, v)| *o += v);
                } else {
                    stratum_diff(s, &self.dm.stratum_totals[k], &sum, &mut diff);
                    let w = pop.weight(k);
                    stat.iter_mut().zip(&diff).for_each(|(o, v)| *o += w * v);
                }
            }
            let m = if pooled {
                // stat holds Σ_treated X; convert to τ̃_X
                for (o, g) in stat.iter_mut().zip(&grand_total) {
                    *o = *o / n1 - (g - *o) / n0;
                }
                n * self.dm.u_chol.quad_form(&stat)
            } else {
                n * self.dm.sigma_chol.quad_form(&stat)
            };
            if m < a {
                let mut z = vec![false; pop.len()];
                for (s, perm) in pop.strata().iter().zip(&perms) {
                    perm[..s.treated].iter().for_each(|&i| z[i] = true);
                }
                return Ok(RerandOutcome {
                    assignment: Assignment::new(z),
                    attempts: attempt,
                    stratum_attempts: Vec::new(),
                    fell_back: false,
                    statistics: vec![m],
                });
            }
        }
        self.fallback(rng, self.criterion.max_attempts, Vec::new(), None)
    }

    fn draw_per_stratum<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<RerandOutcome> {
        let pop = self.pop;
        let p = pop.dim();
        let k_count = pop.num_strata();
        if let Some(k) = self.infeasible.iter().position(|&f| f) {
            return self.fallback(rng, 0, vec![0; k_count], Some(k));
        }
        let mut z = vec![false; pop.len()];
        let mut sum = vec![0.0; p];
        let mut diff = vec![0.0; p];
        let mut stratum_attempts = Vec::with_capacity(k_count);
        let mut statistics = Vec::with_capacity(k_count);
        for (k, s) in pop.strata().iter().enumerate() {
            let chol = self.dm.stratum_chol(pop, k)?;
            let a = self.criterion.thresholds[k];
            let size = s.size() as f64;
            let mut perm = s.units.clone();
            let mut accepted = None;
            for attempt in 1..=self.criterion.max_attempts {
                partial_shuffle(&mut perm, s.treated, rng);
                sum.iter_mut().for_each(|v| *v = 0.0);
                for &i in &perm[..s.treated] {
                    sum.iter_mut().zip(pop.x(i)).for_each(|(o, v)| *o += v);
                }
                stratum_diff(s, &self.dm.stratum_totals[k], &sum, &mut diff);
                let m = size * chol.quad_form(&diff);
                if m < a {
                    accepted = Some((attempt, m));
                    break;
                }
            }
            match accepted {
                Some((attempt, m)) => {
                    stratum_attempts.push(attempt);
                    statistics.push(m);
                    perm[..s.treated].iter().for_each(|&i| z[i] = true);
                    perm[s.treated..].iter().for_each(|&i| z[i] = false);
                }
                None => {
                    stratum_attempts.push(self.criterion.max_attempts);
                    stratum_attempts.resize(k_count, 0);
                    let total = stratum_attempts.iter().sum();
                    return self.fallback(rng, total, stratum_attempts, Some(k));
                }
            }
        }
        Ok(RerandOutcome {
            assignment: Assignment::new(z),
            attempts: stratum_attempts.iter().sum(),
            stratum_attempts,
            fell_back: false,
            statistics,
        })
    }
}

/// Enumerates a small stratum and reports whether any assignment has
/// `M_[k] < a`. Large strata are assumed feasible.
fn stratum_has_acceptable(pop: &StratifiedPopulation, dm: &DesignMatrices, chol: &Cholesky, k: usize, a: f64) -> bool {
    let s = pop.stratum(k);
    if a == f64::INFINITY || binomial(s.size(), s.treated) > FEASIBILITY_ENUMERATION_LIMIT {
        return true;
    }
    let p = pop.dim();
    let size = s.size();
    let mut combo: Vec<usize> = (0..s.treated).collect();
    let mut sum = vec![0.0; p];
    let mut diff = vec![0.0; p];
    loop {
        sum.iter_mut().for_each(|v| *v = 0.0);
        for &pos in &combo {
            sum.iter_mut().zip(pop.x(s.units[pos])).for_each(|(o, v)| *o += v);
        }
        stratum_diff(s, &dm.stratum_totals[k], &sum, &mut diff);
        if size as f64 * chol.quad_form(&diff) < a {
            return true;
        }
        // lexicographic successor
        let t = combo.len();
        let mut i = t;
        let mut advanced = false;
        while i > 0 {
            i -= 1;
            if combo[i] < size - t + i {
                combo[i] += 1;
                for j in (i + 1)..t {
                    combo[j] = combo[j - 1] + 1;
                }
                advanced = true;
                break;
            }
        }
        if !advanced {
            return false;
        }
    }
}

/// Draws one assignment satisfying `criterion` (see [`Rerandomizer`]).
pub fn rerandomize<R: Rng + ?Sized>(
    pop: &StratifiedPopulation,
    dm: &DesignMatrices,
    criterion: &BalanceCriterion,
    rng: &mut R,
) -> Result<RerandOutcome> {
    Rerandomizer::new(pop, dm, criterion)?.draw(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{enumerate_assignments, PopulationInput};
    use crate::rng::stream_rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_pop(sizes: &[usize], props: &[f64], p: usize, seed: u64) -> StratifiedPopulation {
        let n: usize = sizes.iter().sum();
        let mut rng = stream_rng(seed, 0);
        let mut x = Vec::with_capacity(n * p);
        for (k, &s) in sizes.iter().enumerate() {
            for _ in 0..s {
                for j in 0..p {
                    let z: f64 = rng.sample(StandardNormal);
                    x.push(z + (k * (j + 1)) as f64 * 0.7);
                }
            }
        }
        PopulationInput::from_sizes(sizes, props.to_vec(), p, x).build().unwrap()
    }

    #[test]
    fn scalar_sigma_is_four_s() {
        let x = vec![1.0, 2.0, 4.0, 7.0];
        let pop = PopulationInput::from_sizes(&[4], vec![0.5], 1, x).build().unwrap();
        let dm = build_design_matrices(&pop).unwrap();
        let mean = 3.5;
        let s = [1.0f64, 2.0, 4.0, 7.0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!((dm.sigma_xx.get(0, 0) - 4.0 * s).abs() < 1e-12);
        // τ̂_X and M for z = (1,1,0,0)
        let a = Assignment::new(vec![true, true, false, false]);
        let t = tau_x_hat(&pop, &dm, &a);
        assert!((t[0] - (1.5 - 5.5)).abs() < 1e-12);
        let m = mahalanobis_overall(&dm, &t, 4);
        assert!((m - 4.0 * t[0] * t[0] / (4.0 * s)).abs() < 1e-12);
        assert_eq!(mahalanobis_overall(&dm, &[0.0], 4), 0.0);
    }

    #[test]
    fn tau_x_simple_arithmetic() {
        let pop = PopulationInput::from_sizes(&[4], vec![0.5], 1, vec![1.0, 2.0, 3.0, 4.0]).build().unwrap();
        let dm = build_design_matrices(&pop).unwrap();
        let t = tau_x_hat(&pop, &dm, &Assignment::new(vec![true, true, false, false]));
        assert!((t[0] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn equal_strata_average_sigma() {
        let pop = random_pop(&[6, 6], &[0.5, 0.5], 2, 4);
        let dm = build_design_matrices(&pop).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let avg = 0.5 * (dm.stratum_sigma_xx[0].get(i, j) + dm.stratum_sigma_xx[1].get(i, j));
                assert!((dm.sigma_xx.get(i, j) - avg).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equal_propensity_u_equals_sigma_and_omega_zero() {
        let pop = random_pop(&[8, 12, 10], &[0.5, 0.5, 0.5], 3, 8);
        let dm = build_design_matrices(&pop).unwrap();
        for (a, b) in dm.sigma_xx.as_slice().iter().zip(dm.u_xx.as_slice()) {
            assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        }
        assert!(dm.omega.iter().all(|o| o.abs() < 1e-12));
    }

    #[test]
    fn constant_within_strata_gives_zero() {
        // column 1 is constant inside each stratum
        let x = vec![1.0, 3.0, 2.0, 3.0, 4.0, 3.0, 7.0, 3.0, 5.0, 9.0, 6.0, 9.0, 8.0, 9.0, 5.5, 9.0];
        let pop = PopulationInput::from_sizes(&[4, 4], vec![0.5, 0.5], 2, x).build().unwrap();
        let err = build_design_matrices(&pop).unwrap_err();
        assert!(matches!(err, Error::SingularCovariance { matrix: "sigma_xx", pivot: 1, .. }), "{err:?}");
        let dm = build_design_matrices_with_ridge(&pop, 1e-3).unwrap();
        assert_eq!(dm.ridge, Some(1e-3));
        let mut rng = stream_rng(1, 1);
        let a = stratified_randomize(&pop, &mut rng);
        assert_eq!(tau_x_hat(&pop, &dm, &a)[1], 0.0);
    }

    #[test]
    fn single_stratum_matches_overall() {
        let pop = random_pop(&[12], &[0.5], 3, 2);
        let dm = build_design_matrices(&pop).unwrap();
        for a in enumerate_assignments(&pop, 1000).unwrap().take(50) {
            let m_all = mahalanobis_overall(&dm, &tau_x_hat(&pop, &dm, &a), pop.len());
            let m_k = mahalanobis_stratum(&pop, &dm, &a, 0).unwrap();
            assert!((m_all - m_k).abs() <= 1e-12 * m_all.max(1.0));
        }
    }

    #[test]
    fn stratum_distance_against_explicit_inverse() {
        // 2x2 closed-form inverse as an independent oracle
        let pop = random_pop(&[8, 10], &[0.5, 0.4], 2, 13);
        let dm = build_design_matrices(&pop).unwrap();
        let a = stratified_randomize(&pop, &mut stream_rng(3, 3));
        for k in 0..2 {
            let m = &dm.stratum_sigma_xx[k];
            let det = m.get(0, 0) * m.get(1, 1) - m.get(0, 1) * m.get(1, 0);
            let inv = [m.get(1, 1) / det, -m.get(0, 1) / det, -m.get(1, 0) / det, m.get(0, 0) / det];
            let d = tau_x_stratum(&pop, &dm, &a, k);
            let q = d[0] * (inv[0] * d[0] + inv[1] * d[1]) + d[1] * (inv[2] * d[0] + inv[3] * d[1]);
            let oracle = pop.stratum(k).size() as f64 * q;
            let got = mahalanobis_stratum(&pop, &dm, &a, k).unwrap();
            assert!((got - oracle).abs() < 1e-10 * oracle.max(1.0), "{got} vs {oracle}");
        }
    }

    #[test]
    fn pooled_distance_equals_overall_with_equal_propensity() {
        let pop = random_pop(&[10, 14], &[0.5, 0.5], 2, 6);
        let dm = build_design_matrices(&pop).unwrap();
        let mut rng = stream_rng(6, 0);
        for _ in 0..100 {
            let a = stratified_randomize(&pop, &mut rng);
            let m1 = mahalanobis_overall(&dm, &tau_x_hat(&pop, &dm, &a), pop.len());
            let m2 = mahalanobis_dm(&pop, &dm, &a);
            assert!((m1 - m2).abs() < 1e-10 * m1.max(1.0));
        }
        assert_eq!(mahalanobis_dm(&pop, &dm, &Assignment::new(vec![false; 24])).is_nan(), false);
    }

    #[test]
    fn pooled_distance_differs_with_unequal_propensity() {
        // strata with very different covariate means, p = (0.25, 0.75)
        let pop = random_pop(&[8, 8], &[0.25, 0.75], 1, 17);
        let dm = build_design_matrices(&pop).unwrap();
        let max_gap = enumerate_assignments(&pop, 10_000)
            .unwrap()
            .map(|a| {
                let m1 = mahalanobis_overall(&dm, &tau_x_hat(&pop, &dm, &a), pop.len());
                (m1 - mahalanobis_dm(&pop, &dm, &a)).abs()
            })
            .fold(0.0, f64::max);
        assert!(max_gap > 1e-3, "{max_gap}");
    }

    #[test]
    fn thresholds() {
        assert_eq!(threshold_for(3, 1.0).unwrap(), f64::INFINITY);
        let a = threshold_for(2, 1.0 - (-1.0f64).exp()).unwrap();
        assert!((a - 2.0).abs() < 1e-9);
        assert!(threshold_for(2, 0.0).is_err());
        assert!(threshold_for(2, 1.5).is_err());
        // the 0.999 quantile is monotone toward infinity as target -> 1
        assert!(threshold_for(4, 0.999_999).unwrap() > threshold_for(4, 0.99).unwrap());
    }

    #[test]
    fn accept_all_is_plain_sr() {
        let pop = random_pop(&[6, 6], &[0.5, 0.5], 2, 1);
        let dm = build_design_matrices(&pop).unwrap();
        let crit = BalanceCriterion::srrom(2, 1.0).unwrap();
        for seed in 0..20 {
            let out = rerandomize(&pop, &dm, &crit, &mut stream_rng(seed, 0)).unwrap();
            assert_eq!(out.attempts, 1);
            // a single whole-population shuffle consumes the stream like SR does
            let sr = stratified_randomize(&pop, &mut stream_rng(seed, 0));
            assert_eq!(out.assignment, sr);
        }
    }

    #[test]
    fn accepted_assignments_satisfy_criterion() {
        let pop = random_pop(&[20, 30], &[0.5, 0.4], 3, 9);
        let dm = build_design_matrices(&pop).unwrap();
        let mut rng = stream_rng(2, 0);
        for crit in [
            BalanceCriterion::srrom(3, 0.05).unwrap(),
            BalanceCriterion::srrdm(3, 0.05).unwrap(),
            BalanceCriterion::srrsm(3, &[0.2, 0.1]).unwrap(),
        ] {
            for _ in 0..30 {
                let out = rerandomize(&pop, &dm, &crit, &mut rng).unwrap();
                assert!(!out.fell_back);
                pop.check_assignment(&out.assignment).unwrap();
                match crit.method {
                    Method::Srrom => {
                        let m = mahalanobis_overall(&dm, &tau_x_hat(&pop, &dm, &out.assignment), pop.len());
                        assert!(m < crit.threshold());
                        assert!((m - out.statistics[0]).abs() < 1e-9 * m.max(1.0));
                    }
                    Method::Srrdm => assert!(mahalanobis_dm(&pop, &dm, &out.assignment) < crit.threshold()),
                    Method::Srrsm => {
                        for k in 0..2 {
                            assert!(mahalanobis_stratum(&pop, &dm, &out.assignment, k).unwrap() < crit.thresholds[k]);
                        }
                        assert_eq!(out.attempts, out.stratum_attempts.iter().sum::<u64>());
                    }
                    Method::Sr => unreachable!(),
                }
            }
        }
    }

    #[test]
    fn exhaustion_modes() {
        let pop = random_pop(&[40], &[0.5], 2, 5);
        let dm = build_design_matrices(&pop).unwrap();
        let crit = BalanceCriterion::srrom(2, 1e-9).unwrap().with_max_attempts(5);
        let err = rerandomize(&pop, &dm, &crit, &mut stream_rng(1, 0)).unwrap_err();
        assert_eq!(err, Error::AttemptsExhausted { attempts: 5, stratum: None });
        let crit = crit.with_fallback(Fallback::FallBackToSr);
        let out = rerandomize(&pop, &dm, &crit, &mut stream_rng(1, 0)).unwrap();
        assert!(out.fell_back);
        pop.check_assignment(&out.assignment).unwrap();
    }

    #[test]
    fn infeasible_small_stratum_falls_back_immediately() {
        // p = 8 on a size-10 stratum at p_a = 1e-6: almost surely nothing passes
        let pop = random_pop(&[10, 10], &[0.5, 0.5], 8, 31);
        let dm = build_design_matrices(&pop).unwrap();
        let crit = BalanceCriterion::srrsm_unfair(8, 1e-6, 2).unwrap();
        let rr = Rerandomizer::new(&pop, &dm, &crit).unwrap();
        // cross-check the feasibility scan against brute force
        for k in 0..2 {
            let sub_any = enumerate_assignments(&pop, 1_000_000)
                .unwrap()
                .any(|a| mahalanobis_stratum(&pop, &dm, &a, k).unwrap() < crit.thresholds[k]);
            assert_eq!(rr.infeasible_strata().contains(&k), !sub_any);
        }
        if !rr.infeasible_strata().is_empty() {
            let out = rr.draw(&mut stream_rng(0, 0)).unwrap();
            assert!(out.fell_back);
            assert_eq!(out.attempts, 0);
        }
    }

    #[test]
    fn acceptance_fraction_matches_enumeration() {
        let pop = random_pop(&[8, 8], &[0.5, 0.5], 2, 23);
        let dm = build_design_matrices(&pop).unwrap();
        let a = threshold_for(2, 0.3).unwrap();
        let all: Vec<Assignment> = enumerate_assignments(&pop, 1_000_000).unwrap().collect();
        let exact = all
            .iter()
            .filter(|z| mahalanobis_overall(&dm, &tau_x_hat(&pop, &dm, z), pop.len()) < a)
            .count() as f64
            / all.len() as f64;
        let crit = BalanceCriterion::srrom(2, 0.3).unwrap();
        let rr = Rerandomizer::new(&pop, &dm, &crit).unwrap();
        let mut rng = stream_rng(77, 0);
        let runs = 4000;
        let draws: u64 = (0..runs).map(|_| rr.draw(&mut rng).unwrap().attempts).sum();
        let empirical = runs as f64 / draws as f64;
        // ratio estimator: se ≈ p sqrt((1-p)/runs)
        let se = exact * ((1.0 - exact) / runs as f64).sqrt();
        assert!((empirical - exact).abs() < 4.0 * se, "{empirical} vs {exact}");
    }

    #[test]
    fn stratum_rule_is_intersection() {
        let pop = random_pop(&[6, 6], &[0.5, 0.5], 1, 41);
        let dm = build_design_matrices(&pop).unwrap();
        let a = threshold_for(1, 0.5).unwrap();
        let mut joint = 0usize;
        let mut per = [0usize; 2];
        let all: Vec<Assignment> = enumerate_assignments(&pop, 1000).unwrap().collect();
        for z in &all {
            let pass: Vec<bool> = (0..2).map(|k| mahalanobis_stratum(&pop, &dm, z, k).unwrap() < a).collect();
            for k in 0..2 {
                per[k] += pass[k] as usize;
            }
            joint += pass.iter().all(|&b| b) as usize;
        }
        // strata are independent under SR, so counts factor exactly
        let per_frac: Vec<f64> = per.iter().map(|&c| c as f64 / all.len() as f64).collect();
        let joint_frac = joint as f64 / all.len() as f64;
        assert!((joint_frac - per_frac[0] * per_frac[1]).abs() < 1e-12);
        assert!(joint_frac <= per_frac[0].min(per_frac[1]));
    }

    #[test]
    fn mean_attempts_near_inverse_target() {
        let pop = random_pop(&[500, 500, 500, 500], &[0.5, 0.5, 0.5, 0.5], 4, 99);
        let dm = build_design_matrices(&pop).unwrap();
        let crit = BalanceCriterion::srrom(4, 0.01).unwrap();
        let rr = Rerandomizer::new(&pop, &dm, &crit).unwrap();
        let mut rng = stream_rng(1234, 0);
        let runs = 1500;
        let total: u64 = (0..runs).map(|_| rr.draw(&mut rng).unwrap().attempts).sum();
        let mean = total as f64 / runs as f64;
        assert!((mean - 100.0).abs() < 15.0, "mean attempts {mean}");
    }
}
