//! Point estimates, variance estimators, the truncated-Gaussian quantile
//! machinery, and confidence intervals under SR, SRRoM and SRRsM.
//!
//! The limiting law of `√n(τ̂ − τ)` under overall rerandomization is
//! `Σ_ττ^{1/2} {(1 − R²)^{1/2} ε₀ + (R²)^{1/2} L_{p,a}}` where
//! `L_{p,a} ~ D₁ | DᵀD < a` for `D ~ N(0, I_p)`. Its quantiles have no closed
//! form, so they are estimated by Monte Carlo from a seeded stream.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::balance::{mean_rows, BalanceCriterion, DesignMatrices, Method};
use crate::design::{Assignment, StratifiedPopulation};
use crate::error::{Error, Result};
use crate::numeric::{chi2_cdf, chi2_quantile, normal_quantile, NumericError};
use crate::rng::stream_rng;

/// Below this acceptance probability `L_{p,a}` is drawn radially.
const RADIAL_SWITCH: f64 = 1e-2;

pub const DEFAULT_LAW_DRAWS: usize = 200_000;
pub const DEFAULT_LAW_SEED: u64 = 20_220_601;

/// `τ̂ = Σ_k π_[k] (Ȳ_[k]1 − Ȳ_[k]0)`.
pub fn stratified_diff_in_means(pop: &StratifiedPopulation, assignment: &Assignment, y: &[f64]) -> Result<f64> {
    let mut tau = 0.0;
    for (k, s) in pop.strata().iter().enumerate() {
        let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0usize, 0.0, 0usize);
        for &i in &s.units {
            if assignment.z[i] {
                s1 += y[i];
                n1 += 1;
            } else {
                s0 += y[i];
                n0 += 1;
            }
        }
        if n1 == 0 || n0 == 0 {
            return Err(Error::EmptyArm { stratum: s.label.clone() });
        }
        tau += pop.weight(k) * (s1 / n1 as f64 - s0 / n0 as f64);
    }
    Ok(tau)
}

/// `v_{p,a} = P(χ²_{p+2} ≤ a) / P(χ²_p ≤ a)`, the variance of `L_{p,a}`.
pub fn v_pa(p: usize, a: f64) -> Result<f64> {
    if !(a > 0.0) {
        return Err(NumericError::Domain(format!("threshold must be positive, got {a}")).into());
    }
    if a == f64::INFINITY {
        return Ok(1.0);
    }
    let num = chi2_cdf(p as u32 + 2, a)?;
    let den = chi2_cdf(p as u32, a)?;
    if den == 0.0 {
        // a so small the ratio underflows; its limit is p / (p + 2) · a / p → 0
        return Ok(a / (p as f64 + 2.0));
    }
    Ok(num / den)
}

/// A sampler for `L_{p,a}` with its path chosen from the acceptance
/// probability `P(χ²_p < a)`.
#[derive(Debug, Clone)]
pub struct LSampler {
    p: usize,
    a: f64,
    cdf_a: f64,
    radial: bool,
}

impl LSampler {
    pub fn new(p: usize, a: f64) -> Result<Self> {
        if p == 0 {
            return Err(NumericError::Domain("dimension must be positive".into()).into());
        }
        if !(a > 0.0) {
            return Err(NumericError::Domain(format!("threshold must be positive, got {a}")).into());
        }
        let cdf_a = if a == f64::INFINITY { 1.0 } else { chi2_cdf(p as u32, a)? };
        Ok(Self { p, a, cdf_a, radial: cdf_a < RADIAL_SWITCH })
    }

    /// Acceptance probability `P(χ²_p < a)`.
    pub fn acceptance(&self) -> f64 {
        self.cdf_a
    }

    pub fn is_radial(&self) -> bool {
        self.radial
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.radial {
            self.sample_radial(rng)
        } else {
            self.sample_rejection(rng)
        }
    }

    /// Draws `D` until `DᵀD < a` and returns `D₁`.
    pub fn sample_rejection<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.a == f64::INFINITY {
            return rng.sample(StandardNormal);
        }
        loop {
            let d1: f64 = rng.sample(StandardNormal);
            let mut ss = d1 * d1;
            for _ in 1..self.p {
                if ss >= self.a {
                    break;
                }
                let d: f64 = rng.sample(StandardNormal);
                ss += d * d;
            }
            if ss < self.a {
                return d1;
            }
        }
    }

    /// Squared radius from `χ²_p` truncated to `[0, a]`, times the first
    /// coordinate of a uniform direction.
    ///
    /// For `a ≤ 4` the radius comes from rejection against the density
    /// `∝ t^{p/2−1}` on `[0, a]` (acceptance `e^{−t/2} ≥ e^{−2}`), otherwise
    /// from CDF inversion. Both are exact.
    pub fn sample_radial<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let r2 = if self.a <= 4.0 { self.radius_power(rng) } else { self.radius_inversion(rng) };
        let g1: f64 = rng.sample(StandardNormal);
        let mut norm2 = g1 * g1;
        for _ in 1..self.p {
            let g: f64 = rng.sample(StandardNormal);
            norm2 += g * g;
        }
        r2.sqrt() * g1 / norm2.sqrt()
    }

    fn radius_power<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let exponent = 2.0 / self.p as f64;
        loop {
            let u: f64 = rng.random();
            let t = self.a * u.powf(exponent);
            let v: f64 = rng.random();
            if v < (-0.5 * t).exp() {
                return t;
            }
        }
    }

    /// Truncated `χ²_p` radius by CDF inversion.
    pub fn radius_inversion<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let u: f64 = rng.random();
            let target = u * self.cdf_a;
            if target > 0.0 {
                match chi2_quantile(self.p as u32, target.min(1.0 - f64::EPSILON)) {
                    Ok(r2) if r2 < self.a => return r2,
                    Ok(_) => return self.a * (1.0 - f64::EPSILON),
                    Err(_) => continue,
                }
            }
        }
    }
}

/// One draw from `L_{p,a}`.
pub fn sample_l_pa<R: Rng + ?Sized>(p: usize, a: f64, rng: &mut R) -> Result<f64> {
    Ok(LSampler::new(p, a)?.sample(rng))
}

/// Monte Carlo settings for quantiles of the limiting law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LawConfig {
    /// Total draws, including the mirrored half.
    pub draws: usize,
    pub seed: u64,
}

impl Default for LawConfig {
    fn default() -> Self {
        Self { draws: DEFAULT_LAW_DRAWS, seed: DEFAULT_LAW_SEED }
    }
}

/// `σ₀ ε₀ + Σ_j σ_j L^j_{p,a_j}` with independent terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncatedGaussianLaw {
    pub p: usize,
    /// Standard deviation `σ₀` of the Gaussian part.
    pub normal_scale: f64,
    /// `(σ_j, a_j)` for each truncated term.
    pub terms: Vec<(f64, f64)>,
    pub config: LawConfig,
}

impl TruncatedGaussianLaw {
    /// `(1 − R²)^{1/2} ε₀ + (R²)^{1/2} L_{p,a}`.
    pub fn overall(r2: f64, p: usize, a: f64, config: LawConfig) -> Result<Self> {
        if !(0.0..=1.0).contains(&r2) {
            return Err(NumericError::Domain(format!("R² must lie in [0, 1], got {r2}")).into());
        }
        Ok(Self { p, normal_scale: (1.0 - r2).sqrt(), terms: vec![(r2.sqrt(), a)], config })
    }

    /// `{Σ_k π_k Σ_k (1 − R²_k)}^{1/2} ε₀ + Σ_k (π_k Σ_k R²_k)^{1/2} L^k_{p,a_k}`.
    pub fn mixture(p: usize, weights: &[f64], sigma: &[f64], r2: &[f64], thresholds: &[f64], config: LawConfig) -> Result<Self> {
        let k = weights.len();
        if sigma.len() != k || r2.len() != k || thresholds.len() != k {
            return Err(Error::Config("mixture inputs must have one entry per stratum".into()));
        }
        let normal_var: f64 = (0..k).map(|j| weights[j] * sigma[j] * (1.0 - r2[j])).sum();
        let terms = (0..k).map(|j| ((weights[j] * sigma[j] * r2[j]).sqrt(), thresholds[j])).collect();
        Ok(Self { p, normal_scale: normal_var.max(0.0).sqrt(), terms, config })
    }

    /// Variance of the law, using `v_{p,a_j}` for each term.
    pub fn variance(&self) -> Result<f64> {
        let mut v = self.normal_scale * self.normal_scale;
        for &(s, a) in &self.terms {
            v += s * s * v_pa(self.p, a)?;
        }
        Ok(v)
    }

    pub fn table(&self) -> Result<NuTable> {
        let thresholds: Vec<f64> = self.terms.iter().map(|t| t.1).collect();
        NuTable::new(self.p, &thresholds, self.config)
    }

    /// Sorted, mirrored Monte Carlo sample of the law.
    pub fn sample(&self) -> Result<Vec<f64>> {
        let scales: Vec<f64> = self.terms.iter().map(|t| t.0).collect();
        Ok(self.table()?.sample(self.normal_scale, &scales))
    }

    pub fn quantile(&self, xi: f64) -> Result<QuantileEstimate> {
        Ok(self.quantiles(&[xi])?.remove(0))
    }

    pub fn quantiles(&self, xis: &[f64]) -> Result<Vec<QuantileEstimate>> {
        let sample = self.sample()?;
        xis.iter().map(|&xi| quantile_from_sorted(&sample, xi)).collect()
    }
}

/// ν_ξ of a law, with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileEstimate {
    pub xi: f64,
    pub value: f64,
    pub mc_se: f64,
}

/// `ξ`-quantile of `law`.
pub fn nu_quantile(law: &TruncatedGaussianLaw, xi: f64) -> Result<QuantileEstimate> {
    law.quantile(xi)
}

/// Base draws for a family of laws sharing `p`, thresholds and seed.
///
/// Column 0 holds `ε₀`; column `j + 1` holds `L^j_{p,a_j}`. Any law in the
/// family is a linear combination of the columns, so repeated quantile
/// requests with different `R²` reuse the same draws.
#[derive(Debug, Clone)]
pub struct NuTable {
    p: usize,
    thresholds: Vec<f64>,
    config: LawConfig,
    half: usize,
    eps: Vec<f64>,
    columns: Vec<Vec<f64>>,
}

impl NuTable {
    pub fn new(p: usize, thresholds: &[f64], config: LawConfig) -> Result<Self> {
        if config.draws < 2 {
            return Err(Error::Config("law needs at least 2 draws".into()));
        }
        let half = config.draws / 2;
        let mut rng = stream_rng(config.seed, 0);
        let eps = (0..half).map(|_| rng.sample(StandardNormal)).collect();
        let columns = thresholds
            .iter()
            .enumerate()
            .map(|(j, &a)| {
                let sampler = LSampler::new(p, a)?;
                let mut rng = stream_rng(config.seed, j as u64 + 1);
                Ok((0..half).map(|_| sampler.sample(&mut rng)).collect())
            })
            .collect::<Result<_>>()?;
        Ok(Self { p, thresholds: thresholds.to_vec(), config, half, eps, columns })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn config(&self) -> LawConfig {
        self.config
    }

    /// Sorted sample of `σ₀ ε₀ + Σ σ_j L^j`, each base draw paired with its
    /// negation so the sample is exactly symmetric.
    pub fn sample(&self, normal_scale: f64, scales: &[f64]) -> Vec<f64> {
        assert_eq!(scales.len(), self.columns.len(), "one scale per column");
        let mut base: Vec<f64> = self.eps.iter().map(|e| normal_scale * e).collect();
        for (col, &s) in self.columns.iter().zip(scales) {
            if s != 0.0 {
                base.iter_mut().zip(col).for_each(|(b, l)| *b += s * l);
            }
        }
        let mut out = Vec::with_capacity(2 * self.half);
        out.extend(base.iter().map(|v| -v));
        out.extend_from_slice(&base);
        out.sort_unstable_by(f64::total_cmp);
        out
    }

    pub fn quantiles(&self, normal_scale: f64, scales: &[f64], xis: &[f64]) -> Result<Vec<QuantileEstimate>> {
        let sample = self.sample(normal_scale, scales);
        xis.iter().map(|&xi| quantile_from_sorted(&sample, xi)).collect()
    }
}

/// Type-7 (linear interpolation) quantile of a sorted sample. The standard
/// error uses the asymptotic order-statistic formula with a difference-
/// quotient density estimate, counting only the independent half of a
/// mirrored sample.
pub fn quantile_from_sorted(sorted: &[f64], xi: f64) -> Result<QuantileEstimate> {
    if !(xi > 0.0 && xi < 1.0) {
        return Err(NumericError::Domain(format!("quantile level must be in (0, 1), got {xi}")).into());
    }
    let value = interp(sorted, xi);
    let n_eff = (sorted.len() / 2).max(1) as f64;
    let delta = (n_eff.powf(-1.0 / 3.0)).min(0.5 * xi.min(1.0 - xi));
    let spread = interp(sorted, xi + delta) - interp(sorted, xi - delta);
    let mc_se = (xi * (1.0 - xi) / n_eff).sqrt() * spread / (2.0 * delta);
    Ok(QuantileEstimate { xi, value, mc_se })
}

fn interp(sorted: &[f64], xi: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * xi;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Within-arm sample moments for one stratum.
#[derive(Debug, Clone)]
struct ArmMoments {
    /// `s²_[k]Y(z)`.
    s2_y: f64,
    /// `s_[k]XY(z)`.
    s_xy: Vec<f64>,
}

fn arm_moments(pop: &StratifiedPopulation, assignment: &Assignment, y: &[f64], k: usize, arm: bool) -> Result<ArmMoments> {
    let s = pop.stratum(k);
    let units: Vec<usize> = s.units.iter().copied().filter(|&i| assignment.z[i] == arm).collect();
    if units.len() < 2 {
        return Err(Error::InsufficientArm { stratum: s.label.clone(), arm: arm as u8, count: units.len() });
    }
    let mx = mean_rows(pop, &units);
    let my = units.iter().map(|&i| y[i]).sum::<f64>() / units.len() as f64;
    let mut s2_y = 0.0;
    let mut s_xy = vec![0.0; pop.dim()];
    for &i in &units {
        let dy = y[i] - my;
        s2_y += dy * dy;
        for ((acc, x), m) in s_xy.iter_mut().zip(pop.x(i)).zip(&mx) {
            *acc += (x - m) * dy;
        }
    }
    let div = (units.len() - 1) as f64;
    s_xy.iter_mut().for_each(|v| *v /= div);
    Ok(ArmMoments { s2_y: s2_y / div, s_xy })
}

/// `Σ̂_ττ`, `Σ̂_τx` and `R̂²` for the overall criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallEstimates {
    pub sigma_tt: f64,
    pub sigma_tx: Vec<f64>,
    pub r2: f64,
    /// `R̂²` before clipping to `[0, 1]`.
    pub r2_raw: f64,
}

pub fn overall_variance_estimators(
    pop: &StratifiedPopulation,
    dm: &DesignMatrices,
    assignment: &Assignment,
    y: &[f64],
) -> Result<OverallEstimates> {
    let mut sigma_tt = 0.0;
    let mut sigma_tx = vec![0.0; pop.dim()];
    for (k, s) in pop.strata().iter().enumerate() {
        let pk = s.propensity;
        let w = pop.weight(k);
        let m1 = arm_moments(pop, assignment, y, k, true)?;
        let m0 = arm_moments(pop, assignment, y, k, false)?;
        sigma_tt += w * (m1.s2_y / pk + m0.s2_y / (1.0 - pk));
        for ((acc, a), b) in sigma_tx.iter_mut().zip(&m1.s_xy).zip(&m0.s_xy) {
            *acc += w * (a / pk + b / (1.0 - pk));
        }
    }
    let explained = dm.sigma_chol().quad_form(&sigma_tx);
    let r2_raw = if sigma_tt > 0.0 { explained / sigma_tt } else { 0.0 };
    Ok(OverallEstimates { sigma_tt, sigma_tx, r2: r2_raw.clamp(0.0, 1.0), r2_raw })
}

/// Stratum-`k` estimators used by SRRsM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumEstimates {
    /// `s²_[k]τ|X`.
    pub s2_tau_x: f64,
    /// `Σ̂_[k]ττ`, floored at 0.
    pub sigma_tt: f64,
    pub sigma_tt_raw: f64,
    /// `R̂²_[k]`, clipped to `[0, 1]`.
    pub r2: f64,
    pub r2_raw: f64,
}

impl StratumEstimates {
    pub fn floored(&self) -> bool {
        self.sigma_tt_raw < 0.0
    }

    pub fn clipped(&self) -> bool {
        self.r2_raw != self.r2
    }
}

pub fn stratum_variance_estimators(
    pop: &StratifiedPopulation,
    dm: &DesignMatrices,
    assignment: &Assignment,
    y: &[f64],
    k: usize,
) -> Result<StratumEstimates> {
    let pk = pop.stratum(k).propensity;
    let vk = pk * (1.0 - pk);
    let chol = dm.stratum_chol(pop, k)?;
    // S⁻¹ = Σ_[k]xx⁻¹ / (p(1 − p))
    let quad_s = |v: &[f64]| chol.quad_form(v) / vk;
    let m1 = arm_moments(pop, assignment, y, k, true)?;
    let m0 = arm_moments(pop, assignment, y, k, false)?;
    let d: Vec<f64> = m1.s_xy.iter().zip(&m0.s_xy).map(|(a, b)| a - b).collect();
    let s2_tau_x = quad_s(&d);
    let sigma_tt_raw = m1.s2_y / pk + m0.s2_y / (1.0 - pk) - s2_tau_x;
    let sigma_tt = sigma_tt_raw.max(0.0);
    let explained = quad_s(&m1.s_xy) / pk + quad_s(&m0.s_xy) / (1.0 - pk) - s2_tau_x;
    // explained ≥ 0 always, so a negative raw R̂² means Σ̂_[k]ττ < 0
    let r2_raw = if sigma_tt_raw != 0.0 { explained / sigma_tt_raw } else { 0.0 };
    Ok(StratumEstimates { s2_tau_x, sigma_tt, sigma_tt_raw, r2: r2_raw.clamp(0.0, 1.0), r2_raw })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
}

impl ConfidenceInterval {
    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub law_draws: Option<usize>,
    pub law_seed: Option<u64>,
    /// The assignment came from the SR fallback, so the SR interval is used.
    pub fell_back: bool,
    /// Some `R̂²` was clipped into `[0, 1]`.
    pub r2_clipped: bool,
    /// Strata whose `Σ̂_[k]ττ` was floored at 0.
    pub floored_strata: Vec<String>,
    pub ridge: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub method: Method,
    pub tau_hat: f64,
    /// Estimated asymptotic variance of `√n(τ̂ − τ)`.
    pub variance_estimate: f64,
    pub r2_estimate: Vec<f64>,
    pub alpha: f64,
    pub ci: ConfidenceInterval,
    pub thresholds: Vec<f64>,
    pub v_pa: Vec<f64>,
    /// Law quantiles at `α/2` and `1 − α/2`.
    pub quantiles: Vec<QuantileEstimate>,
    pub metadata: ReportMetadata,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha must be in (0, 1), got {alpha}")))
    }
}

/// Conservative normal interval `τ̂ ∓ (Σ̂_ττ/n)^{1/2} z_{1−α/2}` under SR.
pub fn ci_sr(pop: &StratifiedPopulation, dm: &DesignMatrices, assignment: &Assignment, y: &[f64], alpha: f64) -> Result<InferenceReport> {
    check_alpha(alpha)?;
    let tau_hat = stratified_diff_in_means(pop, assignment, y)?;
    let est = overall_variance_estimators(pop, dm, assignment, y)?;
    let z = normal_quantile(1.0 - alpha / 2.0)?;
    let half = (est.sigma_tt / pop.len() as f64).sqrt() * z;
    Ok(InferenceReport {
        method: Method::Sr,
        tau_hat,
        variance_estimate: est.sigma_tt,
        r2_estimate: vec![est.r2],
        alpha,
        ci: ConfidenceInterval { lower: tau_hat - half, upper: tau_hat + half },
        thresholds: Vec::new(),
        v_pa: Vec::new(),
        quantiles: vec![
            QuantileEstimate { xi: alpha / 2.0, value: -z, mc_se: 0.0 },
            QuantileEstimate { xi: 1.0 - alpha / 2.0, value: z, mc_se: 0.0 },
        ],
        metadata: ReportMetadata { r2_clipped: est.r2 != est.r2_raw, ridge: dm.ridge, ..Default::default() },
    })
}

/// SRRoM interval
/// `[τ̂ − (Σ̂_ττ/n)^{1/2} ν_{1−α/2}, τ̂ − (Σ̂_ττ/n)^{1/2} ν_{α/2}]`.
pub fn ci_srrom(
    pop: &StratifiedPopulation,
    dm: &DesignMatrices,
    assignment: &Assignment,
    y: &[f64],
    a: f64,
    alpha: f64,
    law: LawConfig,
) -> Result<InferenceReport> {
    let table = NuTable::new(pop.dim(), &[a], law)?;
    ci_srrom_with_table(pop, dm, assignment, y, alpha, &table)
}

/// [`ci_srrom`] reusing precomputed law draws (one column, threshold `a`).
pub fn ci_srrom_with_table(
    pop: &StratifiedPopulation,
    dm: &DesignMatrices,
    assignment: &Assignment,
    y: &[f64],
    alpha: f64,
    table: &NuTable,
) -> Result<InferenceReport> {
    check_alpha(alpha)?;
    if table.thresholds().len() != 1 {
        return Err(Error::Config("SRRoM needs a single-threshold law table".into()));
    }
    let a = table.thresholds()[0];
    let tau_hat = stratified_diff_in_means(pop, assignment, y)?;
    let est = overall_variance_estimators(pop, dm, assignment, y)?;
    srrom_report(pop.len(), tau_hat, &est, alpha, table, dm.ridge, a)
}

/// [`ci_srrom_with_table`] with `R²` supplied by the caller instead of estimated.
pub fn ci_srrom_fixed_r2(
    pop: &StratifiedPopulation,
    dm: &DesignMatrices,
    assignment: &Assignment,
    y: &[f64],
    alpha: f64,
    table: &NuTable,
    r2: f64,
) -> Result<InferenceReport> {
    check_alpha(alpha)?;
    if !(0.0..=1.0).contains(&r2) || table.thresholds().len() != 1 {
        return Err(Error::Config(format!("r2 must be in [0, 1] with a single-threshold table, got {r2}")));
    }
    let tau_hat = stratified_diff_in_means(pop, assignment, y)?;
    let mut est = overall_variance_estimators(pop, dm, assignment, y)?;
    est.r2 = r2;
    est.r2_raw = r2;
    srrom_report(pop.len(), tau_hat, &est, alpha, table, dm.ridge, table.thresholds()[0])
}

fn srrom_report(n: usize, tau_hat: f64, est: &OverallEstimates, alpha: f64, table: &NuTable, ridge: Option<f64>, a: f64) -> Result<InferenceReport> {
    let v = v_pa(table.p(), a)?;
    let q = table.quantiles((1.0 - est.r2).sqrt(), &[est.r2.sqrt()], &[alpha / 2.0, 1.0 - alpha / 2.0])?;
    let scale = (est.sigma_tt / n as f64).sqrt();
    Ok(InferenceReport {
        method: Method::Srrom,
        tau_hat,
        variance_estimate: est.sigma_tt * (1.0 - (1.0 - v) * est.r2),
        r2_estimate: vec![est.r2],
        alpha,
        ci: ConfidenceInterval { lower: tau_hat - scale * q[1].value, upper: tau_hat - scale * q[0].value },
        thresholds: vec![a],
        v_pa: vec![v],
        quantiles: q,
        metadata: ReportMetadata {
            law_draws: Some(table.config().draws),
            law_seed: Some(table.config().seed),
            r2_clipped: est.r2 != est.r2_raw,
            ridge,
            ..Default::default()
        },
    })
}

/// SRRsM interval `[τ̂ − q̂_{1−α/2}/√n, τ̂ − q̂_{α/2}/√n]` from the estimated
/// stratum mixture.
pub fn ci_srrsm(
    pop: &StratifiedPopulation,
    dm: &DesignMatrices,
    assignment: &Assignment,
    y: &[f64],
    thresholds: &[f64],
    alpha: f64,
    law: LawConfig,
) -> Result<InferenceReport> {
    let table = NuTable::new(pop.dim(), thresholds, law)?;
    ci_srrsm_with_table(pop, dm, assignment, y, alpha, &table)
}

/// [`ci_srrsm`] reusing precomputed law draws (one column per stratum).
pub fn ci_srrsm_with_table(
    pop: &StratifiedPopulation,
    dm: &DesignMatrices,
    assignment: &Assignment,
    y: &[f64],
    alpha: f64,
    table: &NuTable,
) -> Result<InferenceReport> {
    check_alpha(alpha)?;
    let kk = pop.num_strata();
    if table.thresholds().len() != kk {
        return Err(Error::Config(format!("SRRsM law table needs {kk} columns")));
    }
    let tau_hat = stratified_diff_in_means(pop, assignment, y)?;
    let est: Vec<StratumEstimates> = (0..kk)
        .map(|k| stratum_variance_estimators(pop, dm, assignment, y, k))
        .collect::<Result<_>>()?;
    let v: Vec<f64> = table.thresholds().iter().map(|&a| v_pa(pop.dim(), a)).collect::<Result<_>>()?;

    let mut variance = 0.0;
    let mut normal_var = 0.0;
    let mut scales = Vec::with_capacity(kk);
    for (k, e) in est.iter().enumerate() {
        let w = pop.weight(k);
        variance += w * e.sigma_tt * (1.0 - (1.0 - v[k]) * e.r2);
        normal_var += w * e.sigma_tt * (1.0 - e.r2);
        scales.push((w * e.sigma_tt * e.r2).sqrt());
    }
    let q = table.quantiles(normal_var.sqrt(), &scales, &[alpha / 2.0, 1.0 - alpha / 2.0])?;
    let root_n = (pop.len() as f64).sqrt();
    Ok(InferenceReport {
        method: Method::Srrsm,
        tau_hat,
        variance_estimate: variance,
        r2_estimate: est.iter().map(|e| e.r2).collect(),
        alpha,
        ci: ConfidenceInterval { lower: tau_hat - q[1].value / root_n, upper: tau_hat - q[0].value / root_n },
        thresholds: table.thresholds().to_vec(),
        v_pa: v,
        quantiles: q,
        metadata: ReportMetadata {
            law_draws: Some(table.config().draws),
            law_seed: Some(table.config().seed),
            r2_clipped: est.iter().any(StratumEstimates::clipped),
            floored_strata: est
                .iter()
                .enumerate()
                .filter(|(_, e)| e.floored())
                .map(|(k, _)| pop.stratum(k).label.clone())
                .collect(),
            ridge: dm.ridge,
            ..Default::default()
        },
    })
}

/// Interval matching the design `criterion`. SRRdM has no interval because
/// `τ̂` is asymptotically biased under it.
pub fn analyze(
    pop: &StratifiedPopulation,
    dm: &DesignMatrices,
    assignment: &Assignment,
    y: &[f64],
    criterion: &BalanceCriterion,
    alpha: f64,
    law: LawConfig,
) -> Result<InferenceReport> {
    match criterion.method {
        Method::Sr => ci_sr(pop, dm, assignment, y, alpha),
        Method::Srrom => ci_srrom(pop, dm, assignment, y, criterion.threshold(), alpha, law),
        Method::Srrsm => ci_srrsm(pop, dm, assignment, y, &criterion.thresholds, alpha, law),
        Method::Srrdm => Err(Error::Config("no confidence interval is defined for SRRdM".into())),
    }
}

/// Population moments of one stratum computed from both potential outcomes.
#[derive(Debug, Clone)]
struct StratumTruth {
    s2_y1: f64,
    s2_y0: f64,
    s2_tau: f64,
    s_xy1: Vec<f64>,
    s_xy0: Vec<f64>,
}

fn stratum_truth(pop: &StratifiedPopulation, dm: &DesignMatrices, k: usize) -> Result<StratumTruth> {
    let po = pop.potential().ok_or(Error::MissingPotentialOutcomes)?;
    let s = pop.stratum(k);
    let nk = s.size() as f64;
    let mean = |v: &[f64]| s.units.iter().map(|&i| v[i]).sum::<f64>() / nk;
    let (m1, m0) = (mean(&po.treated), mean(&po.control));
    let xbar = &dm.stratum_means[k];
    let mut out = StratumTruth { s2_y1: 0.0, s2_y0: 0.0, s2_tau: 0.0, s_xy1: vec![0.0; pop.dim()], s_xy0: vec![0.0; pop.dim()] };
    for &i in &s.units {
        let d1 = po.treated[i] - m1;
        let d0 = po.control[i] - m0;
        out.s2_y1 += d1 * d1;
        out.s2_y0 += d0 * d0;
        out.s2_tau += (d1 - d0) * (d1 - d0);
        for (j, (x, m)) in pop.x(i).iter().zip(xbar).enumerate() {
            out.s_xy1[j] += (x - m) * d1;
            out.s_xy0[j] += (x - m) * d0;
        }
    }
    let div = nk - 1.0;
    out.s2_y1 /= div;
    out.s2_y0 /= div;
    out.s2_tau /= div;
    out.s_xy1.iter_mut().chain(out.s_xy0.iter_mut()).for_each(|v| *v /= div);
    Ok(out)
}

/// Asymptotic variances computed from the full potential-outcome table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoreticalVariances {
    pub sigma_tt: f64,
    pub sigma_tx: Vec<f64>,
    pub r2: f64,
    pub stratum_sigma_tt: Vec<f64>,
    pub stratum_r2: Vec<f64>,
    /// `Σ_k π_[k] S²_[k]τ`.
    pub s2_tau: f64,
    pub v_overall: f64,
    pub v_strata: Vec<f64>,
    /// Asymptotic variance of `√n(τ̂ − τ)` under SR, SRRoM and SRRsM.
    pub var_sr: f64,
    pub var_srrom: f64,
    pub var_srrsm: f64,
    /// Percentage reductions relative to SR.
    pub reduction_srrom: f64,
    pub reduction_srrsm: f64,
}

/// Oracle variances for SRRoM at threshold `a` and SRRsM at `stratum_thresholds`.
pub fn theoretical_variances(
    pop: &StratifiedPopulation,
    dm: &DesignMatrices,
    a: f64,
    stratum_thresholds: &[f64],
) -> Result<TheoreticalVariances> {
    let kk = pop.num_strata();
    if stratum_thresholds.len() != kk {
        return Err(Error::Config(format!("need {kk} stratum thresholds")));
    }
    let p = pop.dim();
    let mut sigma_tt = 0.0;
    let mut sigma_tx = vec![0.0; p];
    let mut s2_tau = 0.0;
    let mut stratum_sigma_tt = Vec::with_capacity(kk);
    let mut stratum_r2 = Vec::with_capacity(kk);
    let mut v_strata = Vec::with_capacity(kk);
    let mut var_srrsm = 0.0;
    for k in 0..kk {
        let t = stratum_truth(pop, dm, k)?;
        let pk = pop.stratum(k).propensity;
        let w = pop.weight(k);
        let stt = t.s2_y1 / pk + t.s2_y0 / (1.0 - pk) - t.s2_tau;
        let stx: Vec<f64> = t.s_xy1.iter().zip(&t.s_xy0).map(|(a, b)| a / pk + b / (1.0 - pk)).collect();
        let explained = dm.stratum_chol(pop, k)?.quad_form(&stx);
        let r2k = if stt > 0.0 { (explained / stt).clamp(0.0, 1.0) } else { 0.0 };
        let vk = v_pa(p, stratum_thresholds[k])?;
        var_srrsm += w * (stt - (1.0 - vk) * explained.min(stt.max(0.0)));
        sigma_tt += w * stt;
        sigma_tx.iter_mut().zip(&stx).for_each(|(acc, v)| *acc += w * v);
        s2_tau += w * t.s2_tau;
        stratum_sigma_tt.push(stt);
        stratum_r2.push(r2k);
        v_strata.push(vk);
    }
    let explained = dm.sigma_chol().quad_form(&sigma_tx);
    let r2 = if sigma_tt > 0.0 { (explained / sigma_tt).clamp(0.0, 1.0) } else { 0.0 };
    let v_overall = v_pa(p, a)?;
    let var_srrom = sigma_tt - (1.0 - v_overall) * explained.min(sigma_tt.max(0.0));
    let pct = |v: f64| if sigma_tt > 0.0 { 100.0 * (sigma_tt - v) / sigma_tt } else { 0.0 };
    Ok(TheoreticalVariances {
        sigma_tt,
        sigma_tx,
        r2,
        stratum_sigma_tt,
        stratum_r2,
        s2_tau,
        v_overall,
        v_strata,
        var_sr: sigma_tt,
        var_srrom,
        var_srrsm,
        reduction_srrom: pct(var_srrom),
        reduction_srrsm: pct(var_srrsm),
    })
}

/// `U_τx = Σ_k π_[k] {(1 − p_[k]) S_[k]XY(1) + p_[k] S_[k]XY(0)} / (p₁ p₀)`.
pub fn u_tau_x(pop: &StratifiedPopulation, dm: &DesignMatrices) -> Result<Vec<f64>> {
    let p1 = dm.p1;
    let p0 = 1.0 - p1;
    let mut out = vec![0.0; pop.dim()];
    for k in 0..pop.num_strata() {
        let t = stratum_truth(pop, dm, k)?;
        let pk = pop.stratum(k).propensity;
        let w = pop.weight(k) / (p1 * p0);
        for ((o, a), b) in out.iter_mut().zip(&t.s_xy1).zip(&t.s_xy0) {
            *o += w * ((1.0 - pk) * a + pk * b);
        }
    }
    Ok(out)
}

/// Asymptotic mean of `√n(τ̂ − τ)` under SRRdM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrrdmBias {
    pub bias: f64,
    /// Monte Carlo standard error of `bias`.
    pub mc_se: f64,
    /// Monte Carlo estimate of the SRRdM acceptance probability `p′_a`.
    pub acceptance: f64,
    pub accepted: usize,
    pub attempts: u64,
    pub u_tx: Vec<f64>,
}

/// Evaluates `U_τx L⁻ᵀ {E(D | DᵀD < a) − L⁻¹ω}` with `U_xx = LLᵀ` and
/// `D ~ N(L⁻¹ω, I)`, by rejection sampling `mc_draws` accepted draws.
///
/// Any square root of `U_xx` gives the same value because the truncation
/// region `DᵀD < a` is rotation invariant; the Cholesky factor is used.
pub fn srrdm_bias<R: Rng + ?Sized>(
    pop: &StratifiedPopulation,
    dm: &DesignMatrices,
    a: f64,
    mc_draws: usize,
    rng: &mut R,
) -> Result<SrrdmBias> {
    let u_tx = u_tau_x(pop, dm)?;
    let chol = dm.u_chol();
    let w = chol.forward(&u_tx);
    let center = chol.forward(&dm.omega);
    if w.iter().all(|&v| v == 0.0) {
        return Ok(SrrdmBias { bias: 0.0, mc_se: 0.0, acceptance: f64::NAN, accepted: 0, attempts: 0, u_tx });
    }
    let p = pop.dim();
    let max_attempts = (mc_draws as u64).saturating_mul(100_000).max(1_000_000);
    let mut d = vec![0.0; p];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    let mut accepted = 0usize;
    let mut attempts = 0u64;
    while accepted < mc_draws {
        if attempts >= max_attempts {
            return Err(Error::AttemptsExhausted { attempts, stratum: None });
        }
        attempts += 1;
        let mut ss = 0.0;
        for (dj, cj) in d.iter_mut().zip(&center) {
            let g: f64 = rng.sample(StandardNormal);
            *dj = cj + g;
            ss += *dj * *dj;
        }
        if ss < a {
            // projection of D − L⁻¹ω onto w
            let v: f64 = w.iter().zip(&d).zip(&center).map(|((wj, dj), cj)| wj * (dj - cj)).sum();
            sum += v;
            sum_sq += v * v;
            accepted += 1;
        }
    }
    let m = accepted as f64;
    let bias = sum / m;
    let var = if accepted > 1 { (sum_sq - m * bias * bias) / (m - 1.0) } else { 0.0 };
    Ok(SrrdmBias {
        bias,
        mc_se: (var.max(0.0) / m).sqrt(),
        acceptance: m / attempts as f64,
        accepted,
        attempts,
        u_tx,
    })
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F₁ − F₂|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_unstable_by(f64::total_cmp);
    y.sort_unstable_by(f64::total_cmp);
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < x.len() && j < y.len() {
        let t = x[i].min(y[j]);
        while i < x.len() && x[i] <= t {
            i += 1;
        }
        while j < y.len() && y[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    d
}

/// Asymptotic two-sample KS critical value at level `alpha`.
pub fn ks_critical(n: usize, m: usize, alpha: f64) -> f64 {
    let c = (-(alpha / 2.0).ln() / 2.0).sqrt();
    c * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}
