//! The fixed finite population and stratified complete randomization.
//!
//! A population is a unit table (covariate rows in input order) partitioned
//! into strata. Stratum `k` treats exactly `n_[k]1 = p_[k] n_[k]` units, so
//! the propensity must make that count an integer.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedRecord;

/// Tolerance for deciding that `n_[k] p_[k]` is an integer.
const INTEGRALITY_TOL: f64 = 1e-9;

/// Both potential outcomes for every unit (simulation / oracle mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialOutcomes {
    pub treated: Vec<f64>,
    pub control: Vec<f64>,
}

impl PotentialOutcomes {
    pub fn len(&self) -> usize {
        self.treated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.treated.is_empty()
    }

    pub fn effect(&self, i: usize) -> f64 {
        self.treated[i] - self.control[i]
    }
}

/// Raw inputs for a population, before validation.
#[derive(Debug, Clone, Default)]
pub struct PopulationInput {
    /// Covariate count `p`.
    pub dim: usize,
    /// Row-major `n × p` covariates.
    pub covariates: Vec<f64>,
    /// Stratum index (`0..K`) of each unit.
    pub stratum_of: Vec<usize>,
    /// One label per stratum.
    pub labels: Vec<String>,
    /// One propensity score per stratum.
    pub propensity: Vec<f64>,
    pub potential: Option<PotentialOutcomes>,
    pub observed: Option<Vec<f64>>,
}

impl PopulationInput {
    /// Units laid out stratum by stratum: the first `sizes[0]` rows belong to
    /// stratum 0, and so on. Labels are the stratum indices.
    pub fn from_sizes(sizes: &[usize], propensity: Vec<f64>, dim: usize, covariates: Vec<f64>) -> Self {
        let stratum_of = sizes
            .iter()
            .enumerate()
            .flat_map(|(k, &s)| std::iter::repeat_n(k, s))
            .collect();
        Self {
            dim,
            covariates,
            stratum_of,
            labels: (0..sizes.len()).map(|k| k.to_string()).collect(),
            propensity,
            potential: None,
            observed: None,
        }
    }

    pub fn with_potential(mut self, potential: PotentialOutcomes) -> Self {
        self.potential = Some(potential);
        self
    }

    pub fn with_observed(mut self, observed: Vec<f64>) -> Self {
        self.observed = Some(observed);
        self
    }

    pub fn build(self) -> Result<StratifiedPopulation> {
        StratifiedPopulation::new(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IssueKind {
    Shape { detail: String },
    EmptyStratum { stratum: String },
    PropensityOutOfRange { stratum: String, propensity: f64 },
    NonIntegralTreated { stratum: String, size: usize, propensity: f64 },
    /// Fewer than two units in an arm: within-arm variances are undefined.
    SmallArm { stratum: String, arm: u8, count: usize },
    /// The covariate is constant inside every stratum, so `Σxx` is singular.
    ConstantCovariate { column: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Issue {
    pub severity: Severity,
    #[serde(flatten)]
    pub kind: IssueKind,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            IssueKind::Shape { detail } => write!(f, "{detail}"),
            IssueKind::EmptyStratum { stratum } => write!(f, "stratum {stratum} has no units"),
            IssueKind::PropensityOutOfRange { stratum, propensity } => {
                write!(f, "stratum {stratum}: propensity {propensity} is outside (0, 1)")
            }
            IssueKind::NonIntegralTreated { stratum, size, propensity } => write!(
                f,
                "stratum {stratum}: {size} x {propensity} = {} is not an integral treated count",
                *size as f64 * propensity
            ),
            IssueKind::SmallArm { stratum, arm, count } => write!(
                f,
                "stratum {stratum}: arm {arm} has {count} unit(s) (< 2); stratum-level variance estimation disabled"
            ),
            IssueKind::ConstantCovariate { column } => {
                write!(f, "covariate {column} is constant within every stratum; Sigma_xx is singular")
            }
        }
    }
}

/// Outcome of [`validate_population`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.errors().next().is_none()
    }

    pub fn errors(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.severity == Severity::Warning)
    }

    fn error(&mut self, kind: IssueKind) {
        self.issues.push(Issue { severity: Severity::Error, kind });
    }

    fn warn(&mut self, kind: IssueKind) {
        self.issues.push(Issue { severity: Severity::Warning, kind });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msgs: Vec<String> = self.errors().map(ToString::to_string).collect();
        if msgs.is_empty() {
            write!(f, "no errors")
        } else {
            write!(f, "{}", msgs.join("; "))
        }
    }
}

/// Checks raw population inputs. Never fails; problems are listed in the
/// report as errors (the population cannot be built) or warnings.
pub fn validate_population(input: &PopulationInput) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = input.stratum_of.len();
    let k_count = input.propensity.len();

    if input.dim == 0 {
        report.error(IssueKind::Shape { detail: "covariate dimension must be at least 1".into() });
    }
    if input.covariates.len() != n * input.dim {
        report.error(IssueKind::Shape {
            detail: format!("expected {} covariate values for {n} units, got {}", n * input.dim, input.covariates.len()),
        });
    }
    if input.labels.len() != k_count {
        report.error(IssueKind::Shape {
            detail: format!("{} stratum labels for {k_count} propensities", input.labels.len()),
        });
    }
    if input.covariates.iter().any(|v| !v.is_finite()) {
        report.error(IssueKind::Shape { detail: "covariates contain non-finite values".into() });
    }
    if let Some(bad) = input.stratum_of.iter().find(|&&k| k >= k_count) {
        report.error(IssueKind::Shape { detail: format!("stratum index {bad} out of range (K = {k_count})") });
    }
    if let Some(po) = &input.potential {
        if po.treated.len() != n || po.control.len() != n {
            report.error(IssueKind::Shape { detail: "potential outcomes length mismatch".into() });
        }
    }
    if let Some(y) = &input.observed {
        if y.len() != n {
            report.error(IssueKind::Shape { detail: "observed outcome length mismatch".into() });
        }
    }
    if !report.is_valid() {
        return report;
    }

    let label = |k: usize| input.labels[k].clone();
    let mut sizes = vec![0usize; k_count];
    for &k in &input.stratum_of {
        sizes[k] += 1;
    }
    for k in 0..k_count {
        let p = input.propensity[k];
        if sizes[k] == 0 {
            report.error(IssueKind::EmptyStratum { stratum: label(k) });
            continue;
        }
        if !(p > 0.0 && p < 1.0) {
            report.error(IssueKind::PropensityOutOfRange { stratum: label(k), propensity: p });
            continue;
        }
        let treated = sizes[k] as f64 * p;
        if (treated - treated.round()).abs() > INTEGRALITY_TOL || treated.round() < 1.0 || treated.round() >= sizes[k] as f64 {
            report.error(IssueKind::NonIntegralTreated { stratum: label(k), size: sizes[k], propensity: p });
            continue;
        }
        let n1 = treated.round() as usize;
        for (arm, count) in [(1u8, n1), (0u8, sizes[k] - n1)] {
            if count < 2 {
                report.warn(IssueKind::SmallArm { stratum: label(k), arm, count });
            }
        }
    }

    // A covariate that never varies inside any stratum has zero within-stratum variance.
    let dim = input.dim;
    for col in 0..dim {
        let mut first: Vec<Option<f64>> = vec![None; k_count];
        let mut varies = false;
        for (i, &k) in input.stratum_of.iter().enumerate() {
            let v = input.covariates[i * dim + col];
            match first[k] {
                None => first[k] = Some(v),
                Some(f) if f != v => {
                    varies = true;
                    break;
                }
                _ => {}
            }
        }
        if !varies {
            report.warn(IssueKind::ConstantCovariate { column: col });
        }
    }
    report
}

/// One stratum of the unit table.
#[derive(Debug, Clone, PartialEq)]
pub struct Stratum {
    pub label: String,
    /// Unit indices (rows of the unit table), in input order.
    pub units: Vec<usize>,
    /// `n_[k]1`.
    pub treated: usize,
    /// `p_[k]`.
    pub propensity: f64,
}

impl Stratum {
    pub fn size(&self) -> usize {
        self.units.len()
    }

    pub fn controls(&self) -> usize {
        self.units.len() - self.treated
    }
}

/// Validated, immutable finite population.
#[derive(Debug, Clone, PartialEq)]
pub struct StratifiedPopulation {
    dim: usize,
    covariates: Vec<f64>,
    stratum_of: Vec<usize>,
    strata: Vec<Stratum>,
    potential: Option<PotentialOutcomes>,
    observed: Option<Vec<f64>>,
    warnings: Vec<Issue>,
}

impl StratifiedPopulation {
    pub fn new(input: PopulationInput) -> Result<Self> {
        let report = validate_population(&input);
        if !report.is_valid() {
            return Err(Error::InvalidPopulation(report));
        }
        let mut strata: Vec<Stratum> = input
            .labels
            .iter()
            .zip(&input.propensity)
            .map(|(label, &p)| Stratum { label: label.clone(), units: Vec::new(), treated: 0, propensity: p })
            .collect();
        for (i, &k) in input.stratum_of.iter().enumerate() {
            strata[k].units.push(i);
        }
        for s in &mut strata {
            s.treated = (s.units.len() as f64 * s.propensity).round() as usize;
        }
        Ok(Self {
            dim: input.dim,
            covariates: input.covariates,
            stratum_of: input.stratum_of,
            strata,
            potential: input.potential,
            observed: input.observed,
            warnings: report.issues,
        })
    }

    /// Number of units `n`.
    pub fn len(&self) -> usize {
        self.stratum_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stratum_of.is_empty()
    }

    /// Covariate dimension `p`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_strata(&self) -> usize {
        self.strata.len()
    }

    pub fn strata(&self) -> &[Stratum] {
        &self.strata
    }

    pub fn stratum(&self, k: usize) -> &Stratum {
        &self.strata[k]
    }

    pub fn stratum_of(&self, unit: usize) -> usize {
        self.stratum_of[unit]
    }

    /// Covariate row of unit `i`.
    pub fn x(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.dim..(i + 1) * self.dim]
    }

    pub fn covariates(&self) -> &[f64] {
        &self.covariates
    }

    /// `π_[k] = n_[k] / n`.
    pub fn weight(&self, k: usize) -> f64 {
        self.strata[k].size() as f64 / self.len() as f64
    }

    /// `n_1`, the total treated count.
    pub fn total_treated(&self) -> usize {
        self.strata.iter().map(|s| s.treated).sum()
    }

    pub fn potential(&self) -> Option<&PotentialOutcomes> {
        self.potential.as_ref()
    }

    pub fn observed(&self) -> Option<&[f64]> {
        self.observed.as_deref()
    }

    /// Validation warnings recorded at construction.
    pub fn warnings(&self) -> &[Issue] {
        &self.warnings
    }

    /// The average treatment effect `τ` (requires potential outcomes).
    pub fn tau(&self) -> Result<f64> {
        let po = self.potential.as_ref().ok_or(Error::MissingPotentialOutcomes)?;
        Ok((0..self.len()).map(|i| po.effect(i)).sum::<f64>() / self.len() as f64)
    }

    /// Observed outcomes under `assignment`: the stored column in analysis
    /// mode, otherwise revealed from the potential outcomes.
    pub fn observed_outcomes(&self, assignment: &Assignment) -> Result<Vec<f64>> {
        if let Some(y) = &self.observed {
            return Ok(y.clone());
        }
        let po = self.potential.as_ref().ok_or(Error::MissingOutcomes)?;
        Ok(assignment
            .z
            .iter()
            .enumerate()
            .map(|(i, &t)| if t { po.treated[i] } else { po.control[i] })
            .collect())
    }

    /// Same population with a different potential-outcome table.
    pub fn with_potential(&self, potential: PotentialOutcomes) -> Result<Self> {
        if potential.treated.len() != self.len() || potential.control.len() != self.len() {
            return Err(Error::Config("potential outcomes length mismatch".into()));
        }
        let mut out = self.clone();
        out.potential = Some(potential);
        Ok(out)
    }

    /// Same population with an observed outcome column.
    pub fn with_observed(&self, observed: Vec<f64>) -> Result<Self> {
        if observed.len() != self.len() {
            return Err(Error::Config("observed outcome length mismatch".into()));
        }
        let mut out = self.clone();
        out.observed = Some(observed);
        Ok(out)
    }

    /// Checks that an assignment has the right length and per-stratum counts.
    pub fn check_assignment(&self, assignment: &Assignment) -> Result<()> {
        if assignment.z.len() != self.len() {
            return Err(Error::AssignmentMismatch(format!(
                "{} indicators for {} units",
                assignment.z.len(),
                self.len()
            )));
        }
        for s in &self.strata {
            let count = s.units.iter().filter(|&&i| assignment.z[i]).count();
            if count != s.treated {
                return Err(Error::AssignmentMismatch(format!(
                    "stratum {} has {count} treated units, design requires {}",
                    s.label, s.treated
                )));
            }
        }
        Ok(())
    }
}

/// Binary treatment vector `Z`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub z: Vec<bool>,
    pub seed_record: Option<SeedRecord>,
}

impl Assignment {
    pub fn new(z: Vec<bool>) -> Self {
        Self { z, seed_record: None }
    }

    pub fn is_treated(&self, unit: usize) -> bool {
        self.z[unit]
    }

    pub fn treated_in(&self, stratum: &Stratum) -> usize {
        stratum.units.iter().filter(|&&i| self.z[i]).count()
    }
}

/// Partial Fisher–Yates: after the call, `units[..treated]` is a uniformly
/// random `treated`-subset of the slice.
pub(crate) fn partial_shuffle<R: Rng + ?Sized>(units: &mut [usize], treated: usize, rng: &mut R) {
    let len = units.len();
    for i in 0..treated {
        let j = rng.random_range(i..len);
        units.swap(i, j);
    }
}

/// Redraws stratum `k` in place.
pub(crate) fn randomize_stratum<R: Rng + ?Sized>(
    stratum: &Stratum,
    scratch: &mut Vec<usize>,
    z: &mut [bool],
    rng: &mut R,
) {
    scratch.clear();
    scratch.extend_from_slice(&stratum.units);
    partial_shuffle(scratch, stratum.treated, rng);
    for &i in &scratch[..stratum.treated] {
        z[i] = true;
    }
    for &i in &scratch[stratum.treated..] {
        z[i] = false;
    }
}

/// Complete randomization within each stratum, strata drawn independently.
pub fn stratified_randomize<R: Rng + ?Sized>(pop: &StratifiedPopulation, rng: &mut R) -> Assignment {
    let mut z = vec![false; pop.len()];
    let mut scratch = Vec::new();
    for s in pop.strata() {
        randomize_stratum(s, &mut scratch, &mut z, rng);
    }
    Assignment::new(z)
}

/// `C(n, k)` without overflow for the sizes this crate meets; saturates.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Number of distinct stratified assignments, `Π_k C(n_[k], n_[k]1)`.
pub fn assignment_count(pop: &StratifiedPopulation) -> u128 {
    pop.strata()
        .iter()
        .map(|s| binomial(s.size(), s.treated))
        .fold(1u128, |acc, c| acc.saturating_mul(c))
}

/// Every valid assignment exactly once, as the cartesian product of
/// per-stratum combinations (stratum 0 varies slowest; combinations in
/// lexicographic order of unit positions).
pub fn enumerate_assignments(pop: &StratifiedPopulation, cap: u128) -> Result<AssignmentEnumerator<'_>> {
    let count = assignment_count(pop);
    if count > cap {
        return Err(Error::CountExceedsCap { count, cap });
    }
    Ok(AssignmentEnumerator {
        pop,
        combos: pop.strata().iter().map(|s| (0..s.treated).collect()).collect(),
        started: false,
        done: false,
    })
}

pub struct AssignmentEnumerator<'a> {
    pop: &'a StratifiedPopulation,
    combos: Vec<Vec<usize>>,
    started: bool,
    done: bool,
}

/// Advances a `k`-combination of `0..n` to its lexicographic successor.
fn next_combination(c: &mut [usize], n: usize) -> bool {
    let k = c.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if c[i] < n - k + i {
            c[i] += 1;
            for j in (i + 1)..k {
                c[j] = c[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

impl Iterator for AssignmentEnumerator<'_> {
    type Item = Assignment;

    fn next(&mut self) -> Option<Assignment> {
        if self.done {
            return None;
        }
        if self.started {
            // odometer: last stratum advances fastest
            let mut k = self.combos.len();
            loop {
                if k == 0 {
                    self.done = true;
                    return None;
                }
                k -= 1;
                let size = self.pop.stratum(k).size();
                if next_combination(&mut self.combos[k], size) {
                    break;
                }
                let t = self.combos[k].len();
                self.combos[k].clear();
                self.combos[k].extend(0..t);
            }
        }
        self.started = true;
        let mut z = vec![false; self.pop.len()];
        for (s, combo) in self.pop.strata().iter().zip(&self.combos) {
            for &pos in combo {
                z[s.units[pos]] = true;
            }
        }
        Some(Assignment::new(z))
    }
}
