//! Replicated sweeps over scenarios and sample sizes.
//!
//! A sweep evaluates every cell `(scenario, n, replication)`. Each cell
//! draws its dataset from a seed derived only from its coordinates and the
//! master seed, and rows are merged in `(scenario, n, replication)` order, so
//! the result does not depend on the number of workers.
//!
//! Population quantities (group covariances, deviations, bounds) depend on
//! `(scenario, n)` only; they are computed once per pair and attached to
//! each of its rows.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Condvar, Mutex};

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::{ipw_learner_fit_with, t_learner_fit_with, Design};
use crate::io::{csv_writer, finish_csv, fmt_float, fmt_opt_float, write_atomic};
use crate::risk::{decompose_risk_from, exact_excess_risk, group_populations, theorem_bounds_with, BoundConstants, DeviationReport, RiskTerms, TheoremBounds};
use crate::seed::{cell_seed, substream};
use crate::spectra::{make_benign_a, make_benign_b, EpsRule, SizeRule, Spectrum};
use crate::stats::{mean_se, ols_slope, quantile_sorted, sorted_copy};
use crate::synth::{make_dataset_with_record, Arm, CellCoordinates, ProblemSpec, PropensityModel, SeedRecord};

/// Replication index reserved for a cell's population quantities.
const POPULATION_REPLICATION: u64 = u64::MAX;

/// Covariance spectrum as a function of `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpectrumRule {
    Fixed { values: Vec<f64> },
    Identity { dim: SizeRule },
    BenignA { alpha: f64, beta: f64, dim: SizeRule },
    /// `λ_k = exp(-k/τ) + ε_n`, `k = 1..=p_n`.
    BenignB { tau: f64, dim: SizeRule, eps: EpsRule },
}

impl SpectrumRule {
    pub fn dim_at(&self, n: usize) -> usize {
        match self {
            SpectrumRule::Fixed { values } => values.len(),
            SpectrumRule::Identity { dim } | SpectrumRule::BenignA { dim, .. } | SpectrumRule::BenignB { dim, .. } => dim.eval(n),
        }
    }

    pub fn at(&self, n: usize) -> Result<Spectrum> {
        match self {
            SpectrumRule::Fixed { values } => Spectrum::new(values.clone()),
            SpectrumRule::Identity { dim } => Spectrum::identity(dim.eval(n)),
            SpectrumRule::BenignA { alpha, beta, dim } => make_benign_a(dim.eval(n), *alpha, *beta),
            SpectrumRule::BenignB { tau, dim, eps } => make_benign_b(dim.eval(n), *tau, eps.eval(n)),
        }
    }
}

/// How the true parameters are set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum ThetaRule {
    /// Given leading coordinates, zero beyond.
    Leading { theta1: Vec<f64>, theta0: Vec<f64> },
    /// Independent uniform unit vectors on the leading `support` coordinates.
    RandomUnit { support: usize, seed: u64 },
}

impl ThetaRule {
    fn min_dim(&self) -> usize {
        match self {
            ThetaRule::Leading { theta1, theta0 } => theta1.len().max(theta0.len()),
            ThetaRule::RandomUnit { support, .. } => *support,
        }
    }

    pub fn at(&self, p: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.min_dim() > p {
            return Err(Error::DimensionMismatch {
                expected: self.min_dim(),
                got: p,
            });
        }
        let pad = |head: &[f64]| {
            let mut v = vec![0.0; p];
            v[..head.len()].copy_from_slice(head);
            v
        };
        match self {
            ThetaRule::Leading { theta1, theta0 } => Ok((pad(theta1), pad(theta0))),
            ThetaRule::RandomUnit { support, seed } => {
                if *support == 0 {
                    return Err(Error::invalid("support", "must be at least 1"));
                }
                let unit = |stream: u64| {
                    let mut rng = substream(*seed, stream);
                    let v: Vec<f64> = (0..*support).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.into_iter().map(|x| x / norm).collect::<Vec<f64>>()
                };
                Ok((pad(&unit(1)), pad(&unit(0))))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub spectrum: SpectrumRule,
    pub propensity: PropensityModel,
    pub theta: ThetaRule,
    pub noise_sigma: f64,
}

impl Scenario {
    /// The problem instance at sample size `n`; requires `p > n`.
    pub fn problem_at(&self, n: usize) -> Result<ProblemSpec> {
        let p = self.spectrum.dim_at(n);
        if p <= n {
            return Err(Error::invalid(
                "spectrum",
                format!("scenario `{}` has p = {p} at n = {n}; an overparameterized design needs p > n", self.name),
            ));
        }
        let spectrum = self.spectrum.at(n)?;
        let (theta1, theta0) = self.theta.at(p)?;
        ProblemSpec::new(spectrum, theta1, theta0, self.propensity.clone(), self.noise_sigma)
    }
}

pub const PRESET_NAMES: [&str; 3] = ["rct", "bias_odd", "bias_even"];

/// Shipped scenarios. All use `λ_k = exp(-k/5) + 1/(n ln n)` with
/// `p_n = n²`, `θ*_1 = e_1`, `θ*_0 = e_2`, noise σ = 0.5 and overlap 0.05;
/// they differ in the propensity only:
///
/// * `rct`: constant 0.5.
/// * `bias_odd`: `sigmoid(4 x_1)`. Odd in `x`, so `Σ_a ∝ Σ` and the
///   deviation vanishes (negative control).
/// * `bias_even`: `sigmoid(2 - 20 x_1²)`. Even in `x`; treated units
///   concentrate near `x_1 = 0`, so `Σ_1` loses mass on the first axis.
pub fn preset(name: &str) -> Option<Scenario> {
    let phi = 0.05;
    let propensity = match name {
        "rct" => PropensityModel::Constant { p1: 0.5, phi },
        "bias_odd" => PropensityModel::Logistic {
            weights: vec![4.0],
            intercept: 0.0,
            phi,
        },
        "bias_even" => PropensityModel::Quadratic {
            coefficient: -20.0,
            offset: 2.0,
            coordinate: 0,
            phi,
        },
        _ => return None,
    };
    Some(Scenario {
        name: name.to_string(),
        spectrum: SpectrumRule::BenignB {
            tau: 5.0,
            dim: SizeRule { coef: 1.0, exponent: 2.0 },
            eps: EpsRule::InverseNLogN { scale: 1.0 },
        },
        propensity,
        theta: ThetaRule::Leading {
            theta1: vec![1.0],
            theta0: vec![0.0, 1.0],
        },
        noise_sigma: 0.5,
    })
}

/// Parameters of the population quantities attached to each row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialSettings {
    pub delta: f64,
    pub constants: BoundConstants,
    pub mc_samples: usize,
}

impl Default for TrialSettings {
    fn default() -> Self {
        TrialSettings {
            delta: 0.05,
            constants: BoundConstants::default(),
            mc_samples: 100_000,
        }
    }
}

/// Population quantities of one `(scenario, n)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellPopulation {
    pub p: usize,
    pub deviations: Option<[DeviationReport; 2]>,
    pub bounds: Option<TheoremBounds>,
    /// Why deviations or bounds are missing.
    pub note: Option<String>,
}

pub fn cell_population(
    sc: &Scenario,
    scenario_index: usize,
    n: usize,
    n_index: usize,
    master_seed: u64,
    settings: &TrialSettings,
) -> Result<CellPopulation> {
    let ps = sc.problem_at(n)?;
    let seed = cell_seed(master_seed, scenario_index, n_index, POPULATION_REPLICATION);
    let mut pop = CellPopulation {
        p: ps.dim(),
        deviations: None,
        bounds: None,
        note: None,
    };
    let groups = match group_populations(&ps.spectrum, &ps.propensity, settings.mc_samples, seed) {
        Ok(g) => g,
        Err(e) => {
            pop.note = Some(e.to_string());
            return Ok(pop);
        }
    };
    pop.deviations = Some([groups[0].deviation, groups[1].deviation]);
    match theorem_bounds_with(&ps, n, settings.delta, settings.constants, &groups) {
        Ok(b) => pop.bounds = Some(b),
        Err(e) => pop.note = Some(e.to_string()),
    }
    Ok(pop)
}

/// One cell's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub scenario: String,
    pub scenario_index: usize,
    pub n: usize,
    pub n_index: usize,
    pub rep: u64,
    pub p: usize,
    pub seed: u64,
    pub error: Option<String>,
    pub n_treated: usize,
    pub n_control: usize,
    pub risk_t: Option<f64>,
    pub risk_ipw: Option<f64>,
    pub terms: Option<RiskTerms>,
    pub identity_residual: Option<f64>,
    pub residual_t: Option<f64>,
    pub residual_ipw: Option<f64>,
    pub rank_deficient: bool,
    pub population: CellPopulation,
}

impl TrialRow {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }

    /// Value of a named per-row metric.
    pub fn metric(&self, name: &str) -> Option<f64> {
        if self.failed() {
            return None;
        }
        let dev = |i: usize| self.population.deviations.map(|d| d[i].deviation);
        match name {
            "risk_T" => self.risk_t,
            "risk_IPW" => self.risk_ipw,
            "deviation_1" => dev(0),
            "deviation_0" => dev(1),
            "t_bound" => self.population.bounds.map(|b| b.t_bound),
            "ipw_bound" => self.population.bounds.map(|b| b.ipw_bound),
            _ => None,
        }
    }
}

/// Metrics summarized in the aggregates.
pub const METRICS: [&str; 6] = ["risk_T", "risk_IPW", "deviation_1", "deviation_0", "t_bound", "ipw_bound"];

/// Run one cell. Deterministic in `(master_seed, scenario_index, n_index, rep)`.
pub fn run_trial(
    sc: &Scenario,
    scenario_index: usize,
    n: usize,
    n_index: usize,
    rep: u64,
    master_seed: u64,
    settings: &TrialSettings,
) -> Result<TrialRow> {
    let pop = cell_population(sc, scenario_index, n, n_index, master_seed, settings)?;
    run_cell(sc, scenario_index, n, n_index, rep, master_seed, &pop)
}

fn run_cell(
    sc: &Scenario,
    scenario_index: usize,
    n: usize,
    n_index: usize,
    rep: u64,
    master_seed: u64,
    pop: &CellPopulation,
) -> Result<TrialRow> {
    let ps = sc.problem_at(n)?;
    let seed = cell_seed(master_seed, scenario_index, n_index, rep);
    let record = SeedRecord {
        seed,
        cell: Some(CellCoordinates {
            master_seed,
            scenario: scenario_index,
            n_index,
            replication: rep,
        }),
    };
    let ds = make_dataset_with_record(&ps, n, record)?;
    let mut row = TrialRow {
        scenario: sc.name.clone(),
        scenario_index,
        n,
        n_index,
        rep,
        p: ps.dim(),
        seed,
        error: None,
        n_treated: ds.count(Arm::Treated),
        n_control: ds.count(Arm::Control),
        risk_t: None,
        risk_ipw: None,
        terms: None,
        identity_residual: None,
        residual_t: None,
        residual_ipw: None,
        rank_deficient: false,
        population: pop.clone(),
    };
    let design = Design::new(&ds.x);
    let outcome = (|| -> Result<()> {
        let t = t_learner_fit_with(&design, &ds)?;
        let report = decompose_risk_from(&design, &ds, &ps, &t)?;
        let ipw = ipw_learner_fit_with(&design, &ds, &ps.propensity)?;
        row.risk_t = Some(report.exact_risk);
        row.terms = Some(report.terms);
        row.identity_residual = Some(report.identity_residual);
        row.residual_t = Some(t.effect.interpolation_residual);
        row.risk_ipw = Some(exact_excess_risk(&ipw.theta_hat, &ps.theta_star(), &ps.spectrum)?);
        row.residual_ipw = Some(ipw.interpolation_residual);
        row.rank_deficient = t.effect.is_rank_deficient() || ipw.is_rank_deficient();
        Ok(())
    })();
    if let Err(e) = outcome {
        row.error = Some(e.to_string());
        row.risk_t = None;
        row.risk_ipw = None;
        row.terms = None;
        row.identity_residual = None;
        row.residual_t = None;
        row.residual_ipw = None;
    }
    Ok(row)
}

/// Everything that determines a sweep's rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub scenarios: Vec<Scenario>,
    pub n_grid: Vec<usize>,
    pub reps: u64,
    pub master_seed: u64,
    pub settings: TrialSettings,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scenarios.is_empty() {
            return Err(Error::invalid("scenarios", "at least one scenario is required"));
        }
        if self.n_grid.is_empty() || self.n_grid[0] == 0 || self.n_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("n_grid", "must be nonempty, positive and strictly increasing"));
        }
        if self.reps == 0 {
            return Err(Error::invalid("reps", "must be at least 1"));
        }
        for (i, a) in self.scenarios.iter().enumerate() {
            if self.scenarios[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::invalid("scenarios", format!("duplicate scenario name `{}`", a.name)));
            }
        }
        Ok(())
    }
}

/// Execution options that do not affect results.
#[derive(Debug, Clone, Copy)]
pub struct SweepOptions {
    pub workers: usize,
    /// Upper bound on covariate-matrix bytes held by concurrent cells; one
    /// cell always runs even if it alone exceeds the budget.
    pub memory_budget: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            workers: 1,
            memory_budget: 2 << 30,
        }
    }
}

struct MemoryGate {
    budget: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a> {
    gate: &'a MemoryGate,
    bytes: usize,
}

impl MemoryGate {
    fn new(budget: usize) -> Self {
        MemoryGate {
            budget,
            used: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self, bytes: usize) -> Permit<'_> {
        let mut used = self.used.lock().expect("memory gate poisoned");
        while *used > 0 && *used + bytes > self.budget {
            used = self.freed.wait(used).expect("memory gate poisoned");
        }
        *used += bytes;
        Permit { gate: self, bytes }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut used = self.gate.used.lock().expect("memory gate poisoned");
        *used -= self.bytes;
        self.gate.freed.notify_all();
    }
}

fn cell_bytes(n: usize, p: usize) -> usize {
    let f = std::mem::size_of::<f64>();
    n * p * f + 4 * n * n * f + 8 * p * f
}

/// Summary of one metric over the replications of a `(scenario, n)` pair.
/// Statistics are `None` when no replication succeeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub scenario: String,
    pub scenario_index: usize,
    pub n: usize,
    pub p: usize,
    pub metric: String,
    pub count: usize,
    pub failed: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub q10: Option<f64>,
    pub q90: Option<f64>,
    pub se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<TrialRow>,
    pub aggregates: Vec<Aggregate>,
}

pub fn run_sweep(spec: &SweepSpec, options: SweepOptions) -> Result<SweepResult> {
    spec.validate()?;
    for sc in &spec.scenarios {
        for &n in &spec.n_grid {
            sc.problem_at(n)?;
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers.max(1))
        .build()
        .map_err(|e| Error::invalid("workers", e.to_string()))?;
    let pairs: Vec<(usize, usize)> = (0..spec.scenarios.len())
        .flat_map(|s| (0..spec.n_grid.len()).map(move |k| (s, k)))
        .collect();
    let cells: Vec<(usize, usize, u64)> = pairs
        .iter()
        .flat_map(|&(s, k)| (0..spec.reps).map(move |r| (s, k, r)))
        .collect();
    let gate = MemoryGate::new(options.memory_budget);
    let rows = pool.install(|| -> Result<Vec<TrialRow>> {
        let pops: Vec<CellPopulation> = pairs
            .par_iter()
            .map(|&(s, k)| cell_population(&spec.scenarios[s], s, spec.n_grid[k], k, spec.master_seed, &spec.settings))
            .collect::<Result<_>>()?;
        cells
            .par_iter()
            .map(|&(s, k, r)| {
                let pop = &pops[s * spec.n_grid.len() + k];
                let n = spec.n_grid[k];
                let _permit = gate.acquire(cell_bytes(n, pop.p));
                run_cell(&spec.scenarios[s], s, n, k, r, spec.master_seed, pop)
            })
            .collect()
    })?;
    let aggregates = aggregate_rows(&rows);
    Ok(SweepResult { rows, aggregates })
}

/// Aggregates in `(scenario, n, metric)` order, rows taken in their given
/// order.
pub fn aggregate_rows(rows: &[TrialRow]) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(usize, usize), Vec<&TrialRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.scenario_index, r.n)).or_default().push(r);
    }
    let mut out = Vec::new();
    for ((scenario_index, n), members) in groups {
        let first = members[0];
        let failed = members.iter().filter(|r| r.failed()).count();
        for metric in METRICS {
            let values: Vec<f64> = members.iter().filter_map(|r| r.metric(metric)).collect();
            let stats = summarize(&values);
            out.push(Aggregate {
                scenario: first.scenario.clone(),
                scenario_index,
                n,
                p: first.p,
                metric: metric.to_string(),
                count: values.len(),
                failed,
                mean: stats.map(|s| s.0),
                median: stats.map(|s| s.1),
                q10: stats.map(|s| s.2),
                q90: stats.map(|s| s.3),
                se: stats.map(|s| s.4),
            });
        }
    }
    out
}

fn summarize(values: &[f64]) -> Option<(f64, f64, f64, f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let (mean, se) = mean_se(values);
    let sorted = sorted_copy(values);
    Some((
        mean,
        quantile_sorted(&sorted, 0.5),
        quantile_sorted(&sorted, 0.1),
        quantile_sorted(&sorted, 0.9),
        se,
    ))
}

pub const ROW_ID_COLUMNS: [&str; 11] = [
    "scenario",
    "scenario_index",
    "n",
    "n_index",
    "rep",
    "p",
    "seed",
    "status",
    "error",
    "n_treated",
    "n_control",
];

pub fn rows_header() -> Vec<String> {
    let mut h: Vec<String> = ROW_ID_COLUMNS.iter().map(|s| s.to_string()).collect();
    for s in ["risk_T", "risk_IPW"] {
        h.push(s.to_string());
    }
    h.extend(RiskTerms::NAMES.iter().map(|s| s.to_string()));
    for s in [
        "identity_residual",
        "residual_T",
        "residual_IPW",
        "rank_deficient",
        "deviation_1",
        "deviation_0",
        "deviation_se_1",
        "deviation_se_0",
        "zeta_1",
        "zeta_0",
    ] {
        h.push(s.to_string());
    }
    h.extend(TheoremBounds::COMPONENTS.iter().map(|s| s.to_string()));
    h.push("k_star".to_string());
    h.push("population_note".to_string());
    h
}

fn row_record(r: &TrialRow) -> Vec<String> {
    let mut rec = vec![
        r.scenario.clone(),
        r.scenario_index.to_string(),
        r.n.to_string(),
        r.n_index.to_string(),
        r.rep.to_string(),
        r.p.to_string(),
        r.seed.to_string(),
        if r.failed() { "failed" } else { "ok" }.to_string(),
        r.error.clone().unwrap_or_default(),
        r.n_treated.to_string(),
        r.n_control.to_string(),
        fmt_opt_float(r.risk_t),
        fmt_opt_float(r.risk_ipw),
    ];
    match &r.terms {
        Some(t) => rec.extend(t.values().iter().map(|v| fmt_float(*v))),
        None => rec.extend(std::iter::repeat_n(String::new(), RiskTerms::NAMES.len())),
    }
    rec.push(fmt_opt_float(r.identity_residual));
    rec.push(fmt_opt_float(r.residual_t));
    rec.push(fmt_opt_float(r.residual_ipw));
    rec.push(r.rank_deficient.to_string());
    let devs = r.population.deviations;
    for f in [
        |d: &[DeviationReport; 2]| d[0].deviation,
        |d: &[DeviationReport; 2]| d[1].deviation,
        |d: &[DeviationReport; 2]| d[0].std_error(),
        |d: &[DeviationReport; 2]| d[1].std_error(),
        |d: &[DeviationReport; 2]| d[0].zeta_star,
        |d: &[DeviationReport; 2]| d[1].zeta_star,
    ] {
        rec.push(fmt_opt_float(devs.as_ref().map(f)));
    }
    match &r.population.bounds {
        Some(b) => {
            rec.extend(b.component_values().iter().map(|v| fmt_float(*v)));
            rec.push(b.k_star.to_string());
        }
        None => rec.extend(std::iter::repeat_n(String::new(), TheoremBounds::COMPONENTS.len() + 1)),
    }
    rec.push(r.population.note.clone().unwrap_or_default());
    rec
}

pub const AGGREGATE_HEADER: [&str; 12] = [
    "scenario",
    "scenario_index",
    "n",
    "p",
    "metric",
    "count",
    "failed",
    "mean",
    "median",
    "q10",
    "q90",
    "se",
];

impl SweepResult {
    pub fn failed_rows(&self) -> usize {
        self.rows.iter().filter(|r| r.failed()).count()
    }

    pub fn rows_csv(&self) -> Result<String> {
        let mut wr = csv_writer(Vec::new());
        wr.write_record(rows_header())?;
        for r in &self.rows {
            wr.write_record(row_record(r))?;
        }
        finish_csv(wr)
    }

    pub fn aggregates_csv(&self) -> Result<String> {
        let mut wr = csv_writer(Vec::new());
        wr.write_record(AGGREGATE_HEADER)?;
        for a in &self.aggregates {
            wr.write_record([
                a.scenario.clone(),
                a.scenario_index.to_string(),
                a.n.to_string(),
                a.p.to_string(),
                a.metric.clone(),
                a.count.to_string(),
                a.failed.to_string(),
                fmt_opt_float(a.mean),
                fmt_opt_float(a.median),
                fmt_opt_float(a.q10),
                fmt_opt_float(a.q90),
                fmt_opt_float(a.se),
            ])?;
        }
        finish_csv(wr)
    }

    /// Write `rows.csv` and `aggregates.csv` into `dir`.
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(ROWS_FILE), self.rows_csv()?.as_bytes())?;
        write_atomic(&dir.join(AGGREGATES_FILE), self.aggregates_csv()?.as_bytes())?;
        Ok(())
    }

    pub fn trend(&self, scenario: &str, metric: &str) -> Result<Trend> {
        fit_trend(self, scenario, metric)
    }
}

pub const ROWS_FILE: &str = "rows.csv";
pub const AGGREGATES_FILE: &str = "aggregates.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Convergence summary of one metric's medians along the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    pub scenario: String,
    pub metric: String,
    pub n: Vec<usize>,
    pub medians: Vec<f64>,
    /// Least-squares slope of `ln median` on `ln n`.
    pub slope: f64,
    /// Fraction of adjacent grid pairs along which the median decreases.
    pub monotone_fraction: f64,
    pub final_over_initial: f64,
}

impl Trend {
    pub fn strictly_decreasing(&self) -> bool {
        self.medians.windows(2).all(|w| w[1] < w[0])
    }
}

pub fn fit_trend(sr: &SweepResult, scenario: &str, metric: &str) -> Result<Trend> {
    let points: Vec<(usize, f64)> = sr
        .aggregates
        .iter()
        .filter(|a| a.scenario == scenario && a.metric == metric)
        .filter_map(|a| a.median.map(|m| (a.n, m)))
        .collect();
    trend_from_points(scenario, metric, &points)
}

pub fn trend_from_points(scenario: &str, metric: &str, points: &[(usize, f64)]) -> Result<Trend> {
    if points.len() < 3 {
        return Err(Error::InsufficientPoints {
            needed: 3,
            found: points.len(),
        });
    }
    let ln_n: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let ln_m: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let medians: Vec<f64> = points.iter().map(|p| p.1).collect();
    let decreasing = medians.windows(2).filter(|w| w[1] < w[0]).count();
    Ok(Trend {
        scenario: scenario.to_string(),
        metric: metric.to_string(),
        n: points.iter().map(|p| p.0).collect(),
        slope: ols_slope(&ln_n, &ln_m),
        monotone_fraction: decreasing as f64 / (medians.len() - 1) as f64,
        final_over_initial: medians[medians.len() - 1] / medians[0],
        medians,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small(name: &str, propensity: PropensityModel, sigma: f64) -> Scenario {
        Scenario {
            name: name.to_string(),
            spectrum: SpectrumRule::BenignB {
                tau: 5.0,
                dim: SizeRule { coef: 10.0, exponent: 1.0 },
                eps: EpsRule::InverseNLogN { scale: 1.0 },
            },
            propensity,
            theta: ThetaRule::Leading {
                theta1: vec![1.0],
                theta0: vec![0.0, 1.0],
            },
            noise_sigma: sigma,
        }
    }

    fn settings() -> TrialSettings {
        TrialSettings {
            delta: 0.1,
            constants: BoundConstants::default(),
            mc_samples: 2_000,
        }
    }

    #[test]
    fn presets_resolve() {
        for name in PRESET_NAMES {
            let sc = preset(name).unwrap();
            let ps = sc.problem_at(10).unwrap();
            assert_eq!(ps.dim(), 100);
            assert_eq!(ps.theta1[0], 1.0);
            assert_eq!(ps.theta0[1], 1.0);
        }
        assert!(preset("nope").is_none());
    }

    #[test]
    fn underparameterized_rejected() {
        let mut sc = preset("rct").unwrap();
        sc.spectrum = SpectrumRule::Identity {
            dim: SizeRule { coef: 5.0, exponent: 0.0 },
        };
        assert!(sc.problem_at(5).is_err());
        assert!(sc.problem_at(4).is_ok());
    }

    #[test]
    fn random_unit_theta() {
        let rule = ThetaRule::RandomUnit { support: 5, seed: 3 };
        let (a, b) = rule.at(20).unwrap();
        assert_relative_eq!(a.iter().map(|x| x * x).sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(b.iter().map(|x| x * x).sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(a[5..].iter().all(|x| *x == 0.0));
        assert_ne!(a, b);
        assert_eq!(rule.at(20).unwrap(), (a, b));
        assert!(rule.at(4).is_err());
    }

    #[test]
    fn trial_is_deterministic_and_finite() {
        let sc = small("s", PropensityModel::constant(0.5, 0.05).unwrap(), 1e-12);
        let a = run_trial(&sc, 0, 10, 0, 3, 7, &settings()).unwrap();
        let b = run_trial(&sc, 0, 10, 0, 3, 7, &settings()).unwrap();
        assert_eq!(a, b);
        assert!(!a.failed());
        assert!(a.risk_t.unwrap() >= 0.0 && a.risk_t.unwrap().is_finite());
        assert!(a.risk_ipw.unwrap().is_finite());
    }

    #[test]
    fn ipw_risk_crude_bound() {
        let mut sc = small("s", PropensityModel::constant(0.5, 0.05).unwrap(), 0.5);
        sc.spectrum = SpectrumRule::BenignB {
            tau: 5.0,
            dim: SizeRule { coef: 1.0, exponent: 2.0 },
            eps: EpsRule::InverseNLogN { scale: 1.0 },
        };
        let row = run_trial(&sc, 0, 10, 0, 0, 1, &settings()).unwrap();
        let ps = sc.problem_at(10).unwrap();
        let ts = ps.theta_star();
        let bound = ts.iter().map(|x| x * x).sum::<f64>() * ps.spectrum.norm() * ps.dim() as f64;
        assert!(row.risk_ipw.unwrap() <= bound);
    }

    #[test]
    fn empty_group_rows_are_flagged() {
        let sc = small("s", PropensityModel::constant(0.99, 0.05).unwrap(), 1.0);
        let spec = SweepSpec {
            scenarios: vec![sc],
            n_grid: vec![3],
            reps: 40,
            master_seed: 1,
            settings: settings(),
        };
        let sr = run_sweep(&spec, SweepOptions::default()).unwrap();
        assert_eq!(sr.rows.len(), 40);
        let failed: Vec<&TrialRow> = sr.rows.iter().filter(|r| r.failed()).collect();
        assert!(!failed.is_empty());
        assert!(failed.iter().all(|r| r.error.as_deref() == Some("empty_group(0)") && r.risk_t.is_none()));
        let agg = sr.aggregates.iter().find(|a| a.metric == "risk_T").unwrap();
        assert_eq!(agg.count + agg.failed, 40);
    }

    #[test]
    fn sweep_is_worker_independent() {
        let spec = SweepSpec {
            scenarios: vec![
                small("a", PropensityModel::constant(0.5, 0.05).unwrap(), 0.5),
                small(
                    "b",
                    PropensityModel::Quadratic {
                        coefficient: -20.0,
                        offset: 2.0,
                        coordinate: 0,
                        phi: 0.05,
                    },
                    0.5,
                ),
            ],
            n_grid: vec![8, 12, 16],
            reps: 3,
            master_seed: 11,
            settings: settings(),
        };
        let one = run_sweep(&spec, SweepOptions::default()).unwrap();
        let four = run_sweep(
            &spec,
            SweepOptions {
                workers: 4,
                memory_budget: 1,
            },
        )
        .unwrap();
        assert_eq!(one.rows_csv().unwrap(), four.rows_csv().unwrap());
        assert_eq!(one.rows.len(), 18);
        assert_eq!(one.aggregates, aggregate_rows(&one.rows));
        let keys: Vec<(usize, usize, u64)> = one.rows.iter().map(|r| (r.scenario_index, r.n_index, r.rep)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn single_cell_sweep() {
        let spec = SweepSpec {
            scenarios: vec![small("a", PropensityModel::constant(0.5, 0.05).unwrap(), 0.5)],
            n_grid: vec![10],
            reps: 1,
            master_seed: 0,
            settings: settings(),
        };
        let sr = run_sweep(&spec, SweepOptions::default()).unwrap();
        assert_eq!(sr.rows.len(), 1);
        let csv = sr.rows_csv().unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(csv.lines().next().unwrap().split(',').count(), rows_header().len());
        assert!(matches!(sr.trend("a", "risk_T"), Err(Error::InsufficientPoints { needed: 3, found: 1 })));
    }

    #[test]
    fn trend_examples() {
        let flat = trend_from_points("s", "m", &[(10, 2.0), (20, 2.0), (40, 2.0)]).unwrap();
        assert_eq!(flat.slope, 0.0);
        assert_eq!(flat.final_over_initial, 1.0);
        assert_eq!(flat.monotone_fraction, 0.0);
        let inv = trend_from_points("s", "m", &[(10, 0.3), (20, 0.15), (40, 0.075), (80, 0.0375)]).unwrap();
        assert_relative_eq!(inv.slope, -1.0, epsilon = 1e-10);
        assert_eq!(inv.monotone_fraction, 1.0);
        assert!(inv.strictly_decreasing());
    }

    #[test]
    fn memory_gate_admits_oversized_single() {
        let gate = MemoryGate::new(10);
        let a = gate.acquire(100);
        drop(a);
        let b = gate.acquire(4);
        let c = gate.acquire(6);
        drop((b, c));
        assert_eq!(*gate.used.lock().unwrap(), 0);
    }
}
