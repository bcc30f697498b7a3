//! Excess risk, its exact decomposition, group covariances and the
//! covariance-deviation term.
//!
//! Everything is expressed in the eigenbasis of `Σ`, where `Σ = diag(λ)`.
//!
//! # Group covariances
//!
//! `Σ_a = E[e_a(x) x xᵀ]` with `e_1 = e` and `e_0 = 1 - e`. When the
//! propensity reads only the coordinates `J`, independence of the
//! eigencoordinates gives the exact block form
//!
//! ```text
//! Σ_a = [ E[e_a x_J x_Jᵀ]        0         ]
//!       [       0         E[e_a] Λ_{Jᶜ}    ]
//! ```
//!
//! [`GroupSigma`] stores `Σ_a` in that form: a dense `|J| × |J|` head and a
//! scalar for the diagonal tail. Its operator-norm deviation from `Σ` costs
//! one small eigensolve, which keeps very high-dimensional spectra cheap.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::{corrected_response, t_learner_fit_with, Design, TLearnerFit};
use crate::io::{csv_writer, fmt_float};
use crate::linalg::{ensure_symmetric, golden_section_min, symmetric_eigenvalues, symmetric_operator_norm, GoldenSection};
use crate::seed::{rng_from_seed, LabRng};
use crate::spectra::{bound_terms, neumaier_sum, Spectrum};
use crate::stats::{Estimate, Welford};
use crate::synth::{Arm, Dataset, ProblemSpec, PropensityModel};

/// Number of batches used for batch-means standard errors.
pub const MC_BATCHES: usize = 20;

/// Relative bracket width at which the ζ search stops.
pub const ZETA_REL_TOL: f64 = 1e-12;
const ZETA_MAX_ITER: usize = 400;

/// `Σ_j λ_j (θ_j - θ*_j)²`.
pub fn exact_excess_risk(theta: &[f64], theta_star: &[f64], s: &Spectrum) -> Result<f64> {
    let p = s.dim();
    for len in [theta.len(), theta_star.len()] {
        if len != p {
            return Err(Error::DimensionMismatch { expected: p, got: len });
        }
    }
    Ok(neumaier_sum(
        s.values().iter().zip(theta.iter().zip(theta_star)).map(|(l, (a, b))| l * (a - b) * (a - b)),
    ))
}

fn quad_form(lambda: &[f64], a: &[f64], b: &[f64]) -> f64 {
    neumaier_sum(lambda.iter().zip(a.iter().zip(b)).map(|(l, (x, y))| l * x * y))
}

/// Which population loss a Monte Carlo risk estimate averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskTarget {
    /// `(ỹ - xᵀθ)² - (ỹ - xᵀθ*)²` with `ỹ = y_1 - y_0`.
    TRisk,
    /// The same with the corrected response `ŷ` in place of `ỹ`.
    IpwRisk,
}

struct Draw {
    fit: f64,
    star: f64,
    y_tilde: f64,
    y_hat: f64,
}

fn draw_point<R: Rng + ?Sized>(theta: &[f64], ps: &ProblemSpec, sqrt_l: &[f64], x: &mut [f64], rng: &mut R) -> Draw {
    let (mut fit, mut star, mut m1, mut m0) = (0.0, 0.0, 0.0, 0.0);
    let theta_star = ps.theta1.iter().zip(&ps.theta0);
    for (j, (t1, t0)) in theta_star.enumerate() {
        let z: f64 = StandardNormal.sample(rng);
        let xj = sqrt_l[j] * z;
        x[j] = xj;
        fit += xj * theta[j];
        star += xj * (t1 - t0);
        m1 += xj * t1;
        m0 += xj * t0;
    }
    let e1: f64 = StandardNormal.sample(rng);
    let e0: f64 = StandardNormal.sample(rng);
    let y1 = m1 + ps.noise_sigma * e1;
    let y0 = m0 + ps.noise_sigma * e0;
    let e = ps.propensity.eval_with(|j| x[j]);
    let u: f64 = rng.random();
    let d = if u < e { Arm::Treated } else { Arm::Control };
    let y = match d {
        Arm::Treated => y1,
        Arm::Control => y0,
    };
    Draw {
        fit,
        star,
        y_tilde: y1 - y0,
        y_hat: corrected_response(d, y, e),
    }
}

fn loss_gap(target: f64, fit: f64, star: f64) -> f64 {
    let a = target - fit;
    let b = target - star;
    a * a - b * b
}

fn check_mc_args(theta: &[f64], ps: &ProblemSpec, m_samples: usize) -> Result<()> {
    if m_samples < 100 {
        return Err(Error::invalid("m_samples", format!("need at least 100 samples, got {m_samples}")));
    }
    if theta.len() != ps.dim() {
        return Err(Error::DimensionMismatch {
            expected: ps.dim(),
            got: theta.len(),
        });
    }
    Ok(())
}

/// Monte Carlo estimate of the excess risk of `theta` under `ps`.
pub fn mc_excess_risk(theta: &[f64], ps: &ProblemSpec, which: RiskTarget, m_samples: usize, rng: &mut LabRng) -> Result<Estimate> {
    check_mc_args(theta, ps, m_samples)?;
    let sqrt_l: Vec<f64> = ps.spectrum.values().iter().map(|l| l.sqrt()).collect();
    let mut x = vec![0.0; ps.dim()];
    let mut acc = Welford::new();
    for _ in 0..m_samples {
        let d = draw_point(theta, ps, &sqrt_l, &mut x, rng);
        let target = match which {
            RiskTarget::TRisk => d.y_tilde,
            RiskTarget::IpwRisk => d.y_hat,
        };
        acc.push(loss_gap(target, d.fit, d.star));
    }
    Ok(acc.estimate())
}

/// Both Monte Carlo risks on shared draws, with the paired difference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedRisk {
    pub t_risk: Estimate,
    pub ipw_risk: Estimate,
    /// `ipw - t`, with the standard error of the paired difference.
    pub difference: Estimate,
}

pub fn mc_risk_pair(theta: &[f64], ps: &ProblemSpec, m_samples: usize, rng: &mut LabRng) -> Result<PairedRisk> {
    check_mc_args(theta, ps, m_samples)?;
    let sqrt_l: Vec<f64> = ps.spectrum.values().iter().map(|l| l.sqrt()).collect();
    let mut x = vec![0.0; ps.dim()];
    let (mut t, mut ipw, mut diff) = (Welford::new(), Welford::new(), Welford::new());
    for _ in 0..m_samples {
        let d = draw_point(theta, ps, &sqrt_l, &mut x, rng);
        let a = loss_gap(d.y_tilde, d.fit, d.star);
        let b = loss_gap(d.y_hat, d.fit, d.star);
        t.push(a);
        ipw.push(b);
        diff.push(b - a);
    }
    Ok(PairedRisk {
        t_risk: t.estimate(),
        ipw_risk: ipw.estimate(),
        difference: diff.estimate(),
    })
}

/// The ten terms of the T-learner excess risk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskTerms {
    pub bias_1: f64,
    pub bias_0: f64,
    pub var_1: f64,
    pub var_0: f64,
    pub cross_within_1: f64,
    pub cross_within_0: f64,
    pub cross_bias_10: f64,
    #[serde(rename = "cross_D")]
    pub cross_d: f64,
    #[serde(rename = "cross_E")]
    pub cross_e: f64,
    #[serde(rename = "cross_F")]
    pub cross_f: f64,
}

impl RiskTerms {
    pub const NAMES: [&'static str; 10] = [
        "bias_1",
        "bias_0",
        "var_1",
        "var_0",
        "cross_within_1",
        "cross_within_0",
        "cross_bias_10",
        "cross_D",
        "cross_E",
        "cross_F",
    ];

    pub fn values(&self) -> [f64; 10] {
        [
            self.bias_1,
            self.bias_0,
            self.var_1,
            self.var_0,
            self.cross_within_1,
            self.cross_within_0,
            self.cross_bias_10,
            self.cross_d,
            self.cross_e,
            self.cross_f,
        ]
    }

    pub fn sum(&self) -> f64 {
        neumaier_sum(self.values())
    }

    /// Sum omitting the within-group cross terms.
    pub fn sum_without_within(&self) -> f64 {
        self.sum() - self.cross_within_1 - self.cross_within_0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub exact_risk: f64,
    pub terms: RiskTerms,
    /// `|exact_risk - Σ terms|`.
    pub identity_residual: f64,
    /// `ε_1ᵀ P_1 Σ P_0ᵀ ε_0`, so that `cross_F = -2 f_bilinear`.
    pub f_bilinear: f64,
}

impl RiskReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn csv_header() -> Vec<&'static str> {
        let mut h = vec!["exact_risk"];
        h.extend(RiskTerms::NAMES);
        h.push("identity_residual");
        h
    }

    pub fn csv_values(&self) -> Vec<f64> {
        let mut v = vec![self.exact_risk];
        v.extend(self.terms.values());
        v.push(self.identity_residual);
        v
    }

    /// Header plus one flat row.
    pub fn to_csv(&self) -> Result<String> {
        let mut wr = csv_writer(Vec::new());
        wr.write_record(Self::csv_header())?;
        wr.write_record(self.csv_values().into_iter().map(fmt_float))?;
        let bytes = wr.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

pub fn decompose_risk(ds: &Dataset, ps: &ProblemSpec) -> Result<RiskReport> {
    decompose_risk_with(&Design::new(&ds.x), ds, ps)
}

/// Exact decomposition of the T-learner excess risk.
///
/// With `u_a = Π_a^⊥ θ*_a` and `w_a = P_aᵀ ε_a` the group error is
/// `θ*_a - θ̂_a = u_a - w_a`, and every term is a `Σ`-inner product of these
/// four vectors.
pub fn decompose_risk_with(design: &Design<'_>, ds: &Dataset, ps: &ProblemSpec) -> Result<RiskReport> {
    let fit = t_learner_fit_with(design, ds)?;
    decompose_risk_from(design, ds, ps, &fit)
}

/// As [`decompose_risk_with`], reusing a T-learner fit on the same design.
pub fn decompose_risk_from(design: &Design<'_>, ds: &Dataset, ps: &ProblemSpec, fit: &TLearnerFit) -> Result<RiskReport> {
    if ds.p() != ps.dim() {
        return Err(Error::DimensionMismatch {
            expected: ps.dim(),
            got: ds.p(),
        });
    }
    let lambda = ps.spectrum.values();
    let mut u: Vec<Vec<f64>> = Vec::with_capacity(2);
    let mut w: Vec<Vec<f64>> = Vec::with_capacity(2);
    for arm in Arm::BOTH {
        let rows = ds.rows(arm);
        if rows.is_empty() {
            return Err(Error::EmptyGroup(arm));
        }
        let pinv = design.pinv(&rows);
        let theta = DVector::from_column_slice(ps.theta(arm));
        let fitted = design.apply_rows(&rows, &theta);
        let proj = design.pinv_transpose_apply(&rows, &pinv, &fitted);
        u.push((theta - proj).iter().copied().collect());
        let noise = design.pinv_transpose_apply(&rows, &pinv, &ds.group_noise(arm));
        w.push(noise.iter().copied().collect());
    }
    let (u1, u0, w1, w0) = (&u[0], &u[1], &w[0], &w[1]);
    let f_bilinear = quad_form(lambda, w1, w0);
    let terms = RiskTerms {
        bias_1: quad_form(lambda, u1, u1),
        bias_0: quad_form(lambda, u0, u0),
        var_1: quad_form(lambda, w1, w1),
        var_0: quad_form(lambda, w0, w0),
        cross_within_1: -2.0 * quad_form(lambda, u1, w1),
        cross_within_0: -2.0 * quad_form(lambda, u0, w0),
        cross_bias_10: -2.0 * quad_form(lambda, u1, u0),
        cross_d: 2.0 * quad_form(lambda, u1, w0),
        cross_e: 2.0 * quad_form(lambda, w1, u0),
        cross_f: -2.0 * f_bilinear,
    };
    let exact_risk = exact_excess_risk(&fit.effect.theta_hat, &ps.theta_star(), &ps.spectrum)?;
    Ok(RiskReport {
        exact_risk,
        identity_residual: (exact_risk - terms.sum()).abs(),
        terms,
        f_bilinear,
    })
}

/// Population second moment of one group in block form (see module docs).
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSigma {
    support: Vec<usize>,
    head: DMatrix<f64>,
    scale: f64,
}

impl GroupSigma {
    /// Closed form for a constant propensity: `Σ_a = p(d = a) Σ`.
    pub fn analytic(m: &PropensityModel, arm: Arm) -> Result<Self> {
        match m {
            PropensityModel::Constant { .. } => Ok(GroupSigma {
                support: Vec::new(),
                head: DMatrix::zeros(0, 0),
                scale: m.eval_arm_with(arm, |_| 0.0),
            }),
            other => Err(Error::AnalyticUnavailable(other.kind_name())),
        }
    }

    /// A full matrix in the eigenbasis of `Σ`.
    pub fn dense(matrix: DMatrix<f64>) -> Result<Self> {
        ensure_symmetric(&matrix)?;
        Ok(GroupSigma {
            support: (0..matrix.nrows()).collect(),
            head: matrix,
            scale: 0.0,
        })
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn head(&self) -> &DMatrix<f64> {
        &self.head
    }

    /// `E[e_a(x)]`, the multiplier on coordinates outside the support.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    fn split(&self, s: &Spectrum) -> Result<Split> {
        let lambda = s.values();
        if let Some(&last) = self.support.last() {
            if last >= lambda.len() {
                return Err(Error::DimensionMismatch {
                    expected: last + 1,
                    got: lambda.len(),
                });
            }
        }
        let mut in_support = vec![false; lambda.len()];
        for &j in &self.support {
            in_support[j] = true;
        }
        let outside = || lambda.iter().zip(&in_support).filter(|(_, s)| !**s).map(|(l, _)| *l);
        Ok(Split {
            head_lambda: self.support.iter().map(|&j| lambda[j]).collect(),
            tail_max: outside().fold(0.0, f64::max),
            tail_sum: neumaier_sum(outside()),
        })
    }

    pub fn to_dense(&self, s: &Spectrum) -> Result<DMatrix<f64>> {
        self.split(s)?;
        let lambda = s.values();
        let mut out = DMatrix::from_diagonal(&DVector::from_iterator(lambda.len(), lambda.iter().map(|l| self.scale * l)));
        for (a, &i) in self.support.iter().enumerate() {
            for (b, &j) in self.support.iter().enumerate() {
                out[(i, j)] = self.head[(a, b)];
            }
        }
        Ok(out)
    }

    pub fn trace(&self, s: &Spectrum) -> Result<f64> {
        let split = self.split(s)?;
        Ok(self.head.trace() + self.scale * split.tail_sum)
    }

    /// Eigenvalues of `Σ_a`, descending, clamped at zero.
    pub fn eigenvalues(&self, s: &Spectrum) -> Result<Vec<f64>> {
        self.split(s)?;
        let mut in_support = vec![false; s.dim()];
        for &j in &self.support {
            in_support[j] = true;
        }
        let mut vals: Vec<f64> = if self.head.nrows() > 0 {
            symmetric_eigenvalues(&self.head)
        } else {
            Vec::new()
        };
        vals.extend(s.values().iter().zip(&in_support).filter(|(_, s)| !**s).map(|(l, _)| self.scale * l));
        for v in vals.iter_mut() {
            *v = v.max(0.0);
        }
        vals.sort_by(|a, b| b.total_cmp(a));
        Ok(vals)
    }

    pub fn spectrum(&self, s: &Spectrum) -> Result<Spectrum> {
        Spectrum::new(self.eigenvalues(s)?)
    }
}

struct Split {
    head_lambda: Vec<f64>,
    tail_max: f64,
    tail_sum: f64,
}

impl Split {
    /// `‖Σ - ζ Σ_a‖`.
    fn deviation(&self, g: &GroupSigma, zeta: f64) -> f64 {
        let tail = (1.0 - zeta * g.scale).abs() * self.tail_max;
        if g.head.nrows() == 0 {
            return tail;
        }
        let mut diff = g.head.scale(-zeta);
        for (k, l) in self.head_lambda.iter().enumerate() {
            diff[(k, k)] += l;
        }
        symmetric_operator_norm(&diff).max(tail)
    }
}

/// `Σ_a` estimate together with per-batch estimates for standard errors.
#[derive(Debug, Clone)]
pub struct GroupSigmaEstimate {
    pub arm: Arm,
    pub sigma: GroupSigma,
    /// Empty for analytic estimates.
    pub batches: Vec<GroupSigma>,
    pub samples: usize,
}

impl GroupSigmaEstimate {
    pub fn analytic(m: &PropensityModel, arm: Arm) -> Result<Self> {
        Ok(GroupSigmaEstimate {
            arm,
            sigma: GroupSigma::analytic(m, arm)?,
            batches: Vec::new(),
            samples: 0,
        })
    }
}

struct MomentSums {
    head: [DMatrix<f64>; 2],
    weight: [f64; 2],
    second: Option<DMatrix<f64>>,
    count: usize,
}

/// Accumulates `Σ e_a(x) x_J x_Jᵀ` over draws, split into batches.
fn sample_moments(
    s: &Spectrum,
    m: &PropensityModel,
    support: &[usize],
    samples: usize,
    with_second: bool,
    rng: &mut LabRng,
) -> Vec<MomentSums> {
    let k = support.len();
    let sqrt_l: Vec<f64> = support.iter().map(|&j| s.values()[j].sqrt()).collect();
    let batches = MC_BATCHES.min(samples.max(1));
    let mut out = Vec::with_capacity(batches);
    let mut x = DVector::zeros(k);
    for b in 0..batches {
        let count = samples / batches + usize::from(b < samples % batches);
        let mut acc = MomentSums {
            head: [DMatrix::zeros(k, k), DMatrix::zeros(k, k)],
            weight: [0.0, 0.0],
            second: with_second.then(|| DMatrix::zeros(k, k)),
            count,
        };
        for _ in 0..count {
            for (xi, sl) in x.iter_mut().zip(&sqrt_l) {
                let z: f64 = StandardNormal.sample(rng);
                *xi = sl * z;
            }
            let e = m.eval_with(|j| x[support.binary_search(&j).expect("propensity reads its support")]);
            for (slot, w) in [e, 1.0 - e].into_iter().enumerate() {
                acc.head[slot].ger(w, &x, &x, 1.0);
                acc.weight[slot] += w;
            }
            if let Some(sec) = acc.second.as_mut() {
                sec.ger(1.0, &x, &x, 1.0);
            }
        }
        out.push(acc);
    }
    out
}

fn slot(arm: Arm) -> usize {
    match arm {
        Arm::Treated => 0,
        Arm::Control => 1,
    }
}

/// Monte Carlo estimate of both `Σ_1` and `Σ_0` in block form from shared
/// draws of the propensity's support coordinates.
pub fn estimate_group_sigmas(s: &Spectrum, m: &PropensityModel, samples: usize, rng: &mut LabRng) -> Result<[GroupSigmaEstimate; 2]> {
    if samples < 2 {
        return Err(Error::invalid("mc_samples", "need at least 2 samples"));
    }
    if m.min_dim() > s.dim() {
        return Err(Error::DimensionMismatch {
            expected: m.min_dim(),
            got: s.dim(),
        });
    }
    let support = m.support();
    let sums = sample_moments(s, m, &support, samples, false, rng);
    let build = |arm: Arm| {
        let i = slot(arm);
        let batches: Vec<GroupSigma> = sums
            .iter()
            .map(|b| GroupSigma {
                support: support.clone(),
                head: b.head[i].scale(1.0 / b.count as f64),
                scale: b.weight[i] / b.count as f64,
            })
            .collect();
        let total_head = sums.iter().fold(DMatrix::zeros(support.len(), support.len()), |acc, b| acc + &b.head[i]);
        let total_weight: f64 = sums.iter().map(|b| b.weight[i]).sum();
        GroupSigmaEstimate {
            arm,
            sigma: GroupSigma {
                support: support.clone(),
                head: total_head.scale(1.0 / samples as f64),
                scale: total_weight / samples as f64,
            },
            batches,
            samples,
        }
    };
    Ok([build(Arm::Treated), build(Arm::Control)])
}

/// How a group covariance is obtained.
pub enum CovarianceMethod<'r> {
    Analytic,
    MonteCarlo { samples: usize, rng: &'r mut LabRng },
}

/// Dense `p × p` group covariance.
#[derive(Debug, Clone)]
pub struct GroupCovariance {
    pub arm: Arm,
    pub matrix: DMatrix<f64>,
    /// Entrywise batch-means standard errors (Monte Carlo only).
    pub std_error: Option<DMatrix<f64>>,
    pub samples: usize,
}

impl GroupCovariance {
    pub fn max_std_error(&self) -> f64 {
        self.std_error.as_ref().map_or(0.0, |m| m.amax())
    }
}

/// Dense Monte Carlo estimates of `Σ_1`, `Σ_0` and `E[x xᵀ]` on shared draws.
#[derive(Debug, Clone)]
pub struct CovariancePair {
    pub treated: GroupCovariance,
    pub control: GroupCovariance,
    pub second_moment: DMatrix<f64>,
}

pub fn group_covariance_pair(s: &Spectrum, m: &PropensityModel, samples: usize, rng: &mut LabRng) -> Result<CovariancePair> {
    if samples < 2 {
        return Err(Error::invalid("mc_samples", "need at least 2 samples"));
    }
    let p = s.dim();
    if m.min_dim() > p {
        return Err(Error::DimensionMismatch {
            expected: m.min_dim(),
            got: p,
        });
    }
    let support: Vec<usize> = (0..p).collect();
    let sums = sample_moments(s, m, &support, samples, true, rng);
    let build = |arm: Arm| {
        let i = slot(arm);
        let total = sums.iter().fold(DMatrix::zeros(p, p), |acc, b| acc + &b.head[i]).scale(1.0 / samples as f64);
        let nb = sums.len() as f64;
        let mut se = DMatrix::zeros(p, p);
        if sums.len() > 1 {
            let means: Vec<DMatrix<f64>> = sums.iter().map(|b| b.head[i].scale(1.0 / b.count as f64)).collect();
            let centre = means.iter().fold(DMatrix::zeros(p, p), |acc, m| acc + m).scale(1.0 / nb);
            for m in &means {
                let d = m - &centre;
                se += d.component_mul(&d);
            }
            se = se.scale(1.0 / ((nb - 1.0) * nb)).map(f64::sqrt);
        }
        GroupCovariance {
            arm,
            matrix: total,
            std_error: Some(se),
            samples,
        }
    };
    let second = sums
        .iter()
        .fold(DMatrix::zeros(p, p), |acc, b| acc + b.second.as_ref().expect("second moment requested"))
        .scale(1.0 / samples as f64);
    Ok(CovariancePair {
        treated: build(Arm::Treated),
        control: build(Arm::Control),
        second_moment: second,
    })
}

/// `Σ_a` as a dense matrix.
pub fn group_covariance(s: &Spectrum, m: &PropensityModel, arm: Arm, method: CovarianceMethod<'_>) -> Result<GroupCovariance> {
    match method {
        CovarianceMethod::Analytic => {
            let g = GroupSigma::analytic(m, arm)?;
            Ok(GroupCovariance {
                arm,
                matrix: g.to_dense(s)?,
                std_error: None,
                samples: 0,
            })
        }
        CovarianceMethod::MonteCarlo { samples, rng } => {
            let pair = group_covariance_pair(s, m, samples, rng)?;
            Ok(match arm {
                Arm::Treated => pair.treated,
                Arm::Control => pair.control,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SigmaSource {
    Analytic,
    /// `std_error` is the batch-means standard error of the deviation.
    MonteCarlo { samples: usize, std_error: f64 },
    /// A caller-supplied matrix.
    Given,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub group: Option<Arm>,
    pub zeta_star: f64,
    /// `‖Σ - ζ* Σ_a‖`.
    pub deviation: f64,
    pub sigma_a_source: SigmaSource,
    pub iterations: usize,
}

impl DeviationReport {
    pub fn std_error(&self) -> f64 {
        match self.sigma_a_source {
            SigmaSource::MonteCarlo { std_error, .. } => std_error,
            _ => 0.0,
        }
    }
}

fn minimize_deviation(s: &Spectrum, g: &GroupSigma) -> Result<(GoldenSection, Split)> {
    let split = g.split(s)?;
    let tr_a = g.trace(s)?;
    if !(tr_a > 0.0) {
        return Err(Error::invalid("sigma_a", "group covariance has zero trace"));
    }
    let ratio = s.trace() / tr_a;
    let gs = golden_section_min(
        |z| split.deviation(g, z),
        1e-6 * ratio,
        1e6 * ratio,
        ZETA_REL_TOL,
        ZETA_MAX_ITER,
    );
    Ok((gs, split))
}

/// `min_{ζ > 0} ‖Σ - ζ Σ_a‖` for a dense `Σ_a` in the eigenbasis of `Σ`.
pub fn deviation_min(s: &Spectrum, sigma_a: &DMatrix<f64>) -> Result<DeviationReport> {
    if sigma_a.nrows() != s.dim() {
        return Err(Error::DimensionMismatch {
            expected: s.dim(),
            got: sigma_a.nrows(),
        });
    }
    let g = GroupSigma::dense(sigma_a.clone())?;
    let (gs, _) = minimize_deviation(s, &g)?;
    Ok(DeviationReport {
        group: None,
        zeta_star: gs.argmin,
        deviation: gs.min,
        sigma_a_source: SigmaSource::Given,
        iterations: gs.iterations,
    })
}

/// Deviation for an estimated `Σ_a`, with a batch-means standard error
/// when the estimate is Monte Carlo.
pub fn deviation_report(s: &Spectrum, est: &GroupSigmaEstimate) -> Result<DeviationReport> {
    let (gs, split) = minimize_deviation(s, &est.sigma)?;
    let source = if est.batches.is_empty() {
        SigmaSource::Analytic
    } else {
        let mut acc = Welford::new();
        acc.extend(est.batches.iter().map(|b| split.deviation(b, gs.argmin)));
        SigmaSource::MonteCarlo {
            samples: est.samples,
            std_error: acc.std_error(),
        }
    };
    Ok(DeviationReport {
        group: Some(est.arm),
        zeta_star: gs.argmin,
        deviation: gs.min,
        sigma_a_source: source,
        iterations: gs.iterations,
    })
}

/// `‖Σ - ζ Σ_a‖` at a given `ζ`.
pub fn deviation_at(s: &Spectrum, g: &GroupSigma, zeta: f64) -> Result<f64> {
    Ok(g.split(s)?.deviation(g, zeta))
}

/// Population quantities of one treatment group.
#[derive(Debug, Clone)]
pub struct GroupPopulation {
    pub arm: Arm,
    pub estimate: GroupSigmaEstimate,
    pub deviation: DeviationReport,
    /// Eigenvalues of `Σ_a`.
    pub spectrum: Spectrum,
}

/// `Σ_1`, `Σ_0` and their deviations: analytic for constant propensities,
/// Monte Carlo with `mc_samples` draws (seeded by `seed`) otherwise.
pub fn group_populations(s: &Spectrum, m: &PropensityModel, mc_samples: usize, seed: u64) -> Result<[GroupPopulation; 2]> {
    let estimates = match m {
        PropensityModel::Constant { .. } => [
            GroupSigmaEstimate::analytic(m, Arm::Treated)?,
            GroupSigmaEstimate::analytic(m, Arm::Control)?,
        ],
        _ => estimate_group_sigmas(s, m, mc_samples, &mut rng_from_seed(seed))?,
    };
    let build = |est: GroupSigmaEstimate| -> Result<GroupPopulation> {
        Ok(GroupPopulation {
            arm: est.arm,
            deviation: deviation_report(s, &est)?,
            spectrum: est.sigma.spectrum(s)?,
            estimate: est,
        })
    };
    let [t, c] = estimates;
    Ok([build(t)?, build(c)?])
}

/// User-supplied theorem constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundConstants {
    #[serde(default = "unit")]
    pub b: f64,
    #[serde(default = "unit")]
    pub c: f64,
}

fn unit() -> f64 {
    1.0
}

impl Default for BoundConstants {
    fn default() -> Self {
        BoundConstants { b: 1.0, c: 1.0 }
    }
}

/// Every component of the two upper bounds, reported separately.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremBounds {
    pub n: usize,
    pub k_star: usize,
    pub b_sigma: f64,
    pub b_sigma_1: f64,
    pub b_sigma_0: f64,
    pub v_sigma: f64,
    pub deviation_1: f64,
    pub deviation_0: f64,
    /// `c ‖θ*_a‖² B(Σ_a)`.
    pub t_bias_1: f64,
    pub t_bias_0: f64,
    /// `‖Σ - ζ*_a Σ_a‖ ‖θ*_a‖²`.
    pub t_deviation_1: f64,
    pub t_deviation_0: f64,
    /// `c ‖θ*_1‖ ‖θ*_0‖ B(Σ)`.
    pub t_cross_bias: f64,
    /// `c log(1/δ) V(Σ)`.
    pub t_variance: f64,
    /// `c log(1/δ) (‖θ*_1‖ + ‖θ*_0‖) √V(Σ)`.
    pub t_cross_variance: f64,
    pub t_bound: f64,
    /// `c ‖θ*‖² B(Σ)`.
    pub ipw_bias: f64,
    /// `c log(1/δ) V(Σ)`.
    pub ipw_variance: f64,
    pub ipw_bound: f64,
}

impl TheoremBounds {
    pub const COMPONENTS: [&'static str; 13] = [
        "t_bias_1",
        "t_bias_0",
        "t_deviation_1",
        "t_deviation_0",
        "t_cross_bias",
        "t_variance",
        "t_cross_variance",
        "t_bound",
        "ipw_bias",
        "ipw_variance",
        "ipw_bound",
        "b_sigma",
        "v_sigma",
    ];

    pub fn component_values(&self) -> [f64; 13] {
        [
            self.t_bias_1,
            self.t_bias_0,
            self.t_deviation_1,
            self.t_deviation_0,
            self.t_cross_bias,
            self.t_variance,
            self.t_cross_variance,
            self.t_bound,
            self.ipw_bias,
            self.ipw_variance,
            self.ipw_bound,
            self.b_sigma,
            self.v_sigma,
        ]
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Assemble both bounds from precomputed group populations.
pub fn theorem_bounds_with(
    ps: &ProblemSpec,
    n: usize,
    delta: f64,
    constants: BoundConstants,
    groups: &[GroupPopulation; 2],
) -> Result<TheoremBounds> {
    let BoundConstants { b, c } = constants;
    let sigma = ps.noise_sigma;
    let full = bound_terms(&ps.spectrum, n, delta, sigma, b)?;
    let v = full.variance_term.ok_or(Error::KStarUndefined { n })?;
    let k_star = full.k_star.ok_or(Error::KStarUndefined { n })?;
    let b1 = bound_terms(&groups[0].spectrum, n, delta, sigma, b)?.bias_term;
    let b0 = bound_terms(&groups[1].spectrum, n, delta, sigma, b)?.bias_term;
    let (n1, n0) = (norm(&ps.theta1), norm(&ps.theta0));
    let ns = norm(&ps.theta_star());
    let log_term = (1.0 / delta).ln();
    let t_bias_1 = c * n1 * n1 * b1;
    let t_bias_0 = c * n0 * n0 * b0;
    let t_deviation_1 = groups[0].deviation.deviation * n1 * n1;
    let t_deviation_0 = groups[1].deviation.deviation * n0 * n0;
    let t_cross_bias = c * n1 * n0 * full.bias_term;
    let t_variance = c * log_term * v;
    let t_cross_variance = c * log_term * (n1 + n0) * v.sqrt();
    let ipw_bias = c * ns * ns * full.bias_term;
    let ipw_variance = c * log_term * v;
    Ok(TheoremBounds {
        n,
        k_star,
        b_sigma: full.bias_term,
        b_sigma_1: b1,
        b_sigma_0: b0,
        v_sigma: v,
        deviation_1: groups[0].deviation.deviation,
        deviation_0: groups[1].deviation.deviation,
        t_bias_1,
        t_bias_0,
        t_deviation_1,
        t_deviation_0,
        t_cross_bias,
        t_variance,
        t_cross_variance,
        t_bound: t_bias_1 + t_bias_0 + t_deviation_1 + t_deviation_0 + t_cross_bias + t_variance + t_cross_variance,
        ipw_bias,
        ipw_variance,
        ipw_bound: ipw_bias + ipw_variance,
    })
}

/// Both bounds, estimating `Σ_a` as in [`group_populations`].
pub fn theorem_bounds(
    ps: &ProblemSpec,
    n: usize,
    delta: f64,
    constants: BoundConstants,
    mc_samples: usize,
    seed: u64,
) -> Result<TheoremBounds> {
    let groups = group_populations(&ps.spectrum, &ps.propensity, mc_samples, seed)?;
    theorem_bounds_with(ps, n, delta, constants, &groups)
}

/// Extreme eigenvalues of the tail Gram `G_{a,k} = Σ_{i>k} λ_i z_{a,i} z_{a,i}ᵀ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GramDiagnostics {
    pub arm: Arm,
    pub k: usize,
    pub group_size: usize,
    pub mu_max: f64,
    pub mu_min: f64,
    /// `λ_{k+1} r_k(Σ)`, the scale both eigenvalues concentrate around.
    pub scale: f64,
    pub ratio_max: f64,
    pub ratio_min: f64,
}

pub fn gram_eigen_diagnostics(ds: &Dataset, s: &Spectrum, arm: Arm, k: usize) -> Result<GramDiagnostics> {
    let tails = s.tails();
    let ranks = tails.ranks(k)?;
    let rows = ds.rows(arm);
    if rows.is_empty() {
        return Err(Error::EmptyGroup(arm));
    }
    if ds.p() != s.dim() {
        return Err(Error::DimensionMismatch {
            expected: s.dim(),
            got: ds.p(),
        });
    }
    // λ_i z z ᵀ is the outer product of column i of X_a, so G_{a,k} is the
    // Gram of the trailing p - k columns.
    let xa = ds.x.select_rows(&rows);
    let tail = xa.columns(k, s.dim() - k);
    let g = &tail * tail.transpose();
    let eig = symmetric_eigenvalues(&g);
    let scale = s.values()[k] * ranks.r;
    let (mu_max, mu_min) = (eig[0], *eig.last().expect("non-empty group"));
    Ok(GramDiagnostics {
        arm,
        k,
        group_size: rows.len(),
        mu_max,
        mu_min,
        scale,
        ratio_max: mu_max / scale,
        ratio_min: mu_min / scale,
    })
}
