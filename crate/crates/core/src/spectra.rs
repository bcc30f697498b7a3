//! Covariance spectra, effective ranks and the bias/variance bound terms.
//!
//! A covariance `Σ` is stored in its own eigenbasis, i.e. as the descending
//! sequence of its eigenvalues `λ_1 ≥ λ_2 ≥ … ≥ λ_p ≥ 0`. Every quantity
//! computed in this crate is invariant under an orthogonal change of basis,
//! so the diagonal representation loses nothing; [`Spectrum::covariance`]
//! materializes `Q Λ Qᵀ` for robustness checks that want a rotated frame.
//!
//! For a tail index `k` the two effective ranks are
//!
//! ```text
//! r_k = (Σ_{i>k} λ_i) / λ_{k+1}        R_k = (Σ_{i>k} λ_i)² / Σ_{i>k} λ_i²
//! ```
//!
//! and the critical index `k*` is the smallest `k` with `r_k ≥ b n`.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt_float, write_atomic};

/// Which generator produced a spectrum, with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "snake_case")]
pub enum SpectrumFamily {
    Custom {},
    Identity {},
    BenignA { alpha: f64, beta: f64 },
    BenignB { tau: f64, eps: f64 },
}

#[derive(Serialize, Deserialize)]
struct SpectrumRepr {
    #[serde(flatten)]
    family: SpectrumFamily,
    values: Vec<f64>,
}

/// Descending, nonnegative eigenvalue sequence with `λ_1 > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpectrumRepr", into = "SpectrumRepr")]
pub struct Spectrum {
    values: Vec<f64>,
    family: SpectrumFamily,
}

impl TryFrom<SpectrumRepr> for Spectrum {
    type Error = Error;

    fn try_from(r: SpectrumRepr) -> Result<Self> {
        Spectrum::with_family(r.values, r.family)
    }
}

impl From<Spectrum> for SpectrumRepr {
    fn from(s: Spectrum) -> Self {
        SpectrumRepr {
            family: s.family,
            values: s.values,
        }
    }
}

impl Spectrum {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        Self::with_family(values, SpectrumFamily::Custom {})
    }

    pub fn with_family(values: Vec<f64>, family: SpectrumFamily) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidSpectrum("empty spectrum".into()));
        }
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::InvalidSpectrum(format!("λ_{} = {v} is not a finite nonnegative value", i + 1)));
            }
        }
        if let Some(i) = values.windows(2).position(|w| w[1] > w[0]) {
            return Err(Error::InvalidSpectrum(format!(
                "values must be non-increasing (λ_{} = {} < λ_{} = {})",
                i + 1,
                values[i],
                i + 2,
                values[i + 1]
            )));
        }
        if values[0] <= 0.0 {
            return Err(Error::InvalidSpectrum("λ_1 must be positive".into()));
        }
        Ok(Spectrum { values, family })
    }

    /// `p` equal unit eigenvalues.
    pub fn identity(p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::invalid("p", "dimension must be at least 1"));
        }
        Self::with_family(vec![1.0; p], SpectrumFamily::Identity {})
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn family(&self) -> &SpectrumFamily {
        &self.family
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `‖Σ‖ = λ_1`.
    pub fn norm(&self) -> f64 {
        self.values[0]
    }

    pub fn trace(&self) -> f64 {
        neumaier_sum(self.values.iter().rev().copied())
    }

    /// Dense covariance `Q diag(λ) Qᵀ`; the eigenbasis itself when `rotation`
    /// is `None`.
    pub fn covariance(&self, rotation: Option<&DMatrix<f64>>) -> Result<DMatrix<f64>> {
        let diag = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.values));
        match rotation {
            None => Ok(diag),
            Some(q) => {
                if q.nrows() != self.dim() || q.ncols() != self.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: self.dim(),
                        got: q.nrows(),
                    });
                }
                Ok(q * diag * q.transpose())
            }
        }
    }

    /// Suffix sums used by every effective-rank query.
    pub fn tails(&self) -> Tails {
        Tails::new(&self.values)
    }

    pub fn to_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        wr.write_record(["lambda"])?;
        for v in &self.values {
            wr.write_record([fmt_float(*v)])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn from_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let headers = rd.headers()?.clone();
        if headers.len() != 1 || &headers[0] != "lambda" {
            return Err(Error::InvalidSpectrum(format!("expected a single `lambda` column, found {headers:?}")));
        }
        let mut values = Vec::new();
        for (line, rec) in rd.records().enumerate() {
            let rec = rec?;
            let v: f64 = rec[0]
                .trim()
                .parse()
                .map_err(|e| Error::InvalidSpectrum(format!("row {}: {e}", line + 1)))?;
            values.push(v);
        }
        Spectrum::new(values)
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.to_csv(&mut buf)?;
        write_atomic(path, &buf)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Compensated summation; callers pass values smallest-first where possible.
pub(crate) fn neumaier_sum<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for x in it {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Suffix sums `Σ_{i>k} λ_i` and `Σ_{i>k} λ_i²` for `k = 0..=p`.
#[derive(Debug, Clone)]
pub struct Tails {
    lambda: Vec<f64>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl Tails {
    fn new(values: &[f64]) -> Self {
        let p = values.len();
        let mut sum = vec![0.0; p + 1];
        let mut sum_sq = vec![0.0; p + 1];
        let (mut s, mut cs, mut q, mut cq) = (0.0_f64, 0.0_f64, 0.0_f64, 0.0_f64);
        for k in (0..p).rev() {
            let x = values[k];
            let t = s + x;
            cs += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
            s = t;
            let x2 = x * x;
            let t2 = q + x2;
            cq += if q.abs() >= x2.abs() { (q - t2) + x2 } else { (x2 - t2) + q };
            q = t2;
            sum[k] = s + cs;
            sum_sq[k] = q + cq;
        }
        Tails {
            lambda: values.to_vec(),
            sum,
            sum_sq,
        }
    }

    pub fn dim(&self) -> usize {
        self.lambda.len()
    }

    /// `Σ_{i>k} λ_i` (one-based `i`, so `k = 0` is the trace).
    pub fn tail_sum(&self, k: usize) -> f64 {
        self.sum[k.min(self.dim())]
    }

    pub fn ranks(&self, k: usize) -> Result<EffectiveRanks> {
        if k >= self.dim() || self.lambda[k] <= 0.0 {
            return Err(Error::RankUndefined { k });
        }
        let tail = self.sum[k];
        Ok(EffectiveRanks {
            k,
            r: tail / self.lambda[k],
            big_r: tail * tail / self.sum_sq[k],
        })
    }

    pub fn critical_index(&self, n: usize, b: f64) -> Option<usize> {
        let target = b * n as f64;
        for k in 0..self.dim() {
            let lam = self.lambda[k];
            if lam <= 0.0 {
                return None;
            }
            if self.sum[k] / lam >= target {
                return Some(k);
            }
        }
        None
    }
}

/// `(r_k, R_k)` at one tail index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveRanks {
    pub k: usize,
    pub r: f64,
    pub big_r: f64,
}

pub fn make_benign_a(p: usize, alpha: f64, beta: f64) -> Result<Spectrum> {
    if p == 0 {
        return Err(Error::invalid("p", "dimension must be at least 1"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid("alpha", format!("must be positive, got {alpha}")));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid("beta", format!("must be positive, got {beta}")));
    }
    let values = (1..=p).map(|k| benign_a_value(k, alpha, beta)).collect();
    Spectrum::with_family(values, SpectrumFamily::BenignA { alpha, beta })
}

fn benign_a_value(k: usize, alpha: f64, beta: f64) -> f64 {
    let kf = k as f64;
    kf.powf(-alpha) * (kf.ln_1p()).powf(-beta)
}

pub fn make_benign_b(p_n: usize, tau: f64, eps_n: f64) -> Result<Spectrum> {
    if p_n == 0 {
        return Err(Error::invalid("p_n", "dimension must be at least 1"));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid("tau", format!("must be positive, got {tau}")));
    }
    if !(eps_n >= 0.0 && eps_n.is_finite()) {
        return Err(Error::invalid("eps_n", format!("must be nonnegative, got {eps_n}")));
    }
    let values = (1..=p_n).map(|k| (-(k as f64) / tau).exp() + eps_n).collect();
    Spectrum::with_family(values, SpectrumFamily::BenignB { tau, eps: eps_n })
}

/// Finite dimension at which a case-(a) spectrum is cut.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Truncation {
    pub dim: usize,
    /// Upper bound on the discarded mass `Σ_{k>dim} λ_k`.
    pub tail_bound: f64,
    /// Retained mass `Σ_{k≤dim} λ_k`.
    pub retained: f64,
    /// False when `max_dim` was hit before the tolerance was met.
    pub converged: bool,
}

/// Integral upper bound on `Σ_{k>p} k^{-α} ln^{-β}(k+1)`.
fn benign_a_tail_bound(p: usize, alpha: f64, beta: f64) -> f64 {
    let pf = p as f64;
    if alpha > 1.0 {
        pf.powf(1.0 - alpha) / ((alpha - 1.0) * pf.ln_1p().powf(beta))
    } else if p >= 2 {
        pf.ln().powf(1.0 - beta) / (beta - 1.0)
    } else {
        f64::INFINITY
    }
}

/// Smallest dimension whose discarded tail is below `tol` times the
/// retained mass, capped at `max_dim`.
///
/// The sequence is summable only for `α > 1`, or `α = 1` with `β > 1`.
/// For `α = 1` the tail decays like `ln^{1-β} p`, so tight tolerances are
/// usually unreachable and the cap applies.
pub fn benign_a_truncation(alpha: f64, beta: f64, tol: f64, max_dim: usize) -> Result<Truncation> {
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::invalid("alpha/beta", "must be positive"));
    }
    if alpha < 1.0 || (alpha == 1.0 && beta <= 1.0) {
        return Err(Error::invalid(
            "alpha/beta",
            format!("Σ k^-α ln^-β(k+1) diverges for α = {alpha}, β = {beta}"),
        ));
    }
    if !(tol > 0.0) || max_dim == 0 {
        return Err(Error::invalid("tol/max_dim", "tolerance must be positive and max_dim at least 1"));
    }
    let mut prefix = vec![0.0_f64];
    let extend = |prefix: &mut Vec<f64>, upto: usize| {
        while prefix.len() <= upto {
            let k = prefix.len();
            let last = *prefix.last().unwrap();
            prefix.push(last + benign_a_value(k, alpha, beta));
        }
    };
    let ok = |prefix: &Vec<f64>, p: usize| benign_a_tail_bound(p, alpha, beta) <= tol * prefix[p];
    let mut hi = 1usize;
    extend(&mut prefix, hi);
    while !ok(&prefix, hi) && hi < max_dim {
        hi = (hi * 2).min(max_dim);
        extend(&mut prefix, hi);
    }
    if !ok(&prefix, hi) {
        return Ok(Truncation {
            dim: hi,
            tail_bound: benign_a_tail_bound(hi, alpha, beta),
            retained: prefix[hi],
            converged: false,
        });
    }
    let mut lo = hi / 2;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if ok(&prefix, mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    if lo >= 1 && ok(&prefix, lo) {
        hi = lo;
    }
    Ok(Truncation {
        dim: hi,
        tail_bound: benign_a_tail_bound(hi, alpha, beta),
        retained: prefix[hi],
        converged: true,
    })
}

pub fn effective_ranks(s: &Spectrum, k: usize) -> Result<EffectiveRanks> {
    s.tails().ranks(k)
}

/// `k* = min{k ≥ 0 : r_k ≥ b n}`, `None` when the set is empty.
pub fn critical_index(s: &Spectrum, n: usize, b: f64) -> Option<usize> {
    s.tails().critical_index(n, b)
}

/// Bias/variance bound terms for one spectrum and sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub n: usize,
    pub delta: f64,
    pub sigma: f64,
    pub b: f64,
    pub norm: f64,
    pub r0: f64,
    pub k_star: Option<usize>,
    pub r_kstar: Option<f64>,
    pub big_r_kstar: Option<f64>,
    /// `‖Σ‖ max{√(r_0/n), r_0/n, ln(1/δ)/n}`.
    pub bias_term: f64,
    /// `σ² (k*/n + n/R_{k*})`; `None` when `k*` is undefined.
    pub variance_term: Option<f64>,
}

pub fn bound_terms(s: &Spectrum, n: usize, delta: f64, sigma: f64, b: f64) -> Result<BoundReport> {
    bound_terms_with_tails(&s.tails(), s.norm(), n, delta, sigma, b)
}

pub(crate) fn bound_terms_with_tails(
    tails: &Tails,
    norm: f64,
    n: usize,
    delta: f64,
    sigma: f64,
    b: f64,
) -> Result<BoundReport> {
    if n < 1 {
        return Err(Error::invalid("n", "sample count must be at least 1"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid("delta", format!("must lie in (0, 1), got {delta}")));
    }
    let nf = n as f64;
    let r0 = tails.ranks(0)?.r;
    let bias_term = norm * (r0 / nf).sqrt().max(r0 / nf).max((1.0 / delta).ln() / nf);
    let k_star = tails.critical_index(n, b);
    let (r_kstar, big_r_kstar, variance_term) = match k_star {
        Some(k) => {
            let ranks = tails.ranks(k)?;
            let v = sigma * sigma * (k as f64 / nf + nf / ranks.big_r);
            (Some(ranks.r), Some(ranks.big_r), Some(v))
        }
        None => (None, None, None),
    };
    Ok(BoundReport {
        n,
        delta,
        sigma,
        b,
        norm,
        r0,
        k_star,
        r_kstar,
        big_r_kstar,
        bias_term,
        variance_term,
    })
}

/// Dimension as a function of `n`: `p_n = max(1, ⌈coef · n^exponent⌉)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeRule {
    #[serde(default = "one")]
    pub coef: f64,
    pub exponent: f64,
}

fn one() -> f64 {
    1.0
}

impl SizeRule {
    pub fn eval(&self, n: usize) -> usize {
        let v = (self.coef * (n as f64).powf(self.exponent)).ceil();
        if v.is_finite() && v >= 1.0 {
            v as usize
        } else {
            1
        }
    }
}

/// Isotropic floor `ε_n` as a function of `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EpsRule {
    Constant { value: f64 },
    /// `scale / (n ln n)`.
    InverseNLogN { scale: f64 },
    /// `coef · n^exponent`.
    Power { coef: f64, exponent: f64 },
}

impl EpsRule {
    pub fn eval(&self, n: usize) -> f64 {
        let nf = n as f64;
        match *self {
            EpsRule::Constant { value } => value,
            EpsRule::InverseNLogN { scale } => scale / (nf * nf.ln()),
            EpsRule::Power { coef, exponent } => coef * nf.powf(exponent),
        }
    }
}

/// Families covered by the benign-covariance diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "case", rename_all = "snake_case")]
pub enum BenignFamily {
    /// Fixed `μ_k = k^{-α} ln^{-β}(k+1)`; `dim = None` picks the truncation.
    CaseA { alpha: f64, beta: f64, dim: Option<usize> },
    /// `μ_k(Σ_n) = exp(-k/τ) + ε_n` for `k ≤ p_n`.
    CaseB { tau: f64, dim: SizeRule, eps: EpsRule },
}

pub const DEFAULT_TRUNCATION_TOL: f64 = 1e-6;
pub const DEFAULT_TRUNCATION_MAX_DIM: usize = 1 << 21;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenignRow {
    pub n: usize,
    pub p: usize,
    pub r0_over_n: f64,
    pub k_star: Option<usize>,
    pub kstar_over_n: Option<f64>,
    pub n_over_big_r_kstar: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenignDiagnostics {
    pub rows: Vec<BenignRow>,
    /// Case (a): `α = 1 ∧ β > 1`. Case (b): the growth conditions evaluated
    /// on the grid endpoints (see [`benign_diagnostics`]).
    pub closed_form_flag: bool,
    /// Whether each ratio strictly decreases along the grid (`false` when
    /// any entry is undefined).
    pub r0_decreasing: bool,
    pub kstar_decreasing: bool,
    pub big_r_decreasing: bool,
    pub truncation: Option<Truncation>,
}

/// Finite-`n` diagnostics of the three ratios `r_0/n`, `k*/n`, `n/R_{k*}`.
///
/// For case (b) the flag is a finite-grid proxy for the growth conditions
/// `p_n = ω(n)` and `n e^{-o(n)} = ε_n p_n = o(n)`: between the first and
/// last grid point `p_n/n` must increase, `ε_n p_n / n` must decrease, and
/// `ln(n/(ε_n p_n))/n` must decrease with `ε_n p_n > 0`. It is a trend
/// statement on the supplied grid, not a limit.
pub fn benign_diagnostics(family: &BenignFamily, n_grid: &[usize], b: f64) -> Result<BenignDiagnostics> {
    if n_grid.is_empty() {
        return Err(Error::invalid("n_grid", "must be nonempty"));
    }
    if n_grid.windows(2).any(|w| w[1] <= w[0]) || n_grid[0] == 0 {
        return Err(Error::invalid("n_grid", "must be positive and strictly increasing"));
    }
    let mut rows = Vec::with_capacity(n_grid.len());
    let (flag, truncation) = match *family {
        BenignFamily::CaseA { alpha, beta, dim } => {
            let (p, trunc) = match dim {
                Some(p) => (p, None),
                None => {
                    let t = benign_a_truncation(alpha, beta, DEFAULT_TRUNCATION_TOL, DEFAULT_TRUNCATION_MAX_DIM)?;
                    (t.dim, Some(t))
                }
            };
            let s = make_benign_a(p, alpha, beta)?;
            let tails = s.tails();
            for &n in n_grid {
                rows.push(benign_row(&tails, n, b)?);
            }
            (alpha == 1.0 && beta > 1.0, trunc)
        }
        BenignFamily::CaseB { tau, dim, eps } => {
            for &n in n_grid {
                let s = make_benign_b(dim.eval(n), tau, eps.eval(n))?;
                rows.push(benign_row(&s.tails(), n, b)?);
            }
            let first = n_grid[0];
            let last = *n_grid.last().unwrap();
            let growth = |n: usize| dim.eval(n) as f64 / n as f64;
            let floor_mass = |n: usize| eps.eval(n) * dim.eval(n) as f64;
            let lower = |n: usize| ((n as f64) / floor_mass(n)).ln() / n as f64;
            let flag = n_grid.len() >= 2
                && floor_mass(first) > 0.0
                && floor_mass(last) > 0.0
                && growth(last) > growth(first)
                && floor_mass(last) / (last as f64) < floor_mass(first) / (first as f64)
                && lower(last) < lower(first);
            (flag, None)
        }
    };
    let decreasing = |f: &dyn Fn(&BenignRow) -> Option<f64>| {
        let vals: Option<Vec<f64>> = rows.iter().map(f).collect();
        vals.is_some_and(|v| v.windows(2).all(|w| w[1] < w[0]))
    };
    Ok(BenignDiagnostics {
        r0_decreasing: decreasing(&|r| Some(r.r0_over_n)),
        kstar_decreasing: decreasing(&|r| r.kstar_over_n),
        big_r_decreasing: decreasing(&|r| r.n_over_big_r_kstar),
        rows,
        closed_form_flag: flag,
        truncation,
    })
}

fn benign_row(tails: &Tails, n: usize, b: f64) -> Result<BenignRow> {
    let nf = n as f64;
    let r0 = tails.ranks(0)?.r;
    let k_star = tails.critical_index(n, b);
    let big_r = match k_star {
        Some(k) => Some(tails.ranks(k)?.big_r),
        None => None,
    };
    Ok(BenignRow {
        n,
        p: tails.dim(),
        r0_over_n: r0 / nf,
        k_star,
        kstar_over_n: k_star.map(|k| k as f64 / nf),
        n_over_big_r_kstar: big_r.map(|r| nf / r),
    })
}
