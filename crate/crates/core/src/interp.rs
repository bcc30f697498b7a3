//! Minimum-norm interpolation and the two CATE learners built on it.
//!
//! All fits go through [`Design`], which forms the Gram matrix `X Xᵀ` of the
//! full covariate matrix once. A fit on a subset of rows uses the matching
//! principal submatrix of that Gram, so the T-learner's two group fits and
//! the IPW fit share one `O(n²p)` product and never copy rows of `X`.
//!
//! For rows `S` with design `X_S`, the fitted vector is
//! `θ̂ = X_Sᵀ (X_S X_Sᵀ)⁺ y_S`, the pseudoinverse being taken through the
//! eigendecomposition of the Gram (equivalently the thin SVD of `X_S`).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::GramPinv;
use crate::synth::{Arm, Dataset, PropensityModel};

pub const RANK_DEFICIENT: &str = "rank_deficient_design";

const GRAM_BLOCK: usize = 4096;

/// Which estimator produced a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Estimator {
    Group { arm: Arm },
    TLearner,
    IpwLearner,
    /// A plain fit not attached to a learner.
    MinNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub estimator: Estimator,
    pub theta_hat: Vec<f64>,
    pub rank_used: usize,
    pub min_singular_value: f64,
    /// Max absolute residual over the fitted rows.
    pub interpolation_residual: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn is_rank_deficient(&self) -> bool {
        self.warnings.iter().any(|w| w == RANK_DEFICIENT)
    }
}

/// A covariate matrix with its Gram matrix.
pub struct Design<'a> {
    x: &'a DMatrix<f64>,
    gram: DMatrix<f64>,
}

impl<'a> Design<'a> {
    pub fn new(x: &'a DMatrix<f64>) -> Self {
        // Accumulate over column blocks so only a block of Xᵀ is ever
        // materialized.
        let (n, p) = x.shape();
        let mut gram = DMatrix::zeros(n, n);
        for start in (0..p).step_by(GRAM_BLOCK) {
            let xb = x.columns(start, GRAM_BLOCK.min(p - start));
            gram.gemm(1.0, &xb, &xb.transpose(), 1.0);
        }
        Design { x, gram }
    }

    pub fn x(&self) -> &DMatrix<f64> {
        self.x
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Pseudoinverse of the Gram restricted to `rows`.
    pub fn pinv(&self, rows: &[usize]) -> GramPinv {
        let g = self.gram.select_rows(rows).select_columns(rows);
        GramPinv::new(&g, self.p())
    }

    /// `X_Sᵀ c` for coefficients `c` indexed like `rows`.
    fn lift(&self, rows: &[usize], c: &DVector<f64>) -> DVector<f64> {
        let mut padded = DVector::zeros(self.n());
        for (k, &i) in rows.iter().enumerate() {
            padded[i] = c[k];
        }
        self.x.tr_mul(&padded)
    }

    /// `X_Sᵀ (X_S X_Sᵀ)⁺ v`.
    pub fn pinv_transpose_apply(&self, rows: &[usize], pinv: &GramPinv, v: &[f64]) -> DVector<f64> {
        let c = pinv.apply(&DVector::from_column_slice(v));
        self.lift(rows, &c)
    }

    /// `X_S θ`.
    pub fn apply_rows(&self, rows: &[usize], theta: &DVector<f64>) -> Vec<f64> {
        let full = self.x * theta;
        rows.iter().map(|&i| full[i]).collect()
    }

    /// Minimum-norm fit of `target` on `rows`.
    pub fn fit_rows(&self, rows: &[usize], target: &[f64], estimator: Estimator) -> Result<FitResult> {
        if rows.is_empty() {
            return Err(Error::invalid("rows", "at least one row is required"));
        }
        if rows.len() != target.len() {
            return Err(Error::DimensionMismatch {
                expected: rows.len(),
                got: target.len(),
            });
        }
        let pinv = self.pinv(rows);
        let theta = self.pinv_transpose_apply(rows, &pinv, target);
        let fitted = self.apply_rows(rows, &theta);
        let residual = fitted.iter().zip(target).fold(0.0_f64, |acc, (f, t)| acc.max((f - t).abs()));
        let mut warnings = Vec::new();
        if pinv.rank < rows.len() {
            warnings.push(RANK_DEFICIENT.to_string());
        }
        Ok(FitResult {
            estimator,
            theta_hat: theta.iter().copied().collect(),
            rank_used: pinv.rank,
            min_singular_value: pinv.min_singular_value,
            interpolation_residual: residual,
            warnings,
        })
    }

    pub fn fit_all(&self, target: &[f64], estimator: Estimator) -> Result<FitResult> {
        let rows: Vec<usize> = (0..self.n()).collect();
        self.fit_rows(&rows, target, estimator)
    }
}

/// Minimum-norm solution of the normal equations for `x θ ≈ y`.
pub fn min_norm_fit(x: &DMatrix<f64>, y: &[f64]) -> Result<FitResult> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::invalid("x", "design must have at least one row and one column"));
    }
    Design::new(x).fit_all(y, Estimator::MinNorm)
}

/// The two group fits and their difference `θ̂_1 - θ̂_0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TLearnerFit {
    pub treated: FitResult,
    pub control: FitResult,
    pub effect: FitResult,
}

pub fn t_learner_fit(ds: &Dataset) -> Result<TLearnerFit> {
    t_learner_fit_with(&Design::new(&ds.x), ds)
}

pub fn t_learner_fit_with(design: &Design<'_>, ds: &Dataset) -> Result<TLearnerFit> {
    let fit = |arm: Arm| -> Result<FitResult> {
        let rows = ds.rows(arm);
        if rows.is_empty() {
            return Err(Error::EmptyGroup(arm));
        }
        let target: Vec<f64> = rows.iter().map(|&i| ds.y[i]).collect();
        design.fit_rows(&rows, &target, Estimator::Group { arm })
    };
    let treated = fit(Arm::Treated)?;
    let control = fit(Arm::Control)?;
    let mut warnings = treated.warnings.clone();
    for w in &control.warnings {
        if !warnings.contains(w) {
            warnings.push(w.clone());
        }
    }
    let effect = FitResult {
        estimator: Estimator::TLearner,
        theta_hat: treated.theta_hat.iter().zip(&control.theta_hat).map(|(a, b)| a - b).collect(),
        rank_used: treated.rank_used + control.rank_used,
        min_singular_value: treated.min_singular_value.min(control.min_singular_value),
        interpolation_residual: treated.interpolation_residual.max(control.interpolation_residual),
        warnings,
    };
    Ok(TLearnerFit {
        treated,
        control,
        effect,
    })
}

/// `ŷ_i = d_i y_i / e_i - (1 - d_i) y_i / (1 - e_i)` with the true propensity.
pub fn ipw_response(ds: &Dataset, m: &PropensityModel) -> Result<Vec<f64>> {
    let phi = m.phi();
    (0..ds.n())
        .map(|i| {
            let e = m.eval_row(&ds.x, i);
            if !(e >= phi && e <= 1.0 - phi) {
                return Err(Error::PropensityOutOfRange { row: i, value: e });
            }
            Ok(corrected_response(ds.d[i], ds.y[i], e))
        })
        .collect()
}

pub fn corrected_response(d: Arm, y: f64, e: f64) -> f64 {
    match d {
        Arm::Treated => y / e,
        Arm::Control => -y / (1.0 - e),
    }
}

pub fn ipw_learner_fit(ds: &Dataset, m: &PropensityModel) -> Result<FitResult> {
    ipw_learner_fit_with(&Design::new(&ds.x), ds, m)
}

pub fn ipw_learner_fit_with(design: &Design<'_>, ds: &Dataset, m: &PropensityModel) -> Result<FitResult> {
    let yhat = ipw_response(ds, m)?;
    design.fit_all(&yhat, Estimator::IpwLearner)
}

/// `xᵀ θ̂`.
pub fn predict(f: &FitResult, x: &[f64]) -> Result<f64> {
    if x.len() != f.theta_hat.len() {
        return Err(Error::DimensionMismatch {
            expected: f.theta_hat.len(),
            got: x.len(),
        });
    }
    Ok(x.iter().zip(&f.theta_hat).map(|(a, b)| a * b).sum())
}
