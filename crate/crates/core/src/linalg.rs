//! Dense linear-algebra helpers shared by the learners and risk modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted in
/// descending order (columns of `vectors` permuted to match).
#[derive(Debug, Clone)]
pub struct SortedEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

pub fn symmetric_eigen(m: &DMatrix<f64>) -> SortedEigen {
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = DMatrix::from_fn(m.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    SortedEigen { values, vectors }
}

/// Eigenvalues only, descending.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

/// Largest absolute entry of `m - m^T`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for j in 0..m.ncols() {
        for i in 0..j {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn ensure_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch {
            expected: m.nrows(),
            got: m.ncols(),
        });
    }
    let scale = m.amax().max(1.0);
    let asym = asymmetry(m);
    if asym > 1e-10 * scale {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(())
}

/// Spectral norm of a symmetric matrix.
pub fn symmetric_operator_norm(m: &DMatrix<f64>) -> f64 {
    if is_diagonal(m) {
        return m.diagonal().amax();
    }
    m.clone()
        .symmetric_eigenvalues()
        .iter()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn is_diagonal(m: &DMatrix<f64>) -> bool {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if i != j && m[(i, j)] != 0.0 {
                return false;
            }
        }
    }
    true
}

/// Result of a golden-section search.
#[derive(Debug, Clone)]
pub struct GoldenSection {
    pub argmin: f64,
    pub min: f64,
    pub iterations: usize,
    /// Every (x, f(x)) evaluated, in evaluation order.
    pub probes: Vec<(f64, f64)>,
}

/// Minimize a unimodal function on `[lo, hi]`.
///
/// Stops once the bracket width falls below `rel_tol * max(1, |x|)` or
/// after `max_iter` shrink steps. The returned minimum is the best probe
/// seen, so it never exceeds any evaluated value.
pub fn golden_section_min<F>(mut f: F, lo: f64, hi: f64, rel_tol: f64, max_iter: usize) -> GoldenSection
where
    F: FnMut(f64) -> f64,
{
    let inv_phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo.min(hi), lo.max(hi));
    let mut probes = Vec::with_capacity(max_iter + 4);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    probes.push((c, fc));
    probes.push((d, fd));
    let mut iterations = 0;
    while iterations < max_iter && (b - a) > rel_tol * 1.0_f64.max(0.5 * (a + b).abs()) {
        iterations += 1;
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
            probes.push((c, fc));
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
            probes.push((d, fd));
        }
    }
    let mid = 0.5 * (a + b);
    let fm = f(mid);
    probes.push((mid, fm));
    let (argmin, min) = probes
        .iter()
        .copied()
        .fold((f64::NAN, f64::INFINITY), |best, p| if p.1 < best.1 { p } else { best });
    GoldenSection {
        argmin,
        min,
        iterations,
        probes,
    }
}

/// Pseudo-inverse of a positive semidefinite Gram matrix `G = X X^T`,
/// expressed through the thin SVD of `X`: `G = U S^2 U^T`.
#[derive(Debug, Clone)]
pub struct GramPinv {
    /// Kept left singular vectors (columns).
    basis: DMatrix<f64>,
    /// Kept squared singular values.
    squared: DVector<f64>,
    pub rank: usize,
    /// Smallest singular value of `X` (kept or not), clamped at zero.
    pub min_singular_value: f64,
    pub max_singular_value: f64,
}

impl GramPinv {
    /// `cols` is the column count of the design the Gram was formed from;
    /// it enters the relative cutoff `eps * max(rows, cols)`.
    pub fn new(gram: &DMatrix<f64>, cols: usize) -> Self {
        let m = gram.nrows();
        let eig = symmetric_eigen(gram);
        let mu_max = eig.values.iter().copied().fold(0.0_f64, f64::max);
        let rcond = f64::EPSILON * (m.max(cols) as f64);
        // Gram eigenvalues carry absolute error of order eps * m * mu_max, so
        // the cutoff is applied to s^2 (equivalently sqrt(rcond) on s).
        let cutoff = rcond * mu_max;
        let kept: Vec<usize> = (0..m).filter(|&i| eig.values[i] > cutoff && eig.values[i] > 0.0).collect();
        let basis = DMatrix::from_fn(m, kept.len(), |r, c| eig.vectors[(r, kept[c])]);
        let squared = DVector::from_iterator(kept.len(), kept.iter().map(|&i| eig.values[i]));
        let mu_min = eig.values.iter().copied().fold(f64::INFINITY, f64::min);
        GramPinv {
            basis,
            squared,
            rank: kept.len(),
            min_singular_value: if m == 0 { 0.0 } else { mu_min.max(0.0).sqrt() },
            max_singular_value: mu_max.max(0.0).sqrt(),
        }
    }

    /// `G^+ v`.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut coords = self.basis.tr_mul(v);
        for (c, s) in coords.iter_mut().zip(self.squared.iter()) {
            *c /= s;
        }
        &self.basis * coords
    }
}
