//! Synthetic potential-outcome data.
//!
//! Covariates are `x = Σ^{1/2} z` with `z` standard Gaussian, treatment is
//! drawn from a known propensity `e(x) ∈ [φ, 1-φ]`, and both potential
//! outcomes are linear in `x` with independent Gaussian noise. The observed
//! response is the potential outcome of the assigned arm.
//!
//! Covariates, assignments and the two noise vectors come from separate
//! sub-streams of the dataset seed, so assignment depends on the covariates
//! and its own stream only.

use std::fmt;
use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{csv_writer, fmt_float};
use crate::seed::{substream, LabRng};
use crate::spectra::Spectrum;

const STREAM_COVARIATES: u64 = 1;
const STREAM_ASSIGNMENT: u64 = 2;
const STREAM_NOISE_TREATED: u64 = 3;
const STREAM_NOISE_CONTROL: u64 = 4;

/// Treatment arm `a ∈ {0, 1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Control,
    Treated,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Treated, Arm::Control];

    pub fn index(self) -> u8 {
        match self {
            Arm::Control => 0,
            Arm::Treated => 1,
        }
    }

    pub fn other(self) -> Arm {
        match self {
            Arm::Control => Arm::Treated,
            Arm::Treated => Arm::Control,
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

/// Known propensity score `p(d = 1 | x)`, clamped into `[φ, 1-φ]`.
///
/// Weight vectors and coordinates refer to eigencoordinates of `Σ`
/// (zero-based); logistic weights cover the leading coordinates and are
/// zero beyond their length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PropensityModel {
    Constant {
        p1: f64,
        phi: f64,
    },
    Logistic {
        weights: Vec<f64>,
        intercept: f64,
        phi: f64,
    },
    /// `sigmoid(coefficient · x_j² + offset)` with `j = coordinate`.
    Quadratic {
        coefficient: f64,
        offset: f64,
        coordinate: usize,
        phi: f64,
    },
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl PropensityModel {
    pub fn constant(p1: f64, phi: f64) -> Result<Self> {
        let m = PropensityModel::Constant { p1, phi };
        m.validate()?;
        Ok(m)
    }

    pub fn phi(&self) -> f64 {
        match *self {
            PropensityModel::Constant { phi, .. }
            | PropensityModel::Logistic { phi, .. }
            | PropensityModel::Quadratic { phi, .. } => phi,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            PropensityModel::Constant { .. } => "constant",
            PropensityModel::Logistic { .. } => "logistic",
            PropensityModel::Quadratic { .. } => "quadratic",
        }
    }

    /// Checks parameter ranges. A constant `p1` outside `(φ, 1-φ)` is
    /// accepted and evaluates to its clamped value.
    pub fn validate(&self) -> Result<()> {
        let phi = self.phi();
        if !(phi > 0.0 && phi < 0.5) {
            return Err(Error::invalid("phi", format!("overlap must lie in (0, 0.5), got {phi}")));
        }
        match self {
            PropensityModel::Constant { p1, .. } => {
                if !(0.0..=1.0).contains(p1) {
                    return Err(Error::invalid("p1", format!("must lie in [0, 1], got {p1}")));
                }
            }
            PropensityModel::Logistic { weights, intercept, .. } => {
                if !intercept.is_finite() || weights.iter().any(|w| !w.is_finite()) {
                    return Err(Error::invalid("weights", "logistic parameters must be finite"));
                }
            }
            PropensityModel::Quadratic { coefficient, offset, .. } => {
                if !coefficient.is_finite() || !offset.is_finite() {
                    return Err(Error::invalid("coefficient", "quadratic parameters must be finite"));
                }
            }
        }
        Ok(())
    }

    /// Smallest covariate dimension the model can be evaluated on.
    pub fn min_dim(&self) -> usize {
        match self {
            PropensityModel::Constant { .. } => 0,
            PropensityModel::Logistic { weights, .. } => weights.iter().rposition(|w| *w != 0.0).map_or(0, |i| i + 1),
            PropensityModel::Quadratic { coordinate, .. } => coordinate + 1,
        }
    }

    /// Coordinates the propensity reads, ascending.
    pub fn support(&self) -> Vec<usize> {
        match self {
            PropensityModel::Constant { .. } => Vec::new(),
            PropensityModel::Logistic { weights, .. } => {
                weights.iter().enumerate().filter(|(_, w)| **w != 0.0).map(|(i, _)| i).collect()
            }
            PropensityModel::Quadratic { coordinate, .. } => vec![*coordinate],
        }
    }

    fn clamp(&self, e: f64) -> f64 {
        let phi = self.phi();
        e.clamp(phi, 1.0 - phi)
    }

    /// `p(d = 1 | x)` where `coord(j)` returns `x_j`.
    pub fn eval_with<F: Fn(usize) -> f64>(&self, coord: F) -> f64 {
        let raw = match self {
            PropensityModel::Constant { p1, .. } => *p1,
            PropensityModel::Logistic { weights, intercept, .. } => {
                let t: f64 = weights
                    .iter()
                    .enumerate()
                    .filter(|(_, w)| **w != 0.0)
                    .map(|(j, w)| w * coord(j))
                    .sum();
                sigmoid(t + intercept)
            }
            PropensityModel::Quadratic {
                coefficient,
                offset,
                coordinate,
                ..
            } => {
                let xj = coord(*coordinate);
                sigmoid(coefficient * xj * xj + offset)
            }
        };
        self.clamp(raw)
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() < self.min_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.min_dim(),
                got: x.len(),
            });
        }
        Ok(self.eval_with(|j| x[j]))
    }

    /// Propensity of row `i` of a covariate matrix.
    pub fn eval_row(&self, x: &DMatrix<f64>, i: usize) -> f64 {
        self.eval_with(|j| x[(i, j)])
    }

    /// `p(d = a | x)`.
    pub fn eval_arm_with<F: Fn(usize) -> f64>(&self, arm: Arm, coord: F) -> f64 {
        let e = self.eval_with(coord);
        match arm {
            Arm::Treated => e,
            Arm::Control => 1.0 - e,
        }
    }
}

/// Full generative description of one problem instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub spectrum: Spectrum,
    pub theta1: Vec<f64>,
    pub theta0: Vec<f64>,
    pub propensity: PropensityModel,
    /// Standard deviation of both noise terms.
    pub noise_sigma: f64,
}

impl ProblemSpec {
    pub fn new(
        spectrum: Spectrum,
        theta1: Vec<f64>,
        theta0: Vec<f64>,
        propensity: PropensityModel,
        noise_sigma: f64,
    ) -> Result<Self> {
        let ps = ProblemSpec {
            spectrum,
            theta1,
            theta0,
            propensity,
            noise_sigma,
        };
        ps.validate()?;
        Ok(ps)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.spectrum.dim();
        for (name, th) in [("theta1", &self.theta1), ("theta0", &self.theta0)] {
            if th.len() != p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    got: th.len(),
                });
            }
            if th.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(name, "entries must be finite"));
            }
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma", format!("must be positive, got {}", self.noise_sigma)));
        }
        self.propensity.validate()?;
        if self.propensity.min_dim() > p {
            return Err(Error::DimensionMismatch {
                expected: self.propensity.min_dim(),
                got: p,
            });
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.spectrum.dim()
    }

    /// `θ* = θ*_1 - θ*_0`.
    pub fn theta_star(&self) -> Vec<f64> {
        self.theta1.iter().zip(&self.theta0).map(|(a, b)| a - b).collect()
    }

    pub fn theta(&self, arm: Arm) -> &[f64] {
        match arm {
            Arm::Treated => &self.theta1,
            Arm::Control => &self.theta0,
        }
    }
}

/// Where a dataset's seed came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub cell: Option<CellCoordinates>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCoordinates {
    pub master_seed: u64,
    pub scenario: usize,
    pub n_index: usize,
    pub replication: u64,
}

/// One sampled instance, including the latent potential outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n × p`, rows are `x_iᵀ`.
    pub x: DMatrix<f64>,
    pub d: Vec<Arm>,
    pub y: Vec<f64>,
    pub y1: Vec<f64>,
    pub y0: Vec<f64>,
    pub eps1: Vec<f64>,
    pub eps0: Vec<f64>,
    pub seed: SeedRecord,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Row indices assigned to `arm`, ascending.
    pub fn rows(&self, arm: Arm) -> Vec<usize> {
        self.d.iter().enumerate().filter(|(_, a)| **a == arm).map(|(i, _)| i).collect()
    }

    pub fn count(&self, arm: Arm) -> usize {
        self.d.iter().filter(|a| **a == arm).count()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    /// Latent noise of `arm` restricted to that arm's rows.
    pub fn group_noise(&self, arm: Arm) -> Vec<f64> {
        let eps = match arm {
            Arm::Treated => &self.eps1,
            Arm::Control => &self.eps0,
        };
        self.rows(arm).into_iter().map(|i| eps[i]).collect()
    }

    /// Columns `d, y, y1, y0, eps1, eps0, x_1..x_p`.
    pub fn to_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv_writer(w);
        let mut header: Vec<String> = ["d", "y", "y1", "y0", "eps1", "eps0"].iter().map(|s| s.to_string()).collect();
        header.extend((1..=self.p()).map(|j| format!("x_{j}")));
        wr.write_record(&header)?;
        let mut rec = Vec::with_capacity(header.len());
        for i in 0..self.n() {
            rec.clear();
            rec.push(self.d[i].index().to_string());
            for v in [self.y[i], self.y1[i], self.y0[i], self.eps1[i], self.eps0[i]] {
                rec.push(fmt_float(v));
            }
            rec.extend(self.x.row(i).iter().map(|v| fmt_float(*v)));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// JSON sidecar recording the generating problem and seed.
    pub fn sidecar_json(&self, ps: &ProblemSpec) -> Result<String> {
        #[derive(Serialize)]
        struct Sidecar<'a> {
            n: usize,
            p: usize,
            seed: &'a SeedRecord,
            problem: &'a ProblemSpec,
        }
        Ok(serde_json::to_string_pretty(&Sidecar {
            n: self.n(),
            p: self.p(),
            seed: &self.seed,
            problem: ps,
        })?)
    }
}

/// `n × p` matrix with independent rows `√λ ⊙ z`, `z ~ N(0, I)`.
pub fn sample_covariates<R: Rng + ?Sized>(s: &Spectrum, n: usize, rng: &mut R) -> DMatrix<f64> {
    let p = s.dim();
    let scales: Vec<f64> = s.values().iter().map(|v| v.sqrt()).collect();
    // Column-major fill: column j holds n draws scaled by √λ_j.
    let iter = (0..n * p).map(|idx| {
        let z: f64 = StandardNormal.sample(rng);
        scales[idx / n] * z
    });
    DMatrix::from_iterator(n, p, iter)
}

/// Draw a dataset of size `n` from `ps`, deterministic in `seed`.
pub fn make_dataset(ps: &ProblemSpec, n: usize, seed: u64) -> Result<Dataset> {
    make_dataset_with_record(ps, n, SeedRecord { seed, cell: None })
}

pub fn make_dataset_with_record(ps: &ProblemSpec, n: usize, record: SeedRecord) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("n", "sample count must be at least 1"));
    }
    ps.validate()?;
    let seed = record.seed;
    let x = sample_covariates(&ps.spectrum, n, &mut substream(seed, STREAM_COVARIATES));
    let d = assign_treatment(&ps.propensity, &x, &mut substream(seed, STREAM_ASSIGNMENT));
    let eps1 = draw_noise(n, ps.noise_sigma, &mut substream(seed, STREAM_NOISE_TREATED));
    let eps0 = draw_noise(n, ps.noise_sigma, &mut substream(seed, STREAM_NOISE_CONTROL));
    let th1 = nalgebra::DVector::from_column_slice(&ps.theta1);
    let th0 = nalgebra::DVector::from_column_slice(&ps.theta0);
    let m1 = &x * th1;
    let m0 = &x * th0;
    let y1: Vec<f64> = (0..n).map(|i| m1[i] + eps1[i]).collect();
    let y0: Vec<f64> = (0..n).map(|i| m0[i] + eps0[i]).collect();
    let y = (0..n)
        .map(|i| match d[i] {
            Arm::Treated => y1[i],
            Arm::Control => y0[i],
        })
        .collect();
    Ok(Dataset {
        x,
        d,
        y,
        y1,
        y0,
        eps1,
        eps0,
        seed: record,
    })
}

/// Bernoulli assignment from the propensity of each row. Reads only the
/// covariates and `rng`.
pub fn assign_treatment(m: &PropensityModel, x: &DMatrix<f64>, rng: &mut LabRng) -> Vec<Arm> {
    (0..x.nrows())
        .map(|i| {
            let e = m.eval_row(x, i);
            let u: f64 = rng.random();
            if u < e {
                Arm::Treated
            } else {
                Arm::Control
            }
        })
        .collect()
}

fn draw_noise(n: usize, sigma: f64, rng: &mut LabRng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sigma * z
        })
        .collect()
}
