//! Built-in oracle suite.
//!
//! Each check compares a library routine against an independent
//! computation on freshly drawn instances and reports the measured
//! discrepancy next to its tolerance.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::interp::{corrected_response, min_norm_fit, t_learner_fit};
use crate::io::{csv_writer, finish_csv, fmt_float};
use crate::lab::preset;
use crate::risk::{decompose_risk, deviation_report, mc_risk_pair, GroupSigmaEstimate};
use crate::seed::{substream, LabRng};
use crate::spectra::{make_benign_b, Spectrum};
use crate::synth::{make_dataset, sample_covariates, Arm, ProblemSpec, PropensityModel};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Reassemble the decomposition without the within-group cross terms;
    /// the identity check must then fail.
    pub sabotage: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub tolerance: f64,
    pub measured: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, tolerance: f64, measured: f64, detail: String) -> Self {
        Check {
            name: name.to_string(),
            tolerance,
            measured,
            passed: measured <= tolerance,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub sabotage: bool,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut wr = csv_writer(Vec::new());
        wr.write_record(["check", "tolerance", "measured", "passed", "detail"])?;
        for c in &self.checks {
            wr.write_record([
                c.name.clone(),
                fmt_float(c.tolerance),
                fmt_float(c.measured),
                c.passed.to_string(),
                c.detail.clone(),
            ])?;
        }
        finish_csv(wr)
    }

    /// Human-readable table.
    pub fn table(&self) -> String {
        let mut out = format!("{:<24} {:>12} {:>12}  result\n", "check", "tolerance", "measured");
        for c in &self.checks {
            out.push_str(&format!(
                "{:<24} {:>12.3e} {:>12.3e}  {}  {}\n",
                c.name,
                c.tolerance,
                c.measured,
                if c.passed { "PASS" } else { "FAIL" },
                c.detail
            ));
        }
        out
    }
}

pub const IDENTITY_TOL: f64 = 1e-8;
pub const INTERPOLATION_TOL: f64 = 1e-10;
pub const Z_TOL: f64 = 4.0;
pub const RCT_DEVIATION_TOL: f64 = 1e-9;

pub fn run(opts: VerifyOptions) -> Result<VerifyReport> {
    let checks = vec![
        decomposition_identity(opts.seed, opts.sabotage)?,
        interpolation(opts.seed)?,
        unbiasedness(opts.seed)?,
        risk_equivalence(opts.seed)?,
        rct_deviation()?,
    ];
    Ok(VerifyReport {
        seed: opts.seed,
        sabotage: opts.sabotage,
        checks,
    })
}

fn random_spectrum(p: usize, rng: &mut LabRng) -> Result<Spectrum> {
    let mut v: Vec<f64> = (0..p).map(|_| rng.random_range(0.01..1.0)).collect();
    v.sort_by(|a, b| b.total_cmp(a));
    Spectrum::new(v)
}

fn gaussian_vec(p: usize, rng: &mut LabRng) -> Vec<f64> {
    (0..p).map(|_| StandardNormal.sample(rng)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn decomposition_identity(seed: u64, sabotage: bool) -> Result<Check> {
    let mut rng = substream(seed, 101);
    let instances = 30;
    let mut worst: f64 = 0.0;
    let mut done = 0;
    let mut attempt = 0u64;
    while done < instances {
        attempt += 1;
        let n = rng.random_range(10..=30);
        let p = rng.random_range(2 * n..=4 * n);
        let propensity = preset(["rct", "bias_odd", "bias_even"][done % 3]).expect("preset").propensity;
        let ps = ProblemSpec::new(random_spectrum(p, &mut rng)?, gaussian_vec(p, &mut rng), gaussian_vec(p, &mut rng), propensity, 0.5)?;
        let ds = make_dataset(&ps, n, seed.wrapping_add(attempt))?;
        if ds.count(Arm::Treated) == 0 || ds.count(Arm::Control) == 0 {
            continue;
        }
        let r = decompose_risk(&ds, &ps)?;
        let total = if sabotage { r.terms.sum_without_within() } else { r.terms.sum() };
        worst = worst.max((r.exact_risk - total).abs() / (1.0 + r.exact_risk));
        done += 1;
    }
    Ok(Check::new(
        "decomposition_identity",
        IDENTITY_TOL,
        worst,
        format!("max |risk - sum(terms)| / (1 + risk) over {instances} instances"),
    ))
}

fn interpolation(seed: u64) -> Result<Check> {
    let mut rng = substream(seed, 102);
    let (n, p) = (5, 50);
    let x = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
    let y = gaussian_vec(n, &mut rng);
    let fit = min_norm_fit(&x, &y)?;
    let base = norm(&fit.theta_hat);
    let mut excess: f64 = 0.0;
    for _ in 0..100 {
        // Project a random direction onto the null space of X.
        let g = gaussian_vec(p, &mut rng);
        let xg: Vec<f64> = (&x * nalgebra::DVector::from_column_slice(&g)).iter().copied().collect();
        let row_part = min_norm_fit(&x, &xg)?.theta_hat;
        let perturbed: Vec<f64> = fit.theta_hat.iter().zip(&g).zip(&row_part).map(|((t, g), r)| t + g - r).collect();
        excess = excess.max(base - norm(&perturbed));
    }
    Ok(Check::new(
        "interpolation",
        INTERPOLATION_TOL,
        fit.interpolation_residual.max(excess),
        "max(residual, norm excess over 100 null-space moves)".to_string(),
    ))
}

fn unbiasedness(seed: u64) -> Result<Check> {
    let mut rng = substream(seed, 103);
    let sc = preset("bias_even").expect("preset");
    let p = 10;
    let spectrum = make_benign_b(p, 5.0, 0.01)?;
    let mut theta1 = vec![0.0; p];
    let mut theta0 = vec![0.0; p];
    theta1[0] = 1.0;
    theta0[1] = 1.0;
    let ps = ProblemSpec::new(spectrum, theta1, theta0, sc.propensity.clone(), sc.noise_sigma)?;
    let points = sample_covariates(&ps.spectrum, 3, &mut rng);
    let resamples = 100_000;
    let mut worst: f64 = 0.0;
    for i in 0..points.nrows() {
        let x: Vec<f64> = points.row(i).iter().copied().collect();
        let e = ps.propensity.eval(&x)?;
        let f1: f64 = x.iter().zip(&ps.theta1).map(|(a, b)| a * b).sum();
        let f0: f64 = x.iter().zip(&ps.theta0).map(|(a, b)| a * b).sum();
        let mut acc = crate::stats::Welford::new();
        for _ in 0..resamples {
            let d = if rng.random::<f64>() < e { Arm::Treated } else { Arm::Control };
            let noise: f64 = StandardNormal.sample(&mut rng);
            let y = match d {
                Arm::Treated => f1,
                Arm::Control => f0,
            } + ps.noise_sigma * noise;
            acc.push(corrected_response(d, y, e));
        }
        worst = worst.max((acc.mean() - (f1 - f0)).abs() / acc.std_error());
    }
    Ok(Check::new(
        "ipw_unbiasedness",
        Z_TOL,
        worst,
        format!("max |z| of the corrected-response mean at 3 points, {resamples} resamples each"),
    ))
}

fn risk_equivalence(seed: u64) -> Result<Check> {
    let mut rng = substream(seed, 104);
    let p = 50;
    let propensity = preset("bias_odd").expect("preset").propensity;
    let ps = ProblemSpec::new(make_benign_b(p, 5.0, 0.01)?, gaussian_vec(p, &mut rng), gaussian_vec(p, &mut rng), propensity, 0.5)?;
    // A fitted direction, so the risk is not trivially zero.
    let ds = make_dataset(&ps, 20, seed)?;
    let theta = t_learner_fit(&ds)?.effect.theta_hat;
    let pair = mc_risk_pair(&theta, &ps, 200_000, &mut rng)?;
    let z = pair.difference.value.abs() / pair.difference.std_error;
    Ok(Check::new(
        "risk_equivalence",
        Z_TOL,
        z,
        format!("|ipw - t| / paired se (t = {:.4}, ipw = {:.4})", pair.t_risk.value, pair.ipw_risk.value),
    ))
}

fn rct_deviation() -> Result<Check> {
    let spectrum = make_benign_b(200, 5.0, 0.01)?;
    let m = PropensityModel::constant(0.3, 0.05)?;
    let mut worst: f64 = 0.0;
    for arm in Arm::BOTH {
        let r = deviation_report(&spectrum, &GroupSigmaEstimate::analytic(&m, arm)?)?;
        worst = worst.max(r.deviation / spectrum.norm());
    }
    Ok(Check::new(
        "rct_deviation",
        RCT_DEVIATION_TOL,
        worst,
        "max over arms of min_zeta ||S - zeta S_a|| / ||S|| at constant propensity 0.3".to_string(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let r = run(VerifyOptions::default()).unwrap();
        assert!(r.passed(), "{}", r.table());
        assert_eq!(r.checks.len(), 5);
    }

    #[test]
    fn sabotage_breaks_identity_only() {
        let r = run(VerifyOptions { seed: 0, sabotage: true }).unwrap();
        let failed: Vec<&str> = r.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        assert_eq!(failed, ["decomposition_identity"]);
    }

    #[test]
    fn csv_has_one_line_per_check() {
        let r = run(VerifyOptions { seed: 3, sabotage: false }).unwrap();
        let csv = r.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.starts_with("check,tolerance,measured,passed,detail\n"));
    }
}
