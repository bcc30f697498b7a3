//! JSON run configuration and the sweep manifest.
//!
//! Unknown keys are rejected and every range is checked at load time;
//! errors carry the JSON path of the offending value, e.g.
//! `scenarios[1].noise_sigma`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lab::{preset, Scenario, SpectrumRule, SweepResult, SweepSpec, ThetaRule, TrialSettings, AGGREGATES_FILE, PRESET_NAMES, ROWS_FILE};
use crate::risk::BoundConstants;
use crate::synth::PropensityModel;

pub const DEFAULT_DELTA: f64 = 0.05;
pub const DEFAULT_MC_SAMPLES: usize = 100_000;
pub const MIN_MC_SAMPLES: usize = 100;

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

fn default_mc_samples() -> usize {
    DEFAULT_MC_SAMPLES
}

/// A scenario given as a preset name, explicit fields, or a preset with
/// field overrides.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<SpectrumRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub propensity: Option<PropensityModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<ThetaRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_sigma: Option<f64>,
}

impl ScenarioEntry {
    pub fn preset(name: &str) -> Self {
        ScenarioEntry {
            preset: Some(name.to_string()),
            ..Default::default()
        }
    }

    fn resolve(&self, path: &str) -> Result<Scenario> {
        let base = match &self.preset {
            Some(p) => Some(preset(p).ok_or_else(|| {
                Error::config(
                    format!("{path}.preset"),
                    format!("unknown preset `{p}` (expected one of {})", PRESET_NAMES.join(", ")),
                )
            })?),
            None => None,
        };
        let missing = |field: &str| Error::config(format!("{path}.{field}"), "required when no preset is given");
        let name = match (&self.name, &base) {
            (Some(n), _) => n.clone(),
            (None, Some(b)) => b.name.clone(),
            (None, None) => return Err(missing("name")),
        };
        let spectrum = match (&self.spectrum, &base) {
            (Some(s), _) => s.clone(),
            (None, Some(b)) => b.spectrum.clone(),
            (None, None) => return Err(missing("spectrum")),
        };
        let propensity = match (&self.propensity, &base) {
            (Some(m), _) => m.clone(),
            (None, Some(b)) => b.propensity.clone(),
            (None, None) => return Err(missing("propensity")),
        };
        let theta = match (&self.theta, &base) {
            (Some(t), _) => t.clone(),
            (None, Some(b)) => b.theta.clone(),
            (None, None) => return Err(missing("theta")),
        };
        let noise_sigma = match (self.noise_sigma, &base) {
            (Some(s), _) => s,
            (None, Some(b)) => b.noise_sigma,
            (None, None) => return Err(missing("noise_sigma")),
        };
        Ok(Scenario {
            name,
            spectrum,
            propensity,
            theta,
            noise_sigma,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenarios: Vec<ScenarioEntry>,
    pub n_grid: Vec<usize>,
    pub reps: u64,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub constants: BoundConstants,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
}

impl RunConfig {
    /// Parse and validate.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let path = if path == "." { "<root>".to_string() } else { path };
            Error::config(path, e.inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), format!("cannot read config: {e}")))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn settings(&self) -> TrialSettings {
        TrialSettings {
            delta: self.delta,
            constants: self.constants,
            mc_samples: self.mc_samples,
        }
    }

    pub fn resolve_scenarios(&self) -> Result<Vec<Scenario>> {
        self.scenarios
            .iter()
            .enumerate()
            .map(|(i, e)| e.resolve(&format!("scenarios[{i}]")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenarios.is_empty() {
            return Err(Error::config("scenarios", "at least one scenario is required"));
        }
        if self.n_grid.is_empty() {
            return Err(Error::config("n_grid", "must not be empty"));
        }
        for (i, w) in self.n_grid.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(Error::config(format!("n_grid[{}]", i + 1), "grid must be strictly increasing"));
            }
        }
        if self.n_grid[0] == 0 {
            return Err(Error::config("n_grid[0]", "sample sizes must be positive"));
        }
        if self.reps == 0 {
            return Err(Error::config("reps", "must be at least 1"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("delta", format!("must lie in (0, 1), got {}", self.delta)));
        }
        for (name, v) in [("constants.b", self.constants.b), ("constants.c", self.constants.c)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be positive, got {v}")));
            }
        }
        if self.mc_samples < MIN_MC_SAMPLES {
            return Err(Error::config("mc_samples", format!("must be at least {MIN_MC_SAMPLES}, got {}", self.mc_samples)));
        }
        let scenarios = self.resolve_scenarios()?;
        for (i, sc) in scenarios.iter().enumerate() {
            let path = format!("scenarios[{i}]");
            if scenarios[..i].iter().any(|o| o.name == sc.name) {
                return Err(Error::config(format!("{path}.name"), format!("duplicate scenario name `{}`", sc.name)));
            }
            if !(sc.noise_sigma > 0.0 && sc.noise_sigma.is_finite()) {
                return Err(Error::config(format!("{path}.noise_sigma"), format!("must be positive, got {}", sc.noise_sigma)));
            }
            sc.propensity
                .validate()
                .map_err(|e| Error::config(format!("{path}.propensity"), e.to_string()))?;
            for &n in &self.n_grid {
                sc.problem_at(n)
                    .map_err(|e| Error::config(path.clone(), format!("invalid at n = {n}: {e}")))?;
            }
        }
        Ok(())
    }

    /// Same configuration with every scenario entry spelled out in full.
    pub fn effective(&self) -> Result<RunConfig> {
        let scenarios = self.resolve_scenarios()?;
        let mut out = self.clone();
        out.scenarios = self
            .scenarios
            .iter()
            .zip(scenarios)
            .map(|(e, sc)| ScenarioEntry {
                preset: e.preset.clone(),
                name: Some(sc.name),
                spectrum: Some(sc.spectrum),
                propensity: Some(sc.propensity),
                theta: Some(sc.theta),
                noise_sigma: Some(sc.noise_sigma),
            })
            .collect();
        Ok(out)
    }

    pub fn sweep_spec(&self) -> Result<SweepSpec> {
        Ok(SweepSpec {
            scenarios: self.resolve_scenarios()?,
            n_grid: self.n_grid.clone(),
            reps: self.reps,
            master_seed: self.master_seed,
            settings: self.settings(),
        })
    }
}

/// Resolved dimension of one scenario at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub n: usize,
    pub p: usize,
}

/// Record written next to sweep outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub code_version: String,
    pub command: String,
    /// Effective configuration; reloading it reproduces the run.
    pub config: RunConfig,
    pub scenario_grid: BTreeMap<String, Vec<GridPoint>>,
    pub presets_note: String,
    pub files: BTreeMap<String, String>,
    pub rows: usize,
    pub failed_rows: usize,
}

pub const PRESETS_NOTE: &str = "Scenario presets (rct, bias_odd, bias_even) are implementation choices: \
spectrum exp(-k/5) + 1/(n ln n) with p = n^2, theta1 = e_1, theta0 = e_2, noise sigma 0.5, overlap 0.05.";

impl Manifest {
    pub fn new(command: &str, effective: &RunConfig, result: &SweepResult, files: &[(&str, &str)]) -> Result<Self> {
        let mut scenario_grid = BTreeMap::new();
        for sc in effective.resolve_scenarios()? {
            let points = effective
                .n_grid
                .iter()
                .map(|&n| GridPoint {
                    n,
                    p: sc.spectrum.dim_at(n),
                })
                .collect();
            scenario_grid.insert(sc.name.clone(), points);
        }
        Ok(Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            code_version: crate::CODE_VERSION.to_string(),
            command: command.to_string(),
            config: effective.clone(),
            scenario_grid,
            presets_note: PRESETS_NOTE.to_string(),
            files: files.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            rows: result.rows.len(),
            failed_rows: result.failed_rows(),
        })
    }

    pub fn default_files() -> [(&'static str, &'static str); 2] {
        [("rows", ROWS_FILE), ("aggregates", AGGREGATES_FILE)]
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
