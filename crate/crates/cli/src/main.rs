//! `benign-cate` command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use benign_cate::config::{Manifest, RunConfig};
use benign_cate::io::{csv_writer, finish_csv, fmt_float, write_atomic};
use benign_cate::lab::{aggregate_rows, run_sweep, run_trial, SpectrumRule, SweepOptions, SweepResult, AGGREGATES_FILE, MANIFEST_FILE, ROWS_FILE};
use benign_cate::plot::{plot_csv, read_plot_rows, AGGREGATES_JSON_FILE};
use benign_cate::spectra::{bound_terms, EpsRule, SizeRule};
use benign_cate::verify::{self, VerifyOptions};
use benign_cate::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

const EXIT_VERIFY: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_STRICT: u8 = 3;

const ROWS_JSON_FILE: &str = "rows.json";

#[derive(Parser, Debug)]
#[command(name = "benign-cate", version, about = "Simulation lab for interpolating CATE learners")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: Global,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads for sweeps (results do not depend on it).
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    /// Exit with status 3 if any cell fails.
    #[arg(long, global = true)]
    strict: bool,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Write files here instead of printing to stdout.
    #[arg(long, global = true, value_name = "DIR")]
    output_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Effective ranks, k* and bound terms of a spectrum family per n.
    Spectrum(SpectrumArgs),
    /// One replication of every (scenario, n) cell of a configuration.
    Trial(TrialArgs),
    /// Full sweep over scenarios, grid and replications.
    Sweep,
    /// Run the built-in oracle suite.
    Verify {
        /// Reassemble the risk without the within-group cross terms.
        #[arg(long)]
        sabotage: bool,
    },
    /// Long-format plotting table from a sweep output directory.
    Plotdata {
        #[arg(value_name = "SWEEP_DIR")]
        input: PathBuf,
    },
}

#[derive(Args, Debug)]
struct SpectrumArgs {
    #[arg(long, value_enum)]
    family: Option<Family>,
    /// Fixed dimension p.
    #[arg(long, value_name = "P")]
    dim: Option<usize>,
    /// Dimension p = n^E instead of a fixed one.
    #[arg(long, value_name = "E", conflicts_with = "dim")]
    dim_exponent: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Constant floor added to every eigenvalue (benign-b).
    #[arg(long)]
    eps: Option<f64>,
    /// Floor scale / (n ln n) instead of a constant (benign-b).
    #[arg(long, conflicts_with = "eps")]
    eps_scale: Option<f64>,
    /// Comma-separated eigenvalues (fixed family).
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    /// Comma-separated sample sizes.
    #[arg(long, value_delimiter = ',', value_name = "N,...")]
    n: Option<Vec<usize>>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    b: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Family {
    Identity,
    BenignA,
    BenignB,
    Fixed,
}

#[derive(Args, Debug)]
struct TrialArgs {
    /// Replication index.
    #[arg(long, default_value_t = 0)]
    rep: u64,
    /// Restrict to one scenario by name.
    #[arg(long)]
    scenario: Option<String>,
    /// Restrict to one grid point.
    #[arg(long)]
    n: Option<usize>,
}

/// Spectrum job as read from `--config`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpectrumConfig {
    spectrum: SpectrumRule,
    n_grid: Vec<usize>,
    #[serde(default = "default_delta")]
    delta: f64,
    #[serde(default = "one")]
    sigma: f64,
    #[serde(default = "one")]
    b: f64,
}

fn default_delta() -> f64 {
    benign_cate::config::DEFAULT_DELTA
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Serialize)]
struct SpectrumRow {
    n: usize,
    p: usize,
    norm: f64,
    r0: f64,
    k_star: Option<usize>,
    r_kstar: Option<f64>,
    big_r_kstar: Option<f64>,
    bias_term: f64,
    variance_term: Option<f64>,
}

/// Failure carrying its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: EXIT_CONFIG,
            message: e.to_string(),
        }
    }
}

fn missing(flag: &str) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message: format!("missing required flag {flag}"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    let g = &cli.global;
    match &cli.command {
        Command::Spectrum(a) => cmd_spectrum(g, a),
        Command::Trial(a) => cmd_run(g, Some(a)),
        Command::Sweep => cmd_run(g, None),
        Command::Verify { sabotage } => cmd_verify(g, *sabotage),
        Command::Plotdata { input } => cmd_plotdata(g, input),
    }
}

/// Print to stdout, or write `name` under the output directory.
fn emit(g: &Global, name: &str, body: &str) -> Result<(), Failure> {
    match &g.output_dir {
        Some(dir) => {
            let path = dir.join(name);
            write_atomic(&path, body.as_bytes())?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{body}"),
    }
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Result<String, Failure> {
    let mut s = serde_json::to_string_pretty(v).map_err(Error::from)?;
    s.push('\n');
    Ok(s)
}

fn spectrum_job(g: &Global, a: &SpectrumArgs) -> Result<SpectrumConfig, Failure> {
    if let Some(path) = &g.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), format!("cannot read config: {e}")))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        return parse_spectrum_config(de);
    }
    let family = a.family.ok_or_else(|| missing("--family"))?;
    let dim = || -> Result<SizeRule, Failure> {
        match (a.dim, a.dim_exponent) {
            (Some(p), _) => Ok(SizeRule {
                coef: p as f64,
                exponent: 0.0,
            }),
            (None, Some(e)) => Ok(SizeRule { coef: 1.0, exponent: e }),
            (None, None) => Err(missing("--dim")),
        }
    };
    let spectrum = match family {
        Family::Identity => SpectrumRule::Identity { dim: dim()? },
        Family::BenignA => SpectrumRule::BenignA {
            alpha: a.alpha.ok_or_else(|| missing("--alpha"))?,
            beta: a.beta.ok_or_else(|| missing("--beta"))?,
            dim: dim()?,
        },
        Family::BenignB => SpectrumRule::BenignB {
            tau: a.tau.ok_or_else(|| missing("--tau"))?,
            dim: dim()?,
            eps: match (a.eps, a.eps_scale) {
                (Some(value), _) => EpsRule::Constant { value },
                (None, Some(scale)) => EpsRule::InverseNLogN { scale },
                (None, None) => return Err(missing("--eps")),
            },
        },
        Family::Fixed => SpectrumRule::Fixed {
            values: a.values.clone().ok_or_else(|| missing("--values"))?,
        },
    };
    Ok(SpectrumConfig {
        spectrum,
        n_grid: a.n.clone().ok_or_else(|| missing("--n"))?,
        delta: a.delta.unwrap_or_else(default_delta),
        sigma: a.sigma.unwrap_or(1.0),
        b: a.b.unwrap_or(1.0),
    })
}

fn parse_spectrum_config(de: &mut serde_json::Deserializer<serde_json::de::StrRead<'_>>) -> Result<SpectrumConfig, Failure> {
    serde_path_to_error::deserialize(de).map_err(|e| Failure::from(Error::config(e.path().to_string(), e.inner().to_string())))
}

fn cmd_spectrum(g: &Global, a: &SpectrumArgs) -> Result<(), Failure> {
    let job = spectrum_job(g, a)?;
    if job.n_grid.is_empty() {
        return Err(Error::config("n_grid", "must not be empty").into());
    }
    let mut rows = Vec::with_capacity(job.n_grid.len());
    for &n in &job.n_grid {
        let s = job.spectrum.at(n).map_err(|e| Error::config("spectrum", e.to_string()))?;
        let r = bound_terms(&s, n, job.delta, job.sigma, job.b).map_err(|e| Error::config("spectrum", e.to_string()))?;
        rows.push(SpectrumRow {
            n,
            p: s.dim(),
            norm: r.norm,
            r0: r.r0,
            k_star: r.k_star,
            r_kstar: r.r_kstar,
            big_r_kstar: r.big_r_kstar,
            bias_term: r.bias_term,
            variance_term: r.variance_term,
        });
    }
    match g.format.unwrap_or(Format::Csv) {
        Format::Json => emit(g, "spectrum.json", &to_json(&rows)?),
        Format::Csv => {
            let opt = |v: Option<f64>| v.map(fmt_float).unwrap_or_default();
            let mut wr = csv_writer(Vec::new());
            wr.write_record(["n", "p", "norm", "r0", "k_star", "r_kstar", "big_r_kstar", "bias_term", "variance_term"])
                .map_err(Error::from)?;
            for r in &rows {
                wr.write_record([
                    r.n.to_string(),
                    r.p.to_string(),
                    fmt_float(r.norm),
                    fmt_float(r.r0),
                    r.k_star.map(|k| k.to_string()).unwrap_or_default(),
                    opt(r.r_kstar),
                    opt(r.big_r_kstar),
                    fmt_float(r.bias_term),
                    opt(r.variance_term),
                ])
                .map_err(Error::from)?;
            }
            emit(g, "spectrum.csv", &finish_csv(wr)?)
        }
    }
}

fn load_config(g: &Global) -> Result<RunConfig, Failure> {
    let path = g.config.as_ref().ok_or_else(|| missing("--config"))?;
    let mut cfg = RunConfig::from_file(path)?;
    if let Some(seed) = g.seed {
        cfg.master_seed = seed;
    }
    if let Some(dir) = &g.output_dir {
        cfg.output_dir = Some(dir.display().to_string());
    }
    Ok(cfg)
}

fn run_trials(cfg: &RunConfig, a: &TrialArgs) -> Result<SweepResult, Failure> {
    let scenarios = cfg.resolve_scenarios()?;
    if let Some(name) = &a.scenario {
        if !scenarios.iter().any(|s| &s.name == name) {
            return Err(Error::config("--scenario", format!("no scenario named `{name}`")).into());
        }
    }
    if let Some(n) = a.n {
        if !cfg.n_grid.contains(&n) {
            return Err(Error::config("--n", format!("{n} is not on the configured grid")).into());
        }
    }
    let settings = cfg.settings();
    let mut rows = Vec::new();
    for (s, sc) in scenarios.iter().enumerate() {
        if a.scenario.as_ref().is_some_and(|name| name != &sc.name) {
            continue;
        }
        for (k, &n) in cfg.n_grid.iter().enumerate() {
            if a.n.is_some_and(|m| m != n) {
                continue;
            }
            rows.push(run_trial(sc, s, n, k, a.rep, cfg.master_seed, &settings)?);
        }
    }
    let aggregates = aggregate_rows(&rows);
    Ok(SweepResult { rows, aggregates })
}

fn cmd_run(g: &Global, trial: Option<&TrialArgs>) -> Result<(), Failure> {
    let cfg = load_config(g)?;
    let effective = cfg.effective()?;
    let result = match trial {
        Some(a) => run_trials(&cfg, a)?,
        None => {
            let options = SweepOptions {
                workers: g.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())),
                ..SweepOptions::default()
            };
            run_sweep(&cfg.sweep_spec()?, options)?
        }
    };
    let format = g.format.unwrap_or(Format::Csv);
    let out_dir = cfg.output_dir.as_ref().map(PathBuf::from);
    match &out_dir {
        Some(dir) => {
            let files: [(&str, &str); 2] = match format {
                Format::Csv => {
                    write_atomic(&dir.join(ROWS_FILE), result.rows_csv()?.as_bytes())?;
                    write_atomic(&dir.join(AGGREGATES_FILE), result.aggregates_csv()?.as_bytes())?;
                    [("rows", ROWS_FILE), ("aggregates", AGGREGATES_FILE)]
                }
                Format::Json => {
                    write_atomic(&dir.join(ROWS_JSON_FILE), to_json(&result.rows)?.as_bytes())?;
                    write_atomic(&dir.join(AGGREGATES_JSON_FILE), to_json(&result.aggregates)?.as_bytes())?;
                    [("rows", ROWS_JSON_FILE), ("aggregates", AGGREGATES_JSON_FILE)]
                }
            };
            let command = if trial.is_some() { "trial" } else { "sweep" };
            let manifest = Manifest::new(command, &effective, &result, &files)?;
            write_atomic(&dir.join(MANIFEST_FILE), manifest.to_json()?.as_bytes())?;
            eprintln!("wrote {} rows to {}", result.rows.len(), dir.display());
        }
        None => match format {
            Format::Csv => print!("{}", result.rows_csv()?),
            Format::Json => print!("{}", to_json(&result.rows)?),
        },
    }
    let failed = result.failed_rows();
    if failed > 0 {
        let first = result.rows.iter().find_map(|r| r.error.clone()).unwrap_or_default();
        let message = format!("{failed} of {} cells failed (first: {first})", result.rows.len());
        if g.strict {
            return Err(Failure {
                code: EXIT_STRICT,
                message,
            });
        }
        eprintln!("warning: {message}");
    }
    Ok(())
}

fn cmd_verify(g: &Global, sabotage: bool) -> Result<(), Failure> {
    let report = verify::run(VerifyOptions {
        seed: g.seed.unwrap_or(0),
        sabotage,
    })?;
    match g.format {
        Some(Format::Csv) => emit(g, "verify.csv", &report.to_csv()?)?,
        Some(Format::Json) => emit(g, "verify.json", &to_json(&report)?)?,
        None => match &g.output_dir {
            Some(_) => emit(g, "verify.csv", &report.to_csv()?)?,
            None => print!("{}", report.table()),
        },
    }
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(Failure {
            code: EXIT_VERIFY,
            message: format!("verification failed: {}", failed.join(", ")),
        })
    }
}

fn cmd_plotdata(g: &Global, input: &Path) -> Result<(), Failure> {
    let rows = read_plot_rows(input)?;
    match g.format.unwrap_or(Format::Csv) {
        Format::Csv => emit(g, "plotdata.csv", &plot_csv(&rows)?),
        Format::Json => emit(g, "plotdata.json", &to_json(&rows)?),
    }
}
