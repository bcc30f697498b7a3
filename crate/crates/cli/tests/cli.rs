use std::path::Path;
use std::process::{Command, Output};

use benign_cate::config::{Manifest, RunConfig};
use sha2::{Digest, Sha256};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_benign-cate"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, body).unwrap();
    path.display().to_string()
}

const TINY: &str = r#"{"scenarios":[{"preset":"rct"}],"n_grid":[20,40],"reps":2,"master_seed":7,"mc_samples":2000}"#;

fn sha(path: &Path) -> String {
    format!("{:x}", Sha256::digest(std::fs::read(path).unwrap()))
}

#[test]
fn spectrum_identity_bounds_are_one() {
    let delta = (-1.0f64).exp().to_string();
    let o = run(&["spectrum", "--family", "identity", "--dim", "100", "--n", "100", "--delta", &delta, "--sigma", "1", "--b", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let get = |name: &str| row[header.iter().position(|h| *h == name).unwrap()].parse::<f64>().unwrap();
    assert!((get("bias_term") - 1.0).abs() < 1e-12);
    assert!((get("variance_term") - 1.0).abs() < 1e-12);
    assert_eq!(get("k_star"), 0.0);
    assert!(text.ends_with('\n') && !text.contains('\r'));
}

#[test]
fn spectrum_missing_flag_names_it() {
    let o = run(&["spectrum", "--family", "benign-b", "--dim", "50", "--n", "10"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--tau"), "{}", stderr(&o));
    let o = run(&["spectrum", "--dim", "50"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--family"));
}

#[test]
fn spectrum_json_matches_csv() {
    let args = ["spectrum", "--family", "benign-b", "--tau", "5", "--dim-exponent", "2", "--eps-scale", "1", "--n", "20,40,80"];
    let csv = stdout(&run(&args));
    let json = stdout(&run(&[&args[..], &["--format", "json"]].concat()));
    let rows: Vec<serde_json::Value> = serde_json::from_str(&json).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(rows.len(), 3);
    for (line, obj) in lines.zip(&rows) {
        for (h, cell) in header.iter().zip(line.split(',')) {
            let v = &obj[*h];
            if cell.is_empty() {
                assert!(v.is_null(), "{h}");
            } else {
                assert_eq!(cell.parse::<f64>().unwrap(), v.as_f64().unwrap(), "{h}");
            }
        }
    }
}

#[test]
fn spectrum_output_dir_keeps_stdout_clean() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let o = run(&["spectrum", "--family", "identity", "--dim", "30", "--n", "10", "--output-dir", &out]);
    assert!(o.status.success());
    assert!(o.stdout.is_empty());
    assert!(dir.path().join("spectrum.csv").is_file());
}

#[test]
fn sweep_writes_rows_aggregates_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    let o = run(&["sweep", "--config", &cfg, "--output-dir", out.to_str().unwrap(), "--workers", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
    let rows = std::fs::read_to_string(out.join("rows.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 4);

    let manifest = Manifest::from_json(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let mut expected = RunConfig::from_json(TINY).unwrap().effective().unwrap();
    expected.output_dir = Some(out.display().to_string());
    assert_eq!(manifest.config.to_json().unwrap(), expected.to_json().unwrap());
    assert_eq!(manifest.rows, 4);
    assert_eq!(manifest.failed_rows, 0);

    // Reloading the stored configuration reproduces the same rows.
    let cfg2 = write_config(&out, &manifest.config.to_json().unwrap());
    let out2 = dir.path().join("again");
    let o = run(&["sweep", "--config", &cfg2, "--output-dir", out2.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(sha(&out.join("rows.csv")), sha(&out2.join("rows.csv")));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let mut digests = Vec::new();
    for (name, workers) in [("a", "1"), ("b", "3")] {
        let out = dir.path().join(name);
        let o = run(&["sweep", "--config", &cfg, "--output-dir", out.to_str().unwrap(), "--workers", workers]);
        assert!(o.status.success());
        digests.push((sha(&out.join("rows.csv")), sha(&out.join("aggregates.csv"))));
    }
    assert_eq!(digests[0], digests[1]);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let a = stdout(&run(&["trial", "--config", &cfg]));
    let b = stdout(&run(&["trial", "--config", &cfg, "--seed", "8"]));
    let c = stdout(&run(&["trial", "--config", &cfg, "--seed", "7"]));
    assert_ne!(a, b);
    assert_eq!(a, c);
}

#[test]
fn trial_restricts_to_one_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = run(&["trial", "--config", &cfg, "--n", "40", "--rep", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().nth(1).unwrap().starts_with("rct,0,40,1,1,"));
    // Same cell as the sweep produces.
    let out = dir.path().join("sweep");
    assert!(run(&["sweep", "--config", &cfg, "--output-dir", out.to_str().unwrap()]).status.success());
    let sweep_rows = std::fs::read_to_string(out.join("rows.csv")).unwrap();
    assert!(sweep_rows.contains(text.lines().nth(1).unwrap()));
    let o = run(&["trial", "--config", &cfg, "--n", "30"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn strict_mode_flags_empty_groups() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"scenarios":[{"preset":"rct","name":"lopsided","propensity":{"kind":"constant","p1":0.99,"phi":0.05}}],"n_grid":[5],"reps":1,"mc_samples":1000}"#,
    );
    let seed = (0..50u64)
        .map(|s| s.to_string())
        .find(|s| run(&["trial", "--config", &cfg, "--strict", "--seed", s]).status.code() == Some(3))
        .expect("some seed leaves the control group empty");
    let o = run(&["trial", "--config", &cfg, "--seed", &seed]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("empty_group"));
    assert!(stdout(&o).contains(",failed,"));
}

#[test]
fn config_errors_exit_2_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"scenarios":[{"preset":"rct"}],"n_grid":[20],"reps":1,"delta":2}"#);
    let o = run(&["sweep", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`delta`"), "{}", stderr(&o));
    let o = run(&["sweep"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--config"));
}

#[test]
fn verify_passes_and_sabotage_fails() {
    let o = run(&["verify"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let table = stdout(&o);
    assert!(table.contains("decomposition_identity") && table.contains("tolerance"));
    let o = run(&["verify", "--sabotage", "--format", "csv"]);
    assert_eq!(o.status.code(), Some(1));
    let csv = stdout(&o);
    let identity = csv.lines().find(|l| l.starts_with("decomposition_identity,")).unwrap();
    assert!(identity.contains(",false,"));
}

#[test]
fn verify_is_stable_across_seeds() {
    for seed in 1..=10 {
        let o = run(&["verify", "--seed", &seed.to_string(), "--format", "json"]);
        assert_eq!(o.status.code(), Some(0), "seed {seed}: {}", stdout(&o));
    }
}

#[test]
fn plotdata_passes_medians_through() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    assert!(run(&["sweep", "--config", &cfg, "--output-dir", out.to_str().unwrap()]).status.success());
    let o = run(&["plotdata", out.to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().next().unwrap(), "scenario,n,metric,median,q10,q90");
    let scenarios: std::collections::BTreeSet<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(scenarios.len(), 1);

    let aggs = std::fs::read_to_string(out.join("aggregates.csv")).unwrap();
    let header: Vec<&str> = aggs.lines().next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    for (a, p) in aggs.lines().skip(1).zip(text.lines().skip(1)) {
        let a: Vec<&str> = a.split(',').collect();
        let p: Vec<&str> = p.split(',').collect();
        assert_eq!(p, [a[col("scenario")], a[col("n")], a[col("metric")], a[col("median")], a[col("q10")], a[col("q90")]]);
    }
}

#[test]
fn json_sweep_feeds_plotdata() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let csv_out = dir.path().join("csv");
    let json_out = dir.path().join("json");
    assert!(run(&["sweep", "--config", &cfg, "--output-dir", csv_out.to_str().unwrap()]).status.success());
    assert!(run(&["sweep", "--config", &cfg, "--output-dir", json_out.to_str().unwrap(), "--format", "json"]).status.success());
    assert!(json_out.join("rows.json").is_file());
    let a = stdout(&run(&["plotdata", csv_out.to_str().unwrap()]));
    let b = stdout(&run(&["plotdata", json_out.to_str().unwrap()]));
    assert_eq!(a, b);
}

#[test]
fn plotdata_without_inputs_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["plotdata", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
