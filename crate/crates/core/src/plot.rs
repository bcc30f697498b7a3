//! Long-format plotting table derived from sweep aggregates.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{csv_writer, finish_csv};
use crate::lab::{Aggregate, AGGREGATES_FILE};

pub const PLOT_HEADER: [&str; 6] = ["scenario", "n", "metric", "median", "q10", "q90"];
pub const AGGREGATES_JSON_FILE: &str = "aggregates.json";

/// One `(scenario, n, metric)` point. Numbers are kept as the text found in
/// the aggregates so the transformation is exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub scenario: String,
    pub n: usize,
    pub metric: String,
    pub median: String,
    pub q10: String,
    pub q90: String,
}

#[derive(Deserialize)]
struct AggregateRecord {
    scenario: String,
    n: usize,
    metric: String,
    median: String,
    q10: String,
    q90: String,
}

pub fn plot_rows_from_csv(text: &str) -> Result<Vec<PlotRow>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in rd.deserialize::<AggregateRecord>() {
        let r = rec?;
        out.push(PlotRow {
            scenario: r.scenario,
            n: r.n,
            metric: r.metric,
            median: r.median,
            q10: r.q10,
            q90: r.q90,
        });
    }
    Ok(out)
}

pub fn plot_rows_from_aggregates(aggs: &[Aggregate]) -> Vec<PlotRow> {
    let f = |v: Option<f64>| v.map(crate::io::fmt_float).unwrap_or_default();
    aggs.iter()
        .map(|a| PlotRow {
            scenario: a.scenario.clone(),
            n: a.n,
            metric: a.metric.clone(),
            median: f(a.median),
            q10: f(a.q10),
            q90: f(a.q90),
        })
        .collect()
}

/// Read the aggregates of a sweep output directory, CSV preferred.
pub fn read_plot_rows(dir: &Path) -> Result<Vec<PlotRow>> {
    let csv_path = dir.join(AGGREGATES_FILE);
    let json_path = dir.join(AGGREGATES_JSON_FILE);
    if csv_path.is_file() {
        plot_rows_from_csv(&std::fs::read_to_string(csv_path)?)
    } else if json_path.is_file() {
        let aggs: Vec<Aggregate> = serde_json::from_str(&std::fs::read_to_string(json_path)?)?;
        Ok(plot_rows_from_aggregates(&aggs))
    } else {
        Err(Error::MissingInput(format!(
            "no {AGGREGATES_FILE} or {AGGREGATES_JSON_FILE} in {}",
            dir.display()
        )))
    }
}

pub fn plot_csv(rows: &[PlotRow]) -> Result<String> {
    let mut wr = csv_writer(Vec::new());
    wr.write_record(PLOT_HEADER)?;
    for r in rows {
        wr.write_record([&r.scenario, &r.n.to_string(), &r.metric, &r.median, &r.q10, &r.q90])?;
    }
    finish_csv(wr)
}
