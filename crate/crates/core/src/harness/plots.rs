use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{PviError, Result};
use crate::server::{MetricsTrace, TraceRecord};

pub const TIDY_FILE: &str = "tidy.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XAxis {
    #[default]
    Comms,
    Time,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotMetric {
    #[default]
    Nll,
    Err,
    FreeEnergy,
    Pruned,
}

impl XAxis {
    pub fn name(self) -> &'static str {
        match self {
            XAxis::Comms => "comms",
            XAxis::Time => "time",
        }
    }

    fn value(self, r: &TraceRecord) -> f64 {
        match self {
            XAxis::Comms => r.comms as f64,
            XAxis::Time => r.logical_time,
        }
    }
}

impl PlotMetric {
    pub fn name(self) -> &'static str {
        match self {
            PlotMetric::Nll => "test_nll",
            PlotMetric::Err => "test_err",
            PlotMetric::FreeEnergy => "free_energy",
            PlotMetric::Pruned => "pruned_count",
        }
    }

    fn value(self, r: &TraceRecord) -> Option<f64> {
        match self {
            PlotMetric::Nll => r.test_nll,
            PlotMetric::Err => r.test_err,
            PlotMetric::FreeEnergy => r.free_energy,
            PlotMetric::Pruned => r.pruned_count.map(|c| c as f64),
        }
    }
}

fn parse_enum<T: for<'de> Deserialize<'de>>(s: &str, what: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| PviError::Config(format!("unknown {what} '{s}'")))
}

impl FromStr for XAxis {
    type Err = PviError;
    fn from_str(s: &str) -> Result<Self> {
        parse_enum(s, "x axis")
    }
}

impl FromStr for PlotMetric {
    type Err = PviError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test_nll" => Ok(PlotMetric::Nll),
            "test_err" => Ok(PlotMetric::Err),
            "pruned_count" => Ok(PlotMetric::Pruned),
            _ => parse_enum(s, "metric"),
        }
    }
}

/// A trace with its method and seed labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTrace {
    pub method: String,
    pub seed: u64,
    pub trace: MetricsTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlotAxes {
    pub x: XAxis,
    pub metric: PlotMetric,
    /// Recorded in the CSV metadata for figures drawn on a log scale.
    pub log_scale: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotFiles {
    pub tidy: PathBuf,
    pub summary: PathBuf,
}

/// One summary row: statistics over seeds of the last value each seed
/// recorded in an x bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub bucket: i64,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

fn metadata(axes: &PlotAxes) -> String {
    format!(
        "# x_axis={}\n# metric={}\n# log_scale={}\n",
        axes.x.name(),
        axes.metric.name(),
        axes.log_scale
    )
}

fn check_schema(traces: &[LabeledTrace], metric: PlotMetric) -> Result<()> {
    for t in traces {
        if !t.trace.records.iter().any(|r| metric.value(r).is_some()) {
            return Err(PviError::SchemaMismatch(format!(
                "trace of method '{}' seed {} has no '{}' values",
                t.method,
                t.seed,
                metric.name()
            )));
        }
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Tidy CSV text: one row per record per trace.
pub fn tidy_csv(traces: &[LabeledTrace], axes: &PlotAxes) -> Result<String> {
    check_schema(traces, axes.metric)?;
    let mut s = metadata(axes);
    s.push_str("method,seed,i,x,value\n");
    for t in traces {
        for r in &t.trace.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                t.method,
                t.seed,
                r.i,
                axes.x.value(r),
                fmt_opt(axes.metric.value(r))
            );
        }
    }
    Ok(s)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.iter().all(|x| *x == v[0]) {
        return (v[0], 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and population standard deviation over seeds per method per x
/// bucket (integer part of the x value).
pub fn summarize(traces: &[LabeledTrace], axes: &PlotAxes) -> Result<Vec<SummaryRow>> {
    check_schema(traces, axes.metric)?;
    let mut methods: Vec<&str> = Vec::new();
    let mut cells: BTreeMap<(usize, i64), BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for t in traces {
        let mi = match methods.iter().position(|m| *m == t.method) {
            Some(i) => i,
            None => {
                methods.push(&t.method);
                methods.len() - 1
            }
        };
        let mut last: BTreeMap<i64, f64> = BTreeMap::new();
        for r in &t.trace.records {
            if let Some(v) = axes.metric.value(r) {
                last.insert(axes.x.value(r).floor() as i64, v);
            }
        }
        for (b, v) in last {
            cells.entry((mi, b)).or_default().entry(t.seed).or_default().push(v);
        }
    }
    Ok(cells
        .into_iter()
        .map(|((mi, bucket), seeds)| {
            let vals: Vec<f64> = seeds.into_values().flatten().collect();
            let (mean, std) = mean_std(&vals);
            SummaryRow {
                method: methods[mi].to_string(),
                bucket,
                mean,
                std,
                n: vals.len(),
            }
        })
        .collect())
}

pub fn summary_csv(traces: &[LabeledTrace], axes: &PlotAxes) -> Result<String> {
    let rows = summarize(traces, axes)?;
    let mut s = metadata(axes);
    s.push_str("method,bucket,mean,std,n\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.method, r.bucket, r.mean, r.std, r.n);
    }
    Ok(s)
}

/// Write `tidy.csv` and `summary.csv` into `out_dir`.
pub fn emit_plot_data(traces: &[LabeledTrace], axes: &PlotAxes, out_dir: &Path) -> Result<PlotFiles> {
    let tidy = tidy_csv(traces, axes)?;
    let summary = summary_csv(traces, axes)?;
    fs::create_dir_all(out_dir)?;
    let files = PlotFiles {
        tidy: out_dir.join(TIDY_FILE),
        summary: out_dir.join(SUMMARY_FILE),
    };
    fs::write(&files.tidy, tidy)?;
    fs::write(&files.summary, summary)?;
    Ok(files)
}
