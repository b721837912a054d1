//! Per-commit metric records.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{PviError, Result};
use crate::expfam::GaussianMeanField;

/// One line of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub i: usize,
    pub logical_time: f64,
    pub client: Option<usize>,
    pub comms: usize,
    pub train_nll: Option<f64>,
    pub test_nll: Option<f64>,
    pub test_err: Option<f64>,
    pub free_energy: Option<f64>,
    pub pruned_count: Option<usize>,
    pub rho_effective: Option<f64>,
    pub staleness: Option<usize>,
}

/// Metric values attached to a record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    pub train_nll: Option<f64>,
    pub test_nll: Option<f64>,
    pub test_err: Option<f64>,
    pub free_energy: Option<f64>,
    pub pruned_count: Option<usize>,
}

/// Computes metrics for a posterior. `end_of_round` lets an evaluator
/// throttle itself to one evaluation per round; returning `None` leaves
/// the metric fields of that record empty.
pub trait Evaluator {
    fn evaluate(&mut self, q: &GaussianMeanField, end_of_round: bool) -> Result<Option<Metrics>>;
}

/// Evaluator that records no metrics.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoMetrics;

impl Evaluator for NoMetrics {
    fn evaluate(&mut self, _: &GaussianMeanField, _: bool) -> Result<Option<Metrics>> {
        Ok(None)
    }
}

impl<F> Evaluator for F
where
    F: FnMut(&GaussianMeanField, bool) -> Result<Option<Metrics>>,
{
    fn evaluate(&mut self, q: &GaussianMeanField, end_of_round: bool) -> Result<Option<Metrics>> {
        self(q, end_of_round)
    }
}

/// Ordered records of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTrace {
    pub records: Vec<TraceRecord>,
}

impl TraceRecord {
    pub fn new(i: usize, logical_time: f64, client: Option<usize>, comms: usize) -> Self {
        Self {
            i,
            logical_time,
            client,
            comms,
            train_nll: None,
            test_nll: None,
            test_err: None,
            free_energy: None,
            pruned_count: None,
            rho_effective: None,
            staleness: None,
        }
    }

    pub fn with_metrics(mut self, m: Option<Metrics>) -> Self {
        if let Some(m) = m {
            self.train_nll = m.train_nll;
            self.test_nll = m.test_nll;
            self.test_err = m.test_err;
            self.free_energy = m.free_energy;
            self.pruned_count = m.pruned_count;
        }
        self
    }
}

impl MetricsTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// Check that communications never decrease and metrics are finite.
    pub fn validate(&self) -> Result<()> {
        for w in self.records.windows(2) {
            if w[1].comms < w[0].comms {
                return Err(PviError::SchemaMismatch(format!(
                    "comms decreased from {} to {} at record {}",
                    w[0].comms, w[1].comms, w[1].i
                )));
            }
        }
        for r in &self.records {
            let vals = [r.train_nll, r.test_nll, r.test_err, r.free_energy, r.rho_effective];
            if vals.iter().flatten().any(|v| !v.is_finite()) || !r.logical_time.is_finite() {
                return Err(PviError::SchemaMismatch(format!("non-finite metric in record {}", r.i)));
            }
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| PviError::Io(e.to_string()))?;
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TraceRecord =
                serde_json::from_str(&line).map_err(|e| PviError::SchemaMismatch(format!("line {}: {e}", n + 1)))?;
            records.push(rec);
        }
        Ok(Self { records })
    }
}
