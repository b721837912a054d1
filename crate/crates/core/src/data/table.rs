use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PviError, Result};
use crate::models::Dataset;

/// How target strings were mapped to numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TargetEncoding {
    /// Numeric targets used as read.
    Numeric,
    /// Level `i` of the sorted distinct strings maps to `i`.
    Levels(Vec<String>),
}

/// Per-column affine standardization fitted on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Column means and sample standard deviations. Constant columns get
    /// unit scale.
    pub fn fit(data: &Dataset) -> Self {
        let d = data.n_features;
        let n = data.len();
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, x) in mean.iter_mut().zip(data.row(i)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
        let mut ss = vec![0.0; d];
        for i in 0..n {
            for ((s, x), m) in ss.iter_mut().zip(data.row(i)).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        let scale = ss
            .iter()
            .map(|s| {
                let sd = (s / (n.max(2) - 1) as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, data: &Dataset) -> Dataset {
        let mut out = data.clone();
        let d = data.n_features;
        for (j, x) in out.inputs.iter_mut().enumerate() {
            let c = j % d;
            *x = (*x - self.mean[c]) / self.scale[c];
        }
        out
    }
}

enum Column {
    Numeric(Vec<f64>),
    Categorical { values: Vec<String>, levels: Vec<String> },
}

/// Parse CSV text with a header row. Columns whose first non-empty entry
/// is numeric must be numeric throughout; others are one-hot encoded with
/// one column per sorted level.
pub fn read_csv<R: Read>(reader: R, target_column: &str) -> Result<(Dataset, TargetEncoding)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| parse_err(1, "<header>", &e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let target_idx = header
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| PviError::MissingTarget(target_column.to_string()))?;
    let mut raw: Vec<Vec<String>> = vec![Vec::new(); header.len()];
    for (r, rec) in rdr.records().enumerate() {
        // Row numbers count the header as row 1.
        let row = r + 2;
        let rec = rec.map_err(|e| parse_err(row, "<record>", &e.to_string()))?;
        if rec.len() != header.len() {
            return Err(parse_err(
                row,
                "<record>",
                &format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        for (c, v) in rec.iter().enumerate() {
            raw[c].push(v.to_string());
        }
    }
    let mut columns = Vec::with_capacity(header.len());
    for (c, vals) in raw.iter().enumerate() {
        columns.push(classify(&header[c], vals)?);
    }
    let (targets, encoding) = match &columns[target_idx] {
        Column::Numeric(v) => (v.clone(), TargetEncoding::Numeric),
        Column::Categorical { values, levels } => (
            values
                .iter()
                .map(|v| levels.iter().position(|l| l == v).expect("level exists") as f64)
                .collect(),
            TargetEncoding::Levels(levels.clone()),
        ),
    };
    let n = targets.len();
    let mut names = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for (c, col) in columns.iter().enumerate() {
        if c == target_idx {
            continue;
        }
        match col {
            Column::Numeric(v) => {
                names.push(header[c].clone());
                cols.push(v.clone());
            }
            Column::Categorical { values, levels } => {
                for l in levels {
                    names.push(format!("{}={}", header[c], l));
                    cols.push(values.iter().map(|v| if v == l { 1.0 } else { 0.0 }).collect());
                }
            }
        }
    }
    let d = cols.len();
    let mut inputs = Vec::with_capacity(n * d);
    for i in 0..n {
        inputs.extend(cols.iter().map(|c| c[i]));
    }
    let mut data = Dataset::from_flat(inputs, d, targets)?;
    data.feature_names = names;
    Ok((data, encoding))
}

fn classify(name: &str, vals: &[String]) -> Result<Column> {
    let numeric = vals
        .iter()
        .find(|v| !v.is_empty())
        .is_none_or(|v| v.parse::<f64>().is_ok());
    if numeric {
        let mut out = Vec::with_capacity(vals.len());
        for (r, v) in vals.iter().enumerate() {
            match v.parse::<f64>() {
                Ok(x) if x.is_finite() => out.push(x),
                _ => {
                    return Err(parse_err(r + 2, name, &format!("expected a number, found '{v}'")));
                }
            }
        }
        Ok(Column::Numeric(out))
    } else {
        let mut levels: Vec<String> = vals.to_vec();
        levels.sort();
        levels.dedup();
        Ok(Column::Categorical {
            values: vals.to_vec(),
            levels,
        })
    }
}

fn parse_err(row: usize, column: &str, message: &str) -> PviError {
    PviError::Parse {
        row,
        column: column.to_string(),
        message: message.to_string(),
    }
}

/// Load a CSV file without standardizing.
pub fn load_csv_raw(path: &Path, target_column: &str) -> Result<(Dataset, TargetEncoding)> {
    let f = File::open(path).map_err(|e| PviError::Io(format!("{}: {e}", path.display())))?;
    read_csv(f, target_column)
}

/// Load a CSV file and standardize every feature column to zero mean and
/// unit variance.
pub fn load_csv(path: &Path, target_column: &str) -> Result<Dataset> {
    let (data, _) = load_csv_raw(path, target_column)?;
    Ok(Standardizer::fit(&data).apply(&data))
}
