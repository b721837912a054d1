//! Dataset ingestion, synthetic generators and client partitioning.

mod idx;
mod split;
mod synth;
mod table;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PviError, Result};
use crate::models::Dataset;

pub use idx::{load_mnist, read_idx_images, read_idx_labels, IdxImages, MNIST_TRAIN_IMAGES, MNIST_TRAIN_LABELS};
pub use split::{split_beta_kappa, split_homogeneous, split_kmeans, split_label_shard, BetaKappaPlan};
pub use synth::{synth_blobs, synth_logreg, SynthLogreg};
pub use table::{load_csv, load_csv_raw, read_csv, Standardizer, TargetEncoding};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitScheme {
    #[default]
    Homogeneous,
    BetaKappa,
    Kmeans,
    LabelShard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub scheme: SplitScheme,
    /// Number of clients.
    #[serde(rename = "clients")]
    pub m: usize,
    /// Size imbalance in `[0, 1)`.
    pub beta: f64,
    /// Label imbalance of the small clients.
    pub kappa: f64,
    pub labels_per_client: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            scheme: SplitScheme::Homogeneous,
            m: 10,
            beta: 0.0,
            kappa: 0.0,
            labels_per_client: 2,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn homogeneous(m: usize, seed: u64) -> Self {
        Self {
            m,
            seed,
            ..Self::default()
        }
    }

    pub fn beta_kappa(m: usize, beta: f64, kappa: f64, seed: u64) -> Self {
        Self {
            scheme: SplitScheme::BetaKappa,
            m,
            beta,
            kappa,
            seed,
            ..Self::default()
        }
    }

    pub fn kmeans(m: usize, seed: u64) -> Self {
        Self {
            scheme: SplitScheme::Kmeans,
            m,
            seed,
            ..Self::default()
        }
    }

    pub fn label_shard(m: usize, labels_per_client: usize, seed: u64) -> Self {
        Self {
            scheme: SplitScheme::LabelShard,
            m,
            labels_per_client,
            seed,
            ..Self::default()
        }
    }
}

/// Client assignment of every datapoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub assignments: Vec<usize>,
    #[serde(skip)]
    pub per_client: Vec<Dataset>,
    pub spec: SplitSpec,
}

impl Partition {
    /// Build per-client datasets, keeping each client's rows in original
    /// order. Every client must receive at least one point.
    pub fn from_assignments(data: &Dataset, assignments: Vec<usize>, spec: SplitSpec) -> Result<Self> {
        if assignments.len() != data.len() {
            return Err(PviError::DimensionMismatch {
                expected: data.len(),
                found: assignments.len(),
            });
        }
        let mut idx = vec![Vec::new(); spec.m];
        for (i, &k) in assignments.iter().enumerate() {
            if k >= spec.m {
                return Err(PviError::InfeasibleSplit(format!("assignment {k} out of range")));
            }
            idx[k].push(i);
        }
        if let Some(k) = idx.iter().position(Vec::is_empty) {
            return Err(PviError::InfeasibleSplit(format!("client {k} received no data")));
        }
        Ok(Self {
            per_client: idx.iter().map(|ix| data.subset(ix)).collect(),
            assignments,
            spec,
        })
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.per_client.iter().map(Dataset::len).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("partition serializes")
    }

    /// Parse a partition file and rebuild the client datasets from `data`.
    pub fn from_json(text: &str, data: &Dataset) -> Result<Self> {
        let p: Partition = serde_json::from_str(text).map_err(|e| PviError::Config(format!("partition file: {e}")))?;
        Self::from_assignments(data, p.assignments, p.spec)
    }
}

/// Partition `data` according to `spec`.
pub fn split(data: &Dataset, spec: &SplitSpec) -> Result<Partition> {
    if spec.m == 0 {
        return Err(PviError::InfeasibleSplit("at least one client is required".into()));
    }
    match spec.scheme {
        SplitScheme::Homogeneous => split_homogeneous(data, spec.m, spec.seed),
        SplitScheme::BetaKappa => split_beta_kappa(data, spec.m, spec.beta, spec.kappa, spec.seed),
        SplitScheme::Kmeans => split_kmeans(data, spec.m, spec.seed),
        SplitScheme::LabelShard => split_label_shard(data, spec.m, spec.labels_per_client, spec.seed),
    }
}

/// Seeded train/test split; `test_fraction` of the rows (rounded) go to the
/// test set.
pub fn train_test_split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(PviError::Config(format!(
            "test fraction must lie in [0, 1), got {test_fraction}"
        )));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (data.len() as f64 * test_fraction).round() as usize;
    let (test, train) = idx.split_at(n_test);
    let mut train = train.to_vec();
    let mut test = test.to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((data.subset(&train), data.subset(&test)))
}

/// Indices of the `k` largest-magnitude weights, ties broken by index.
pub fn top_k_features(weights: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| weights[b].abs().total_cmp(&weights[a].abs()).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Keep only the given feature columns.
pub fn select_features(data: &Dataset, columns: &[usize]) -> Result<Dataset> {
    if let Some(&c) = columns.iter().find(|&&c| c >= data.n_features) {
        return Err(PviError::DimensionMismatch {
            expected: data.n_features,
            found: c,
        });
    }
    let mut inputs = Vec::with_capacity(data.len() * columns.len());
    for i in 0..data.len() {
        let r = data.row(i);
        inputs.extend(columns.iter().map(|&c| r[c]));
    }
    let mut out = Dataset::from_flat(inputs, columns.len(), data.targets.clone())?;
    out.feature_names = columns.iter().map(|&c| data.feature_names[c].clone()).collect();
    Ok(out)
}

/// Distinct target values in ascending order.
pub(crate) fn label_values(data: &Dataset) -> Vec<f64> {
    let mut v = data.targets.clone();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}
