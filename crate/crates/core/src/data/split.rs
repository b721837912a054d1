use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{label_values, Partition, SplitScheme, SplitSpec};
use crate::error::{PviError, Result};
use crate::models::Dataset;
use crate::seeds::mix;

const KMEANS_MAX_ITER: usize = 100;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, stream))
}

/// Sizes of `parts` near-equal chunks of `n`, larger chunks first.
fn chunk_sizes(n: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|k| n / parts + usize::from(k < n % parts)).collect()
}

/// Seeded shuffle followed by near-equal contiguous chunks.
pub fn split_homogeneous(data: &Dataset, m: usize, seed: u64) -> Result<Partition> {
    if m == 0 || m > data.len() {
        return Err(PviError::InfeasibleSplit(format!(
            "cannot give {m} clients data from {} points",
            data.len()
        )));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng(seed, 0));
    let mut assignments = vec![0; data.len()];
    let mut pos = 0;
    for (k, size) in chunk_sizes(data.len(), m).into_iter().enumerate() {
        for &i in &idx[pos..pos + size] {
            assignments[i] = k;
        }
        pos += size;
    }
    Partition::from_assignments(data, assignments, SplitSpec::homogeneous(m, seed))
}

/// Client sizes and label counts of a size/label-imbalanced split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaKappaPlan {
    /// Positive-label fraction of the whole dataset.
    pub eta: f64,
    /// `kappa` after clipping to `[-eta / (1 - eta), 1]`.
    pub kappa: f64,
    pub eta_small: f64,
    pub n_small: usize,
    pub pos_small: usize,
    /// Sizes of the large clients.
    pub n_large: Vec<usize>,
    /// Positive counts of the large clients.
    pub pos_large: Vec<usize>,
}

impl BetaKappaPlan {
    /// `N_small = floor(N/M (1 - beta))` and `eta_small = eta + (1 - eta) kappa`
    /// for the first `M/2` clients; the other `M/2` share the remaining
    /// points and positives as evenly as possible.
    pub fn new(n: usize, n_pos: usize, m: usize, beta: f64, kappa: f64) -> Result<Self> {
        if m < 2 || !m.is_multiple_of(2) {
            return Err(PviError::InfeasibleSplit(format!(
                "beta/kappa split needs an even M >= 2, got {m}"
            )));
        }
        if !(0.0..1.0).contains(&beta) {
            return Err(PviError::InfeasibleSplit(format!(
                "beta must lie in [0, 1), got {beta}"
            )));
        }
        let eta = n_pos as f64 / n as f64;
        let lo = if eta < 1.0 {
            -eta / (1.0 - eta)
        } else {
            f64::NEG_INFINITY
        };
        let clipped = kappa.clamp(lo, 1.0);
        if clipped != kappa {
            warn!("kappa {kappa} outside [{lo:.4}, 1]; clipped to {clipped:.4}");
        }
        let eta_small = (eta + (1.0 - eta) * clipped).clamp(0.0, 1.0);
        let h = m / 2;
        let n_small = (n as f64 / m as f64 * (1.0 - beta)).floor() as usize;
        let pos_small = (eta_small * n_small as f64).round() as usize;
        let neg_small = n_small - pos_small;
        if n_small == 0 {
            return Err(PviError::InfeasibleSplit("small clients would be empty".into()));
        }
        if h * pos_small > n_pos || h * neg_small > n - n_pos {
            return Err(PviError::InfeasibleSplit(format!(
                "small clients need {} positives and {} negatives; only {} and {} exist",
                h * pos_small,
                h * neg_small,
                n_pos,
                n - n_pos
            )));
        }
        let rest_pos = n_pos - h * pos_small;
        let rest_neg = (n - n_pos) - h * neg_small;
        let pos_large = chunk_sizes(rest_pos, h);
        let neg_large = chunk_sizes(rest_neg, h);
        let n_large: Vec<usize> = pos_large
            .iter()
            .zip(neg_large.iter().rev())
            .map(|(p, q)| p + q)
            .collect();
        if n_large.contains(&0) {
            return Err(PviError::InfeasibleSplit("large clients would be empty".into()));
        }
        Ok(Self {
            eta,
            kappa: clipped,
            eta_small,
            n_small,
            pos_small,
            n_large,
            pos_large,
        })
    }
}

fn binary_labels(data: &Dataset) -> Result<()> {
    if data.targets.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(PviError::InfeasibleSplit(
            "beta/kappa split requires targets in {0, 1}".into(),
        ));
    }
    Ok(())
}

/// Size- and label-imbalanced split: `M/2` small clients with positive
/// fraction `eta_small`, `M/2` large clients with the rest.
pub fn split_beta_kappa(data: &Dataset, m: usize, beta: f64, kappa: f64, seed: u64) -> Result<Partition> {
    binary_labels(data)?;
    let mut pos: Vec<usize> = (0..data.len()).filter(|&i| data.targets[i] == 1.0).collect();
    let mut neg: Vec<usize> = (0..data.len()).filter(|&i| data.targets[i] == 0.0).collect();
    let plan = BetaKappaPlan::new(data.len(), pos.len(), m, beta, kappa)?;
    pos.shuffle(&mut rng(seed, 1));
    neg.shuffle(&mut rng(seed, 2));
    let mut assignments = vec![0; data.len()];
    let (mut p, mut q) = (pos.into_iter(), neg.into_iter());
    let h = m / 2;
    for k in 0..m {
        let (np, size) = if k < h {
            (plan.pos_small, plan.n_small)
        } else {
            (plan.pos_large[k - h], plan.n_large[k - h])
        };
        for i in p.by_ref().take(np).chain(q.by_ref().take(size - np)) {
            assignments[i] = k;
        }
    }
    Partition::from_assignments(data, assignments, SplitSpec::beta_kappa(m, beta, kappa, seed))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, ctr) in centers.iter().enumerate() {
        let d = sq_dist(x, ctr);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding; each cluster is a client.
pub fn split_kmeans(data: &Dataset, m: usize, seed: u64) -> Result<Partition> {
    let n = data.len();
    if m == 0 || m > n {
        return Err(PviError::InfeasibleSplit(format!(
            "k-means needs 1 <= M <= N, got M={m}, N={n}"
        )));
    }
    let mut r = rng(seed, 3);
    let mut centers: Vec<Vec<f64>> = vec![data.row(r.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), &centers[0])).collect();
    while centers.len() < m {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = r.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            r.random_range(0..n)
        };
        centers.push(data.row(next).to_vec());
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(data.row(i), centers.last().expect("just pushed")));
        }
    }
    let mut assign = vec![0usize; n];
    for iter in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let (c, _) = nearest(data.row(i), &centers);
            changed |= *a != c || iter == 0;
            *a = c;
        }
        fill_empty(data, &mut assign, &mut centers);
        if !changed {
            break;
        }
        recompute_centers(data, &assign, &mut centers);
    }
    Partition::from_assignments(data, assign, SplitSpec::kmeans(m, seed))
}

/// Move the point farthest from its center into each empty cluster.
fn fill_empty(data: &Dataset, assign: &mut [usize], centers: &mut [Vec<f64>]) {
    let m = centers.len();
    loop {
        let mut counts = vec![0usize; m];
        assign.iter().for_each(|&a| counts[a] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let far = (0..assign.len())
            .filter(|&i| counts[assign[i]] > 1)
            .max_by(|&a, &b| {
                let da = sq_dist(data.row(a), &centers[assign[a]]);
                let db = sq_dist(data.row(b), &centers[assign[b]]);
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("M <= N leaves a cluster with two points");
        centers[empty] = data.row(far).to_vec();
        assign[far] = empty;
    }
}

fn recompute_centers(data: &Dataset, assign: &[usize], centers: &mut [Vec<f64>]) {
    let d = data.n_features;
    let mut sums = vec![vec![0.0; d]; centers.len()];
    let mut counts = vec![0usize; centers.len()];
    for (i, &a) in assign.iter().enumerate() {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(data.row(i)) {
            *s += x;
        }
    }
    for ((c, s), &k) in centers.iter_mut().zip(sums).zip(&counts) {
        if k > 0 {
            *c = s.into_iter().map(|v| v / k as f64).collect();
        }
    }
}

/// Sort by label, cut into `M * L` near-equal shards and give each client
/// one shard from each of the `L` consecutive blocks of `M` shards, using a
/// seeded permutation of clients per block.
pub fn split_label_shard(data: &Dataset, m: usize, labels_per_client: usize, seed: u64) -> Result<Partition> {
    let n = data.len();
    let shards = m * labels_per_client;
    if m == 0 || labels_per_client == 0 || shards > n {
        return Err(PviError::InfeasibleSplit(format!(
            "cannot cut {n} points into {m} x {labels_per_client} shards"
        )));
    }
    let mut order = Vec::with_capacity(n);
    for (j, label) in label_values(data).into_iter().enumerate() {
        let mut group: Vec<usize> = (0..n).filter(|&i| data.targets[i] == label).collect();
        group.shuffle(&mut rng(seed, 100 + j as u64));
        order.extend(group);
    }
    let sizes = chunk_sizes(n, shards);
    let mut assignments = vec![0; n];
    let mut pos = 0;
    let mut r = rng(seed, 4);
    for block in 0..labels_per_client {
        let mut clients: Vec<usize> = (0..m).collect();
        clients.shuffle(&mut r);
        for (c, &client) in clients.iter().enumerate() {
            let size = sizes[block * m + c];
            for &i in &order[pos..pos + size] {
                assignments[i] = client;
            }
            pos += size;
        }
    }
    Partition::from_assignments(data, assignments, SplitSpec::label_shard(m, labels_per_client, seed))
}

impl SplitScheme {
    pub fn name(self) -> &'static str {
        match self {
            SplitScheme::Homogeneous => "homogeneous",
            SplitScheme::BetaKappa => "beta_kappa",
            SplitScheme::Kmeans => "kmeans",
            SplitScheme::LabelShard => "label_shard",
        }
    }
}
