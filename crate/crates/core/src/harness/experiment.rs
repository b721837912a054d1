use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{bcm, global_vi, streaming_vb_trace, vcl_trace, BcmVariant};
use crate::data::{load_csv, load_mnist, split, synth_blobs, synth_logreg, train_test_split, Partition, SplitSpec};
use crate::error::{PviError, Result};
use crate::expfam::GaussianMeanField;
use crate::localopt::OptimizerConfig;
use crate::models::{Dataset, ModelKind, ModelSpec};
use crate::seeds::mix;
use crate::server::{self, Evaluator, MetricsTrace, TraceRecord};

use super::config::{DataConfig, MethodKind, RunConfig};
use super::metrics::MetricEvaluator;

pub const DATA_DIR_ENV: &str = "PVI_DATA_DIR";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const POSTERIOR_FILE: &str = "posterior.json";

/// Seeds of the independent random streams of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedSeeds {
    pub data: u64,
    pub train_test: u64,
    pub split: u64,
    pub optimizer: u64,
    pub server: u64,
    pub eval: u64,
}

impl DerivedSeeds {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            data: mix(cfg.seed, 1),
            train_test: mix(cfg.seed, 2),
            split: mix(cfg.seed, mix(cfg.split.seed, 5)),
            optimizer: mix(cfg.seed, mix(cfg.optimizer.seed, 6)),
            server: mix(cfg.seed, 3),
            eval: mix(cfg.seed, 4),
        }
    }
}

fn data_root() -> Option<PathBuf> {
    env::var_os(DATA_DIR_ENV).map(PathBuf::from)
}

fn resolve(path: &Path) -> PathBuf {
    match data_root() {
        Some(root) if path.is_relative() => root.join(path),
        _ => path.to_path_buf(),
    }
}

/// Materialize the configured dataset.
pub fn load_data(cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    match cfg {
        DataConfig::SynthLogreg {
            dim,
            n,
            noise,
            weight_seed,
        } => Ok(synth_logreg(*dim, *n, *weight_seed, *noise, seed)?.data),
        DataConfig::Blobs {
            classes,
            dim,
            n,
            separation,
        } => synth_blobs(*classes, *dim, *n, *separation, seed),
        DataConfig::Mnist {
            limit,
            surrogate_n,
            surrogate_dim,
        } => {
            if let Some(root) = data_root() {
                if let Some(d) = load_mnist(&root.join("mnist"), *limit)? {
                    return Ok(d);
                }
            }
            info!("MNIST files not found; using a {surrogate_dim}-feature blob surrogate");
            let n = limit.map_or(*surrogate_n, |l| l.min(*surrogate_n));
            synth_blobs(10, *surrogate_dim, n, 3.0, seed)
        }
        DataConfig::Csv { path, target } => load_csv(&resolve(path), target),
        DataConfig::Inline { inputs, targets } => Dataset::new(inputs.clone(), targets.clone()),
    }
}

/// Build the model for a dataset; the input dimension and class count
/// come from the data.
pub fn build_model(cfg: &RunConfig, data: &Dataset) -> Result<ModelSpec> {
    let m = &cfg.model;
    let mut spec = match m.kind {
        ModelKind::LinearRegression => ModelSpec::linear_regression(data.n_features, m.noise_variance),
        ModelKind::LogisticRegression => ModelSpec::logistic_regression(data.n_features, m.bias),
        ModelKind::BnnClassifier => {
            let classes = data.targets.iter().fold(0.0f64, |a, &b| a.max(b)) as usize + 1;
            ModelSpec::bnn_classifier(data.n_features, m.layer_widths.clone(), classes.max(2))
        }
    };
    if m.kind != ModelKind::BnnClassifier {
        spec.bias = m.bias;
    }
    spec.validate()?;
    Ok(spec)
}

/// Everything a method needs before it runs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub model: ModelSpec,
    pub prior: GaussianMeanField,
    pub train: Dataset,
    pub test: Dataset,
    pub partition: Partition,
    pub seeds: DerivedSeeds,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let seeds = DerivedSeeds::new(cfg);
    let data = load_data(&cfg.data, seeds.data)?;
    let (train, test) = train_test_split(&data, cfg.eval.test_fraction, seeds.train_test)?;
    let model = build_model(cfg, &train)?;
    let spec = SplitSpec {
        seed: seeds.split,
        ..cfg.split.clone()
    };
    let partition = split(&train, &spec)?;
    let prior = GaussianMeanField::isotropic(model.param_dim(), cfg.model.prior_variance);
    Ok(Prepared {
        model,
        prior,
        train,
        test,
        partition,
        seeds,
    })
}

/// Run summary written next to the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub method: String,
    pub seed: u64,
    pub config: RunConfig,
    pub config_sha256: String,
    pub data_sha256: String,
    pub seeds: DerivedSeeds,
    pub param_dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub client_sizes: Vec<usize>,
    /// Damping actually configured (`None` for baselines).
    pub damping: Option<f64>,
    pub commits: usize,
    pub rejections: usize,
    pub converged: bool,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub trace: MetricsTrace,
    pub q: GaussianMeanField,
    pub manifest: Manifest,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn config_digest(cfg: &RunConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    hex(&Sha256::digest(&json))
}

pub fn data_digest(data: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update((data.n_features as u64).to_le_bytes());
    for v in data.inputs.iter().chain(&data.targets) {
        h.update(v.to_le_bytes());
    }
    hex(&h.finalize())
}

struct Baseline<'a> {
    trace: MetricsTrace,
    eval: &'a mut MetricEvaluator,
}

impl Baseline<'_> {
    fn push(&mut self, q: &GaussianMeanField, comms: usize, client: Option<usize>) -> Result<()> {
        let m = self.eval.evaluate(q, true)?;
        let r = TraceRecord::new(self.trace.len(), comms as f64, client, comms).with_metrics(m);
        self.trace.records.push(r);
        Ok(())
    }
}

fn run_baseline_traced(
    cfg: &RunConfig,
    p: &Prepared,
    opt: &OptimizerConfig,
    eval: &mut MetricEvaluator,
) -> Result<(GaussianMeanField, MetricsTrace)> {
    let parts = &p.partition.per_client;
    let m = parts.len();
    let order = cfg.method.order.clone().unwrap_or_else(|| (0..m).collect());
    let mut b = Baseline {
        trace: MetricsTrace::default(),
        eval,
    };
    b.push(&p.prior, 0, None)?;
    let q = match cfg.method.kind {
        MethodKind::GlobalVi => {
            let q = global_vi(&p.prior, &p.model, &p.train, opt)?;
            b.push(&q, 1, None)?;
            q
        }
        MethodKind::BcmSame | MethodKind::BcmSplit => {
            let variant = if cfg.method.kind == MethodKind::BcmSame {
                BcmVariant::Same
            } else {
                BcmVariant::Split
            };
            let q = bcm(&p.prior, &p.model, parts, variant, opt)?;
            b.push(&q, m, None)?;
            q
        }
        MethodKind::Vcl | MethodKind::StreamingVb => {
            let qs = if cfg.method.kind == MethodKind::Vcl {
                vcl_trace(&p.prior, &p.model, parts, &order, opt)?
            } else {
                streaming_vb_trace(&p.prior, &p.model, parts, &order, cfg.method.rounds.unwrap_or(1), opt)?
            };
            for (v, q) in qs.iter().enumerate() {
                b.push(q, v + 1, Some(order[v % m]))?;
            }
            qs.last().cloned().unwrap_or_else(|| p.prior.clone())
        }
        MethodKind::Pvi => unreachable!("pvi is not a baseline"),
    };
    Ok((q, b.trace))
}

/// Build data, partition and model, run the configured method and
/// evaluate the posterior at the configured cadence.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutput> {
    let p = prepare(cfg)?;
    let mut opt = cfg.optimizer.clone();
    opt.seed = p.seeds.optimizer;
    let mut eval = MetricEvaluator {
        model: p.model.clone(),
        prior: p.prior.clone(),
        train: p.train.clone(),
        test: p.test.clone(),
        eval: cfg.eval.clone(),
        seed: p.seeds.eval,
    };
    let m = p.partition.per_client.len();
    let (q, trace, damping, commits, rejections, converged) = if cfg.method.kind == MethodKind::Pvi {
        let state = server::init_with_seed(p.prior.clone(), m, p.seeds.server)?;
        let r = server::run(state, &cfg.schedule, &p.model, &p.partition.per_client, &opt, &mut eval)?;
        let rho = cfg.schedule.damping_for(m);
        (
            r.state.q,
            r.trace,
            Some(rho),
            r.state.commits,
            r.state.rejections,
            r.converged,
        )
    } else {
        let (q, trace) = run_baseline_traced(cfg, &p, &opt, &mut eval)?;
        let commits = trace.len() - 1;
        (q, trace, None, commits, 0, true)
    };
    trace.validate()?;
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        method: cfg.method.kind.name().to_string(),
        seed: cfg.seed,
        config: cfg.clone(),
        config_sha256: config_digest(cfg),
        data_sha256: data_digest(&p.train),
        seeds: p.seeds,
        param_dim: p.model.param_dim(),
        n_train: p.train.len(),
        n_test: p.test.len(),
        client_sizes: p.partition.sizes(),
        damping,
        commits,
        rejections,
        converged,
        records: trace.len(),
    };
    Ok(RunOutput { trace, q, manifest })
}

#[derive(Serialize)]
struct PosteriorFile<'a> {
    eta1: &'a [f64],
    eta2: &'a [f64],
    mean: Vec<f64>,
    variance: Vec<f64>,
}

/// Write `manifest.json`, `trace.jsonl` and `posterior.json` into `dir`.
pub fn write_outputs(out: &RunOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = serde_json::to_string_pretty(&out.manifest).map_err(|e| PviError::Io(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), manifest + "\n")?;
    fs::write(dir.join(TRACE_FILE), out.trace.to_jsonl())?;
    let (mean, variance) = out.q.mean_var()?;
    let post = PosteriorFile {
        eta1: &out.q.eta1,
        eta2: &out.q.eta2,
        mean,
        variance,
    };
    let post = serde_json::to_string_pretty(&post).map_err(|e| PviError::Io(e.to_string()))?;
    fs::write(dir.join(POSTERIOR_FILE), post + "\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    serde_json::from_str(&text).map_err(|e| PviError::SchemaMismatch(format!("manifest: {e}")))
}
