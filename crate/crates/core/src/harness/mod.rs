//! Experiment orchestration: configuration, metrics, trace and plot-data
//! output, and the acceptance suite.

mod config;
mod experiment;
mod hyperopt;
mod metrics;
mod plots;
pub mod verify;

pub use config::{Cadence, DataConfig, EvalConfig, MethodConfig, MethodKind, ModelConfig, RunConfig};
pub use experiment::{
    build_model, config_digest, data_digest, load_data, prepare, read_manifest, run_experiment, write_outputs,
    DerivedSeeds, Manifest, Prepared, RunOutput, DATA_DIR_ENV, MANIFEST_FILE, POSTERIOR_FILE, TRACE_FILE,
};
pub use hyperopt::{fit_noise_variance, NoiseFit};
pub use metrics::{log_loss, predictive, pruned_count, MetricEvaluator, Predictive};
pub use plots::{
    emit_plot_data, summarize, summary_csv, tidy_csv, LabeledTrace, PlotAxes, PlotFiles, PlotMetric, SummaryRow, XAxis,
    SUMMARY_FILE, TIDY_FILE,
};
