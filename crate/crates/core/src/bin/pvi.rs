use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;

use clap::{Parser, Subcommand};
use log::info;

use pvi::data::{load_csv, split, SplitSpec};
use pvi::harness::{
    emit_plot_data, read_manifest, run_experiment, verify, write_outputs, LabeledTrace, MethodKind, PlotAxes,
    PlotMetric, RunConfig, XAxis,
};
use pvi::server::MetricsTrace;
use pvi::PviError;

#[derive(Parser)]
#[command(name = "pvi", version, about = "Partitioned variational inference experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Overrides {
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the method (pvi, global_vi, bcm_same, bcm_split, vcl, streaming_vb).
    #[arg(long)]
    method: Option<MethodKind>,
    /// Worker threads for synchronous rounds.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        /// Run configuration (TOML).
        config: Option<PathBuf>,
        #[arg(long = "config")]
        config_flag: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Partition a CSV dataset and print the assignment JSON.
    Split {
        data: PathBuf,
        /// Split specification (TOML).
        spec: PathBuf,
        /// Target column of the CSV file.
        #[arg(long, default_value = "y")]
        target: String,
        /// Write the partition here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run several configurations, each into its own directory.
    Compare {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        #[arg(long, default_value = "compare_out")]
        out: PathBuf,
        /// Run each configuration with this many consecutive seeds.
        #[arg(long, default_value_t = 1)]
        repeats: u64,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Turn trace files into tidy and summary CSVs.
    EmitPlots {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
        /// comms or time.
        #[arg(long, default_value = "comms")]
        x: XAxis,
        /// nll, err, free_energy or pruned.
        #[arg(long, default_value = "nll")]
        metric: PlotMetric,
        #[arg(long)]
        log_scale: bool,
    },
    /// Run the acceptance suite.
    Verify {
        /// Directory for the trace files produced by the suite.
        #[arg(long, default_value = "verify_out")]
        out: PathBuf,
        /// Comma-separated criterion numbers (default: all).
        #[arg(long, value_delimiter = ',')]
        only: Vec<u32>,
    },
}

fn load_config(path: &Path, o: &Overrides) -> Result<RunConfig, PviError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    if let Some(m) = o.method {
        cfg.method.kind = m;
    }
    if let Some(t) = o.threads {
        cfg.schedule.threads = t;
    }
    Ok(cfg)
}

fn run_one(cfg: &RunConfig, dir: &Path) -> Result<(), PviError> {
    let out = run_experiment(cfg)?;
    write_outputs(&out, dir)?;
    let last = out.trace.last();
    info!(
        "{}: {} records, final test NLL {:?}",
        dir.display(),
        out.trace.len(),
        last.and_then(|r| r.test_nll)
    );
    println!("{}", dir.join(pvi::harness::TRACE_FILE).display());
    Ok(())
}

fn with_context(path: &Path, e: PviError) -> PviError {
    match e {
        PviError::Config(m) if !m.contains(&path.display().to_string()) => {
            PviError::Config(format!("{}: {m}", path.display()))
        }
        other => other,
    }
}

fn label_for(trace_path: &Path) -> (String, u64) {
    let dir = trace_path.parent().unwrap_or(Path::new("."));
    match read_manifest(dir) {
        Ok(m) => (m.method, m.seed),
        Err(_) => (
            trace_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            0,
        ),
    }
}

fn execute(cli: Cli) -> Result<bool, PviError> {
    match cli.command {
        Command::Run {
            config,
            config_flag,
            out,
            overrides,
        } => {
            let path = config
                .or(config_flag)
                .ok_or_else(|| PviError::Config("run needs a config path".into()))?;
            let cfg = load_config(&path, &overrides)?;
            let dir = out
                .or_else(|| cfg.output.clone())
                .unwrap_or_else(|| PathBuf::from("run_out"));
            run_one(&cfg, &dir).map_err(|e| with_context(&path, e))?;
            Ok(true)
        }
        Command::Split {
            data,
            spec,
            target,
            out,
        } => {
            let text = fs::read_to_string(&spec).map_err(|e| PviError::Config(format!("{}: {e}", spec.display())))?;
            let spec_v: SplitSpec =
                toml::from_str(&text).map_err(|e| PviError::Config(format!("{}: {e}", spec.display())))?;
            let dataset = load_csv(&data, &target)?;
            let p = split(&dataset, &spec_v)?;
            match out {
                Some(o) => fs::write(o, p.to_json() + "\n")?,
                None => println!("{}", p.to_json()),
            }
            Ok(true)
        }
        Command::Compare {
            configs,
            out,
            repeats,
            overrides,
        } => {
            let mut jobs = Vec::new();
            for path in &configs {
                let base = load_config(path, &overrides)?;
                let stem = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                for r in 0..repeats.max(1) {
                    let mut cfg = base.clone();
                    cfg.seed = base.seed + r;
                    jobs.push((path.clone(), out.join(format!("{stem}_seed{}", cfg.seed)), cfg));
                }
            }
            let results: Vec<Result<(), PviError>> = thread::scope(|s| {
                let handles: Vec<_> = jobs
                    .iter()
                    .map(|(path, dir, cfg)| s.spawn(move || run_one(cfg, dir).map_err(|e| with_context(path, e))))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("run thread panicked"))
                    .collect()
            });
            results.into_iter().collect::<Result<Vec<_>, _>>()?;
            let traces = jobs
                .iter()
                .map(|(_, dir, cfg)| {
                    let f = fs::File::open(dir.join(pvi::harness::TRACE_FILE))?;
                    Ok(LabeledTrace {
                        method: format!("{}", dir.file_name().map(|s| s.to_string_lossy()).unwrap_or_default())
                            .trim_end_matches(&format!("_seed{}", cfg.seed))
                            .to_string(),
                        seed: cfg.seed,
                        trace: MetricsTrace::read_jsonl(BufReader::new(f))?,
                    })
                })
                .collect::<Result<Vec<_>, PviError>>()?;
            let files = emit_plot_data(&traces, &PlotAxes::default(), &out.join("plots"))?;
            println!("{}", files.summary.display());
            Ok(true)
        }
        Command::EmitPlots {
            traces,
            out,
            x,
            metric,
            log_scale,
        } => {
            let mut labeled = Vec::new();
            for path in &traces {
                let f = fs::File::open(path)?;
                let (method, seed) = label_for(path);
                labeled.push(LabeledTrace {
                    method,
                    seed,
                    trace: MetricsTrace::read_jsonl(BufReader::new(f))?,
                });
            }
            let axes = PlotAxes { x, metric, log_scale };
            let files = emit_plot_data(&labeled, &axes, &out)?;
            println!("{}\n{}", files.tidy.display(), files.summary.display());
            Ok(true)
        }
        Command::Verify { out, only } => {
            let ids = if only.is_empty() {
                verify::CRITERIA.to_vec()
            } else {
                only
            };
            let mut all = true;
            for &id in &ids {
                let r = verify::verify(&[id], Some(&out))?;
                for rep in r {
                    println!("{rep}");
                    all &= rep.passed;
                }
            }
            Ok(all)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
