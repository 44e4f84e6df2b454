//! `modelless` command line: run experiments, compare runs, and generate
//! traces and catalogs.
//!
//! Exit codes: 0 on success, 1 for bad arguments or configs, 2 for failures
//! while running.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use modelless::catalog::{builtin_catalog, write_profiles};
use modelless::experiment::{self, build_catalog, build_trace, preset, ExperimentConfig, ExperimentError, PRESETS};
use modelless::sim::Policy;
use modelless::workload::{write_arrivals, BucketTrace};

#[derive(Parser)]
#[command(name = "modelless", version, about = "Model-less inference serving simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write its metrics, logs and summary.
    Run {
        #[command(flatten)]
        source: ConfigSource,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's policy.
        #[arg(long, value_parser = parse_policy)]
        policy: Option<Policy>,
        /// A finished run to report the cost ratio against.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Compare two finished runs (A relative to B).
    Compare {
        run_a: PathBuf,
        run_b: PathBuf,
        /// Also write comparison.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the arrival trace a config would simulate.
    GenTrace {
        #[command(flatten)]
        source: ConfigSource,
        /// Output file.
        #[arg(long)]
        out: PathBuf,
        /// Write per-bucket counts of this width (seconds) instead of arrivals.
        #[arg(long)]
        bucket_width: Option<f64>,
    },
    /// Write a variant catalog in the profile CSV format.
    GenCatalog {
        /// Output file.
        #[arg(long)]
        out: PathBuf,
        /// Restrict the builtin catalog to these architectures.
        #[arg(long, value_delimiter = ',')]
        archs: Option<Vec<String>>,
        /// Use the catalog of this config instead of the builtin one.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigSource {
    /// Scenario config file.
    #[arg(long, required_unless_present = "preset", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in scenario name.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
    preset: Option<String>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigSource {
    /// The config and the directory its relative paths resolve against.
    fn load(&self) -> Result<(ExperimentConfig, PathBuf), ExperimentError> {
        let (mut cfg, base) = match (&self.config, &self.preset) {
            (Some(path), _) => {
                let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
                (ExperimentConfig::load(path)?, base)
            }
            (None, Some(name)) => (preset(name).expect("validated by clap"), PathBuf::from(".")),
            (None, None) => unreachable!("clap requires one source"),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok((cfg, base))
    }
}

fn parse_policy(s: &str) -> Result<Policy, String> {
    match s {
        "modelless" => Ok(Policy::Modelless),
        "static_cpu" => Ok(Policy::StaticCpu),
        "static_gpu" => Ok(Policy::StaticGpu),
        "horizontal_only" => Ok(Policy::HorizontalOnly),
        other => Err(format!(
            "unknown policy `{other}` (expected modelless, static_cpu, static_gpu or horizontal_only)"
        )),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, ExperimentError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| ExperimentError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| ExperimentError::Runtime(format!("{}: {e}", path.display())))
}

fn execute(command: Command) -> Result<(), ExperimentError> {
    match command {
        Command::Run {
            source,
            out,
            policy,
            baseline,
        } => {
            let (mut cfg, base) = source.load()?;
            if let Some(p) = policy {
                cfg.policy = p;
            }
            if let Some(b) = baseline {
                cfg.baseline_dir = Some(std::path::absolute(&b).unwrap_or(b));
            }
            let s = experiment::run_experiment(&cfg, &base, &out)?;
            println!(
                "{}: {} arrived, {} served, violation ratio {:.4}, total cost {:.4}",
                s.policy, s.arrived, s.served, s.violation_ratio, s.total_cost
            );
            if let Some(r) = s.baseline_cost_ratio {
                println!("baseline cost ratio {r:.4}");
            }
            println!("wrote {}", out.display());
        }
        Command::Compare { run_a, run_b, out } => {
            let c = experiment::compare(&run_a, &run_b, out.as_deref())?;
            let fmt = |r: Option<f64>| r.map_or("n/a".to_string(), |r| format!("{r:.4}"));
            println!("cost ratio {}", fmt(c.cost_ratio));
            println!("violation ratio delta {:+.4}", c.violation_ratio_delta);
            println!("throughput ratio {}", fmt(c.throughput_ratio));
        }
        Command::GenTrace {
            source,
            out,
            bucket_width,
        } => {
            let (cfg, base) = source.load()?;
            let catalog = build_catalog(&cfg.catalog, &base)?;
            let trace = build_trace(&cfg, &catalog, &base)?;
            let file = create(&out)?;
            let written = match bucket_width {
                Some(w) if w > 0.0 => BucketTrace::from_trace(&trace, w, cfg.horizon_s).write(file),
                Some(w) => return Err(ExperimentError::Config(format!("bucket width must be positive, got {w}"))),
                None => write_arrivals(&trace, file),
            };
            written.map_err(|e| ExperimentError::Runtime(e.to_string()))?;
            println!("{} arrivals -> {}", trace.len(), out.display());
        }
        Command::GenCatalog { out, archs, config } => {
            let catalog = match (&config, &archs) {
                (Some(path), _) => {
                    let cfg = ExperimentConfig::load(path)?;
                    build_catalog(&cfg.catalog, path.parent().unwrap_or(Path::new("")))?
                }
                (None, Some(list)) => {
                    let only: Vec<&str> = list.iter().map(String::as_str).collect();
                    let c = builtin_catalog(Some(&only));
                    if let Some(missing) = list.iter().find(|a| c.arch(a).is_none()) {
                        return Err(ExperimentError::Config(format!("unknown builtin architecture `{missing}`")));
                    }
                    c
                }
                (None, None) => builtin_catalog(None),
            };
            write_profiles(&catalog, create(&out)?).map_err(|e| ExperimentError::Runtime(e.to_string()))?;
            println!("{} variants -> {}", catalog.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
