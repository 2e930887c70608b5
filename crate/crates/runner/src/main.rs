use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use lapnet_runner::config::{parse_methods, parse_seeds, resolve_output_dir};
use lapnet_runner::{report, run_experiment, run_sweep, ExperimentConfig, Finished, Method, Overrides, SweepParam};

/// Task-free continual learning experiments.
#[derive(Parser)]
#[command(name = "lapnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured method on every dataset and seed.
    Run(Common),
    /// Rerun the continual methods once per value of one hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated values, e.g. `0.2,1,2,3`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Check a config and list every problem found.
    Validate {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Rebuild and print the summary of an earlier run from its artifacts.
    Report {
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Used to locate the output directory when `--output-dir` is absent.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds as `3`, `1..5` or `1,4,9`.
    #[arg(long, alias = "seed", value_parser = parse_seeds)]
    seeds: Option<::std::vec::Vec<u64>>,
    /// Comma-separated method names.
    #[arg(long, value_parser = parse_methods)]
    methods: Option<::std::vec::Vec<Method>>,
    /// Restrict to these datasets (comma-separated names).
    #[arg(long, value_delimiter = ',')]
    dataset: Option<Vec<String>>,
    /// Defaults to the config's output_dir, then $LAPNET_OUTPUT_ROOT/<config name>,
    /// then runs/<config name>.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    eval_stride: Option<usize>,
    /// Number of (dataset, seed) jobs run in parallel.
    #[arg(long)]
    workers: Option<usize>,
}

fn stem(config: Option<&Path>) -> String {
    config.and_then(|p| p.file_stem()).map_or_else(|| "default".into(), |s| s.to_string_lossy().into_owned())
}

fn load(config: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    match config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn prepare(c: &Common) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = load(c.config.as_deref())?;
    Overrides {
        seeds: c.seeds.clone(),
        methods: c.methods.clone(),
        datasets: c.dataset.clone(),
        eval_stride: c.eval_stride,
        workers: c.workers,
    }
    .apply(&mut cfg)?;
    let out = resolve_output_dir(c.output_dir.as_deref(), &cfg, &stem(c.config.as_deref()));
    Ok((cfg, out))
}

fn show(f: &Finished) -> ExitCode {
    print!("{}", lapnet_runner::summary::to_table(&f.rows));
    println!("summary written to {}", f.csv_path.display());
    if f.failed_runs > 0 {
        eprintln!("{} run(s) failed; see the FAILED markers under the output directory", f.failed_runs);
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn main_inner() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(c) => {
            let (cfg, out) = prepare(&c)?;
            Ok(show(&run_experiment(&cfg, &out)?))
        }
        Command::Sweep { common, param, values } => {
            let (cfg, out) = prepare(&common)?;
            Ok(show(&run_sweep(&cfg, param, &values, &out)?))
        }
        Command::Validate { config } => {
            let cfg = load(config.as_deref())?;
            let v = cfg.validate();
            if v.is_empty() {
                println!("ok");
                Ok(ExitCode::SUCCESS)
            } else {
                for line in &v {
                    println!("{line}");
                }
                Ok(ExitCode::from(2))
            }
        }
        Command::Report { output_dir, config } => {
            let out = match output_dir {
                Some(d) => d,
                None => {
                    let cfg = load(config.as_deref())?;
                    resolve_output_dir(None, &cfg, &stem(config.as_deref()))
                }
            };
            Ok(show(&report(&out).with_context(|| format!("reporting on {}", out.display()))?))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match main_inner() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
