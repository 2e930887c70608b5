//! Experiment runner for `lapnet-core`: config files, recording CSVs,
//! seeded multi-method runs, sweeps and result artifacts.

pub mod config;
pub mod engine;
pub mod recording;
pub mod summary;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

pub use config::{ExperimentConfig, Method};
pub use engine::{SweepParam, Variant};
pub use summary::SummaryRow;

/// Command-line values that replace config entries.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seeds: Option<Vec<u64>>,
    pub methods: Option<Vec<Method>>,
    pub datasets: Option<Vec<String>>,
    pub eval_stride: Option<usize>,
    pub workers: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> anyhow::Result<()> {
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(m) = &self.methods {
            cfg.methods = m.clone();
        }
        if let Some(names) = &self.datasets {
            for n in names {
                if !cfg.datasets.iter().any(|d| &d.name == n) {
                    bail!("no dataset named `{n}` in the config");
                }
            }
            cfg.datasets.retain(|d| names.contains(&d.name));
        }
        if let Some(e) = self.eval_stride {
            cfg.continual.eval_stride = e;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        Ok(())
    }
}

/// Outcome of `run` or `sweep`.
#[derive(Debug, Clone)]
pub struct Finished {
    pub rows: Vec<SummaryRow>,
    pub csv_path: PathBuf,
    pub failed_runs: usize,
}

fn finish(variants: &[Variant], jobs: &[engine::JobResult], csv_path: PathBuf) -> anyhow::Result<Finished> {
    let rows = summary::aggregate(variants, jobs);
    fs::write(&csv_path, summary::to_csv(&rows)).with_context(|| format!("writing {}", csv_path.display()))?;
    let failed_runs = rows.iter().map(|r| r.failed).sum();
    Ok(Finished { rows, csv_path, failed_runs })
}

fn csv_name(variants: &[Variant]) -> String {
    match variants.first().and_then(|v| v.sweep) {
        Some((p, _)) => format!("sweep_{}.csv", p.name()),
        None => "summary.csv".into(),
    }
}

/// Runs every configured method on every dataset and seed and writes
/// `summary.csv`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<Finished> {
    let variants = engine::run_variants(cfg);
    let jobs = engine::execute(cfg, &variants, out)?;
    finish(&variants, &jobs, out.join(csv_name(&variants)))
}

/// Runs the continual methods once per value of `param`, sharing data,
/// pretraining and streams across values, and writes `sweep_<param>.csv`.
pub fn run_sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[f64], out: &Path) -> anyhow::Result<Finished> {
    if values.is_empty() {
        bail!("sweep needs at least one value");
    }
    let variants = engine::sweep_variants(cfg, param, values);
    if variants.is_empty() {
        bail!("sweep needs at least one continual method");
    }
    for v in &variants {
        if let Some(e) = v.continual.violations().into_iter().next() {
            bail!("{}={}: {e}", param.name(), v.sweep.map_or(f64::NAN, |s| s.1));
        }
    }
    let jobs = engine::execute(cfg, &variants, out)?;
    finish(&variants, &jobs, out.join(csv_name(&variants)))
}

/// Rebuilds the summary of an earlier `run` or `sweep` from its artifacts.
pub fn report(out: &Path) -> anyhow::Result<Finished> {
    let cfg = ExperimentConfig::load(&out.join("config.resolved.toml"))?;
    let path = out.join("variants.json");
    let variants: Vec<Variant> = serde_json::from_str(&fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?)?;
    let jobs = engine::collect(&cfg, &variants, out)?;
    finish(&variants, &jobs, out.join(csv_name(&variants)))
}
