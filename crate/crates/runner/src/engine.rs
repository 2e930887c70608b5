//! Runs experiments: data preparation, pretraining, one continual run per
//! method variant, and the per-run artifacts.
//!
//! Layout under the output directory:
//!
//! ```text
//! <dataset>/seed_<s>/stream_manifest.json
//! <dataset>/<method>[/<param>_<value>]/seed_<s>/steps.jsonl
//! <dataset>/<method>[/<param>_<value>]/seed_<s>/prototypes_<step>.csv
//! <dataset>/<method>[/<param>_<value>]/seed_<s>/FAILED      (only on failure)
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use lapnet_core::ingest::{normalize, segment_all, synth, RawRecording, SyntheticSpec, WindowingSpec};
use lapnet_core::metrics::{Evaluation, LedgerSummary};
use lapnet_core::stream::make_split;
use lapnet_core::trainer::{evaluate, offline_pretrain, run, EvalSets, Pretrained, StepObserver};
use lapnet_core::{
    ClassId, ContinualConfig, Dataset, Encoder, InputSpec, LabeledBatch, Learner, MetricsLedger, ProtocolSplit,
    PrototypeMemory, SampleId, StreamBatch, StreamConfig, StreamGenerator,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetConfig, DatasetSource, ExperimentConfig, Method};
use crate::recording::load_recording;

/// Continual hyperparameter varied by `sweep`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum SweepParam {
    RefreshRatio,
    Margin,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::RefreshRatio => "refresh_ratio",
            SweepParam::Margin => "margin",
        }
    }

    pub fn apply(self, cfg: &mut ContinualConfig, value: f64) {
        match self {
            SweepParam::RefreshRatio => cfg.refresh_ratio = value,
            SweepParam::Margin => cfg.margin = value,
        }
    }
}

/// One method configuration run on every (dataset, seed) job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub method: Method,
    pub sweep: Option<(SweepParam, f64)>,
    pub continual: ContinualConfig,
}

impl Variant {
    fn dir(&self, root: &Path, dataset: &str, seed: u64) -> PathBuf {
        let mut d = root.join(dataset).join(self.method.name());
        if let Some((p, v)) = self.sweep {
            d = d.join(format!("{}_{v}", p.name()));
        }
        d.join(format!("seed_{seed}"))
    }
}

/// The method variants of a plain run.
pub fn run_variants(cfg: &ExperimentConfig) -> Vec<Variant> {
    cfg.methods
        .iter()
        .map(|&method| {
            let mut continual = cfg.continual.clone();
            continual.flags = method.flags(cfg.continual.flags).unwrap_or(cfg.continual.flags);
            Variant { method, sweep: None, continual }
        })
        .collect()
}

/// Every continual method crossed with every sweep value. Offline training
/// does not depend on the swept parameters and is skipped.
pub fn sweep_variants(cfg: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Vec<Variant> {
    let mut out = Vec::new();
    for &v in values {
        for base in run_variants(cfg) {
            if base.method == Method::Offline {
                continue;
            }
            let mut continual = base.continual;
            param.apply(&mut continual, v);
            out.push(Variant { method: base.method, sweep: Some((param, v)), continual });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Done(LedgerSummary),
    Failed(String),
}

/// Results of one (dataset, seed) job, one entry per variant in order.
#[derive(Debug, Clone, PartialEq)]
pub struct JobResult {
    pub dataset: String,
    pub seed: u64,
    pub outcomes: Vec<Outcome>,
}

/// Everything shared by the variants of one job.
pub struct Prepared {
    pub dataset: Dataset,
    pub split: ProtocolSplit,
    pub eval: EvalSets,
    pub pretrained: Pretrained,
    pub offline: Pretrained,
    pub offline_eval: Evaluation,
    pub batches: Vec<StreamBatch>,
}

/// Loads or generates the dataset for one seed.
pub fn load_dataset(d: &DatasetConfig, seed: u64) -> anyhow::Result<Dataset> {
    match &d.source {
        DatasetSource::Synthetic { spec, drift } => {
            let mut s = SyntheticSpec::benchmark(spec, seed);
            s.drift = drift.clone();
            Ok(synth(&s)?)
        }
        DatasetSource::Csv { train, test, sample_rate_hz, .. } => {
            let windowing = d.windowing()?.expect("csv datasets have windowing");
            let load = |paths: &[PathBuf]| -> anyhow::Result<Vec<_>> {
                paths.iter().map(|p| load_recording(p, *sample_rate_hz)).collect()
            };
            windowed(&load(train)?, &load(test)?, &windowing)
        }
    }
}

/// Segments recordings and z-scores every channel with training statistics.
/// Test sample ids continue after the training ids.
pub fn windowed(train: &[RawRecording], test: &[RawRecording], spec: &WindowingSpec) -> anyhow::Result<Dataset> {
    let tr = segment_all(train, spec)?;
    let mut te = segment_all(test, spec)?;
    let (Some(first), Some(rec)) = (tr.iter().next(), train.first()) else {
        bail!("training recordings yield no windows");
    };
    if test.first().is_some_and(|t| t.channels != rec.channels) {
        bail!("test recordings have {} channels, training recordings {}", test[0].channels, rec.channels);
    }
    let input = InputSpec::new(rec.channels, first.window.values().len() / rec.channels);
    let offset = tr.len() as u64;
    for s in te.samples.iter_mut() {
        s.id = SampleId(s.id.0 + offset);
    }
    let (train, mut rest, _) = normalize(&tr, &[&te], input)?;
    let test: LabeledBatch = rest.remove(0);
    Ok(Dataset { input, train, test })
}

/// Data, split, pretrained model, offline reference and stream of one job.
pub fn prepare(cfg: &ExperimentConfig, d: &DatasetConfig, seed: u64) -> anyhow::Result<Prepared> {
    let dataset = load_dataset(d, seed).with_context(|| format!("preparing dataset `{}`", d.name))?;
    let split = make_split(&dataset, cfg.split.base_classes, cfg.split.pretrain_fraction, seed)?;
    let eval = EvalSets { base: split.eval_base.clone(), new: split.eval_new.clone() };
    let encoder = Encoder::init(dataset.input, cfg.encoder.clone(), seed)?;
    let capacity = cfg.continual.replay_capacity;
    let offline = offline_pretrain(encoder.clone(), &dataset.train, &cfg.pretrain, capacity, seed)?;
    let offline_eval = evaluate(&offline.encoder, &offline.memory, &eval, &split.classes.base)?;
    let pretrained = offline_pretrain(encoder, &split.pretrain, &cfg.pretrain, capacity, seed)?;
    let stream_cfg = StreamConfig { batch_size: cfg.continual.batch_size, max_classes: cfg.continual.max_classes_per_batch };
    let batches = StreamGenerator::new(&split.pool, stream_cfg, seed ^ cfg.continual.seed)?.collect();
    Ok(Prepared { dataset, split, eval, pretrained, offline, offline_eval, batches })
}

#[derive(Serialize)]
struct ManifestStep {
    step: usize,
    classes: Vec<ClassId>,
    samples: Vec<SampleId>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    dataset: &'a str,
    seed: u64,
    base_classes: &'a [ClassId],
    new_classes: &'a [ClassId],
    pretrain_samples: Vec<SampleId>,
    steps: Vec<ManifestStep>,
}

fn write_manifest(path: &Path, dataset: &str, seed: u64, p: &Prepared) -> anyhow::Result<()> {
    let m = Manifest {
        dataset,
        seed,
        base_classes: &p.split.classes.base,
        new_classes: &p.split.classes.new,
        pretrain_samples: p.split.pretrain.ids(),
        steps: p
            .batches
            .iter()
            .map(|b| ManifestStep { step: b.step, classes: b.batch.classes(), samples: b.batch.ids() })
            .collect(),
    };
    fs::write(path, serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

/// Writes `class,count,e_0..e_{d-1}` rows.
pub fn write_prototypes(path: &Path, memory: &PrototypeMemory) -> anyhow::Result<()> {
    let mut s = String::from("class,count");
    for i in 0..memory.dim() {
        write!(s, ",e_{i}")?;
    }
    s.push('\n');
    for (k, p) in memory.iter() {
        write!(s, "{k},{}", p.count)?;
        for v in &p.vector {
            write!(s, ",{v}")?;
        }
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn write_steps(path: &Path, ledger: &MetricsLedger) -> anyhow::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in &ledger.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_steps(path: &Path) -> anyhow::Result<MetricsLedger> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let records = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect::<anyhow::Result<_>>()?;
    Ok(MetricsLedger { records, ..Default::default() })
}

/// Writes prototype snapshots at step 0, every `stride` steps and at the
/// last step.
struct Snapshots<'a> {
    dir: &'a Path,
    stride: usize,
    last: usize,
    error: Option<anyhow::Error>,
}

impl StepObserver for Snapshots<'_> {
    fn evaluated(&mut self, step: usize, learner: &Learner) {
        let due = step == 0 || step == self.last || (self.stride > 0 && step.is_multiple_of(self.stride));
        if due && self.error.is_none() {
            if let Err(e) = write_prototypes(&self.dir.join(format!("prototypes_{step}.csv")), &learner.memory) {
                self.error = Some(e);
            }
        }
    }
}

fn run_variant(v: &Variant, p: &Prepared, dir: &Path, snapshot_stride: usize) -> anyhow::Result<LedgerSummary> {
    let base = &p.split.classes.base;
    let reference = Some(p.offline_eval.per_class.clone());
    let ledger = match v.method {
        Method::Offline => {
            let mut ledger = MetricsLedger::new(base.clone(), reference);
            ledger.push(0, p.offline_eval.clone(), None)?;
            write_prototypes(&dir.join("prototypes_0.csv"), &p.offline.memory)?;
            ledger
        }
        _ => {
            let learner = Learner::new(p.pretrained.clone(), v.continual.learning_rate)?;
            let mut obs = Snapshots { dir, stride: snapshot_stride, last: p.batches.len(), error: None };
            let out = run(learner, p.batches.iter().cloned(), &v.continual, &p.eval, base, reference, &mut obs)?;
            if let Some(e) = obs.error {
                return Err(e);
            }
            out.ledger
        }
    };
    write_steps(&dir.join("steps.jsonl"), &ledger)?;
    Ok(ledger.summary())
}

fn fail(dir: &Path, msg: &str) -> Outcome {
    let _ = fs::create_dir_all(dir);
    if let Err(e) = fs::write(dir.join("FAILED"), format!("{msg}\n")) {
        log::error!("could not write failure marker in {}: {e}", dir.display());
    }
    Outcome::Failed(msg.to_string())
}

fn panic_message(e: Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| e.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

fn run_job(cfg: &ExperimentConfig, d: &DatasetConfig, seed: u64, variants: &[Variant], out: &Path) -> JobResult {
    log::info!("dataset `{}` seed {seed}: preparing", d.name);
    let prepared = catch_unwind(AssertUnwindSafe(|| prepare(cfg, d, seed)))
        .unwrap_or_else(|e| Err(anyhow::anyhow!(panic_message(e))))
        .and_then(|p| {
            let dir = out.join(&d.name).join(format!("seed_{seed}"));
            fs::create_dir_all(&dir)?;
            write_manifest(&dir.join("stream_manifest.json"), &d.name, seed, &p)?;
            Ok(p)
        });
    let outcomes = match prepared {
        Err(e) => {
            let msg = format!("{e:#}");
            log::error!("dataset `{}` seed {seed}: {msg}", d.name);
            variants.iter().map(|v| fail(&v.dir(out, &d.name, seed), &msg)).collect()
        }
        Ok(p) => variants
            .iter()
            .map(|v| {
                let dir = v.dir(out, &d.name, seed);
                let result = fs::create_dir_all(&dir)
                    .map_err(anyhow::Error::from)
                    .and_then(|_| {
                        let _ = fs::remove_file(dir.join("FAILED"));
                        catch_unwind(AssertUnwindSafe(|| run_variant(v, &p, &dir, cfg.snapshot_stride)))
                            .unwrap_or_else(|e| Err(anyhow::anyhow!(panic_message(e))))
                    });
                match result {
                    Ok(s) => {
                        log::info!("dataset `{}` seed {seed} {}: overall F1 {:.4}", d.name, v.method, s.overall_final);
                        Outcome::Done(s)
                    }
                    Err(e) => {
                        let msg = format!("{e:#}");
                        log::error!("dataset `{}` seed {seed} {}: {msg}", d.name, v.method);
                        fail(&dir, &msg)
                    }
                }
            })
            .collect(),
    };
    JobResult { dataset: d.name.clone(), seed, outcomes }
}

/// Runs every variant on every (dataset, seed) job, `cfg.workers` jobs at a
/// time. Results come back in config order whatever the scheduling.
pub fn execute(cfg: &ExperimentConfig, variants: &[Variant], out: &Path) -> anyhow::Result<Vec<JobResult>> {
    let v = cfg.validate();
    if !v.is_empty() {
        bail!("invalid config:\n  {}", v.join("\n  "));
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.resolved.toml"), cfg.to_toml()?)?;
    fs::write(out.join("variants.json"), serde_json::to_string_pretty(variants)? + "\n")?;
    let jobs: Vec<(&DatasetConfig, u64)> =
        cfg.datasets.iter().flat_map(|d| cfg.seeds.iter().map(move |&s| (d, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build()?;
    Ok(pool.install(|| jobs.par_iter().map(|&(d, s)| run_job(cfg, d, s, variants, out)).collect()))
}

/// Rebuilds job results from the artifacts of an earlier run.
pub fn collect(cfg: &ExperimentConfig, variants: &[Variant], out: &Path) -> anyhow::Result<Vec<JobResult>> {
    let mut jobs = Vec::new();
    for d in &cfg.datasets {
        for &seed in &cfg.seeds {
            let mut outcomes = Vec::new();
            for v in variants {
                let dir = v.dir(out, &d.name, seed);
                let failed = dir.join("FAILED");
                outcomes.push(if failed.exists() {
                    Outcome::Failed(fs::read_to_string(failed)?.trim().to_string())
                } else {
                    Outcome::Done(read_steps(&dir.join("steps.jsonl"))?.summary())
                });
            }
            jobs.push(JobResult { dataset: d.name.clone(), seed, outcomes });
        }
    }
    Ok(jobs)
}
