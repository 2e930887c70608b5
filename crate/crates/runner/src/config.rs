//! Experiment configuration files.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use lapnet_core::ingest::{BenchmarkSpec, WindowingSpec};
use lapnet_core::trainer::{AblationFlags, ContinualConfig, PretrainConfig};
use lapnet_core::EncoderConfig;
use serde::{Deserialize, Serialize};

/// Environment variable naming the default root for run outputs.
pub const OUTPUT_ROOT_ENV: &str = "LAPNET_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Offline training on all training data; the upper bound and the
    /// intransigence reference.
    Offline,
    /// Online finetuning: cross-entropy on the stream only.
    Online,
    Lapnet,
    LapnetNoContrastive,
    LapnetNoReplayNoContrastive,
    /// Uses the flags given under `[continual.flags]`.
    Custom,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Offline,
        Method::Online,
        Method::Lapnet,
        Method::LapnetNoContrastive,
        Method::LapnetNoReplayNoContrastive,
        Method::Custom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Offline => "offline",
            Method::Online => "online",
            Method::Lapnet => "lapnet",
            Method::LapnetNoContrastive => "lapnet_no_contrastive",
            Method::LapnetNoReplayNoContrastive => "lapnet_no_replay_no_contrastive",
            Method::Custom => "custom",
        }
    }

    /// Component switches for a continual method; `None` for offline.
    pub fn flags(self, custom: AblationFlags) -> Option<AblationFlags> {
        match self {
            Method::Offline => None,
            Method::Online => Some(AblationFlags::NONE),
            Method::Lapnet => Some(AblationFlags::FULL),
            Method::LapnetNoContrastive => Some(AblationFlags { contrastive: false, ..AblationFlags::FULL }),
            Method::LapnetNoReplayNoContrastive => {
                Some(AblationFlags { replay_buffer: true, experience_replay: false, contrastive: false, adapt: true })
            }
            Method::Custom => Some(custom),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .with_context(|| format!("unknown method `{s}`; expected one of {}", Method::ALL.map(Method::name).join(", ")))
    }
}

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    /// Generated per seed from a benchmark specification.
    Synthetic {
        #[serde(flatten)]
        spec: BenchmarkSpec,
        /// Mean offset reached by the last training sample of each class.
        #[serde(default)]
        drift: Option<Vec<f64>>,
    },
    /// Recordings in the CSV schema `timestamp, ch_0 .. ch_{n-1}, label`.
    Csv {
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
        /// Named windowing preset, e.g. `pamap2`.
        #[serde(default)]
        preset: Option<String>,
        /// Window and step in seconds; used when no preset is given.
        #[serde(default)]
        window_s: Option<f64>,
        #[serde(default)]
        step_s: Option<f64>,
        /// Taken from the timestamps when absent.
        #[serde(default)]
        sample_rate_hz: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub name: String,
    #[serde(flatten)]
    pub source: DatasetSource,
}

impl DatasetConfig {
    pub fn windowing(&self) -> anyhow::Result<Option<WindowingSpec>> {
        match &self.source {
            DatasetSource::Synthetic { .. } => Ok(None),
            DatasetSource::Csv { preset: Some(p), .. } => {
                WindowingSpec::preset(p).map(Some).with_context(|| format!("unknown windowing preset `{p}`"))
            }
            DatasetSource::Csv { window_s: Some(w), step_s: Some(s), .. } => Ok(Some(WindowingSpec::seconds(*w, *s))),
            DatasetSource::Csv { .. } => bail!("dataset `{}` needs a windowing preset or window_s and step_s", self.name),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub base_classes: usize,
    pub pretrain_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { base_classes: 5, pretrain_fraction: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub output_dir: Option<PathBuf>,
    pub workers: usize,
    /// Write prototype snapshots every this many steps (0: first and last only).
    pub snapshot_stride: usize,
    pub split: SplitConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub continual: ContinualConfig,
    pub datasets: Vec<DatasetConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1],
            methods: vec![
                Method::Offline,
                Method::Online,
                Method::Lapnet,
                Method::LapnetNoContrastive,
                Method::LapnetNoReplayNoContrastive,
            ],
            output_dir: None,
            workers: 1,
            snapshot_stride: 0,
            split: SplitConfig::default(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            continual: ContinualConfig::default(),
            datasets: vec![DatasetConfig {
                name: "synthetic".into(),
                source: DatasetSource::Synthetic { spec: BenchmarkSpec::default(), drift: None },
            }],
        }
    }
}

impl ExperimentConfig {
    /// Reads a config file. Relative recording paths are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for d in &mut cfg.datasets {
            if let DatasetSource::Csv { train, test, .. } = &mut d.source {
                for p in train.iter_mut().chain(test.iter_mut()) {
                    if p.is_relative() {
                        *p = base.join(&*p);
                    }
                }
            }
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Schema and range checks. An empty list means the config is usable.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.seeds.is_empty() {
            v.push("seeds must not be empty".to_string());
        }
        if self.methods.is_empty() {
            v.push("methods must not be empty".to_string());
        }
        if self.workers == 0 {
            v.push("workers must be positive".to_string());
        }
        if self.datasets.is_empty() {
            v.push("at least one dataset is required".to_string());
        }
        let mut names: Vec<&str> = self.datasets.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            v.push("dataset names must be unique".to_string());
        }
        if self.split.base_classes == 0 {
            v.push("split.base_classes must be positive".to_string());
        }
        if !(self.split.pretrain_fraction > 0.0 && self.split.pretrain_fraction < 1.0) {
            v.push(format!("split.pretrain_fraction {} outside (0, 1)", self.split.pretrain_fraction));
        }
        if self.encoder.embedding_dim == 0 {
            v.push("encoder.embedding_dim must be positive".to_string());
        }
        v.extend(self.pretrain.violations());
        v.extend(self.continual.violations());
        for d in &self.datasets {
            match &d.source {
                DatasetSource::Synthetic { spec, drift } => {
                    if spec.classes <= self.split.base_classes {
                        v.push(format!("dataset `{}` has {} classes; needs more than {} base classes", d.name, spec.classes, self.split.base_classes));
                    }
                    if spec.channels == 0 || spec.timesteps == 0 {
                        v.push(format!("dataset `{}` needs positive channels and timesteps", d.name));
                    }
                    if !(spec.noise >= 0.0 && spec.amplitude > 0.0) {
                        v.push(format!("dataset `{}` needs noise >= 0 and amplitude > 0", d.name));
                    }
                    if spec.train_per_class < 2 || spec.test_per_class == 0 {
                        v.push(format!("dataset `{}` needs at least 2 training and 1 test sample per class", d.name));
                    }
                    if let Some(dr) = drift {
                        if dr.len() != spec.channels * spec.timesteps {
                            v.push(format!("dataset `{}` drift needs {} entries", d.name, spec.channels * spec.timesteps));
                        }
                    }
                }
                DatasetSource::Csv { train, test, .. } => {
                    if let Err(e) = d.windowing() {
                        v.push(e.to_string());
                    }
                    if train.is_empty() || test.is_empty() {
                        v.push(format!("dataset `{}` needs train and test recordings", d.name));
                    }
                }
            }
        }
        v
    }
}

/// Parses `3`, `1..5` (inclusive), or `1,2,7`.
pub fn parse_seeds(s: &str) -> anyhow::Result<Vec<u64>> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().trim_start_matches('=').parse()?);
        if b < a {
            bail!("empty seed range `{s}`");
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|x| x.trim().parse::<u64>().with_context(|| format!("bad seed `{x}`"))).collect()
}

pub fn parse_methods(s: &str) -> anyhow::Result<Vec<Method>> {
    s.split(',').map(str::parse).collect()
}

/// `--output-dir`, then the config, then `$LAPNET_OUTPUT_ROOT/<stem>`,
/// then `runs/<stem>`.
pub fn resolve_output_dir(flag: Option<&Path>, config: &ExperimentConfig, stem: &str) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = &config.output_dir {
        return p.clone();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(stem),
        _ => PathBuf::from("runs").join(stem),
    }
}
