//! Recording segmentation, normalization and synthetic data.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ClassId, InputSpec, LabeledBatch, Sample, SampleId, Window};
use crate::error::{contract, Result};
use crate::stream::Dataset;

/// A continuous multichannel recording with one label per timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecording {
    pub sample_rate_hz: f64,
    pub channels: usize,
    /// Row-major `timesteps × channels`.
    pub values: Vec<f64>,
    pub labels: Vec<ClassId>,
    pub subject: Option<u32>,
}

impl RawRecording {
    pub fn new(sample_rate_hz: f64, rows: Vec<(Vec<f64>, ClassId)>) -> Result<Self> {
        let channels = rows.first().map(|r| r.0.len()).unwrap_or(0);
        if channels == 0 {
            return Err(contract!("recording needs at least one row with one channel"));
        }
        if !(sample_rate_hz > 0.0) {
            return Err(contract!("sample rate must be positive"));
        }
        let mut values = Vec::with_capacity(rows.len() * channels);
        let mut labels = Vec::with_capacity(rows.len());
        for (i, (r, y)) in rows.into_iter().enumerate() {
            if r.len() != channels {
                return Err(contract!("row {} has {} channels, expected {}", i, r.len(), channels));
            }
            values.extend(r);
            labels.push(y);
        }
        Ok(Self { sample_rate_hz, channels, values, labels, subject: None })
    }

    pub fn timesteps(&self) -> usize {
        self.labels.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Span {
    Seconds(f64),
    Samples(usize),
}

impl Span {
    fn to_samples(self, rate: f64) -> usize {
        match self {
            Span::Samples(n) => n,
            Span::Seconds(s) => libm::round(s * rate) as usize,
        }
    }
}

/// Sliding-window parameters. Window labels are the majority label inside
/// the window, ties going to whichever tied label occurs first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowingSpec {
    pub window: Span,
    pub step: Span,
}

impl WindowingSpec {
    pub fn seconds(window: f64, step: f64) -> Self {
        Self { window: Span::Seconds(window), step: Span::Seconds(step) }
    }

    pub fn samples(window: usize, step: usize) -> Self {
        Self { window: Span::Samples(window), step: Span::Samples(step) }
    }

    /// `(window, step)` in samples at `rate` Hz.
    pub fn in_samples(&self, rate: f64) -> Result<(usize, usize)> {
        let (w, s) = (self.window.to_samples(rate), self.step.to_samples(rate));
        if s == 0 || s > w {
            return Err(contract!("window step must satisfy 0 < step <= window (got step {} for window {})", s, w));
        }
        Ok((w, s))
    }

    /// Windowing presets for common activity recognition datasets.
    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "opportunity" => Self::seconds(0.8, 0.4),
            "pamap2" => Self::seconds(1.0, 0.5),
            "dsads" => Self::seconds(5.0, 5.0),
            "skoda" => Self::seconds(1.0, 0.5),
            "hapt" => Self::seconds(2.56, 1.28),
            _ => return None,
        })
    }

    pub const PRESETS: [&'static str; 5] = ["opportunity", "pamap2", "dsads", "skoda", "hapt"];
}

/// Number of windows a recording of `len` samples yields.
pub fn window_count(len: usize, window: usize, step: usize) -> usize {
    if len < window || step == 0 {
        0
    } else {
        (len - window) / step + 1
    }
}

/// Cuts `rec` into channel-major windows. Sample ids start at `first_id`.
pub fn segment(rec: &RawRecording, spec: &WindowingSpec, first_id: u64) -> Result<LabeledBatch> {
    let (w, s) = spec.in_samples(rec.sample_rate_hz)?;
    if w == 0 || rec.timesteps() < w {
        return Err(contract!("recording of {} samples is shorter than one window of {}", rec.timesteps(), w));
    }
    let input = InputSpec::new(rec.channels, w);
    let n = window_count(rec.timesteps(), w, s);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let start = i * s;
        let mut values = vec![0.0; rec.channels * w];
        for t in 0..w {
            for c in 0..rec.channels {
                values[c * w + t] = rec.values[(start + t) * rec.channels + c];
            }
        }
        out.push(Sample {
            id: SampleId(first_id + i as u64),
            label: majority_label(&rec.labels[start..start + w]),
            window: Window::new(input, values)?,
        });
    }
    Ok(LabeledBatch::new(out))
}

/// Segments several recordings in order, assigning consecutive sample ids.
/// All recordings must share a channel count.
pub fn segment_all(recs: &[RawRecording], spec: &WindowingSpec) -> Result<LabeledBatch> {
    let mut out = LabeledBatch::default();
    if let Some(first) = recs.first() {
        for (i, r) in recs.iter().enumerate() {
            if r.channels != first.channels {
                return Err(contract!("recording {} has {} channels, expected {}", i, r.channels, first.channels));
            }
            let next = out.len() as u64;
            out.extend(segment(r, spec, next)?);
        }
    }
    Ok(out)
}

fn majority_label(labels: &[ClassId]) -> ClassId {
    let mut counts: BTreeMap<ClassId, (usize, usize)> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        counts.entry(y).or_insert((0, i)).0 += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
        .map(|(k, _)| k)
        .expect("window is non-empty")
}

/// Per-channel z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub input: InputSpec,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Fits per-channel mean and (population) standard deviation over every
    /// timestep of every window in `train`. Zero-variance channels get a
    /// unit divisor.
    pub fn fit(train: &LabeledBatch, input: InputSpec) -> Result<Self> {
        if train.is_empty() {
            return Err(contract!("normalization needs a non-empty training set"));
        }
        let mut mean = vec![0.0; input.channels];
        let mut sq = vec![0.0; input.channels];
        let n = (train.len() * input.timesteps) as f64;
        for s in train.iter() {
            if s.window.values().len() != input.width() {
                return Err(contract!("window does not match input spec"));
            }
            for c in 0..input.channels {
                mean[c] += s.window.channel(input, c).iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for s in train.iter() {
            for c in 0..input.channels {
                sq[c] += s.window.channel(input, c).iter().map(|v| (v - mean[c]) * (v - mean[c])).sum::<f64>();
            }
        }
        let std = sq
            .into_iter()
            .enumerate()
            .map(|(c, v)| {
                let sd = libm::sqrt(v / n);
                if sd > 1e-12 {
                    sd
                } else {
                    log::warn!("channel {} has zero variance; using a unit divisor", c);
                    1.0
                }
            })
            .collect();
        Ok(Self { input, mean, std })
    }

    pub fn apply(&self, batch: &mut LabeledBatch) {
        let t = self.input.timesteps;
        for s in batch.samples.iter_mut() {
            let v = s.window.values_mut();
            for c in 0..self.input.channels {
                for x in &mut v[c * t..(c + 1) * t] {
                    *x = (*x - self.mean[c]) / self.std[c];
                }
            }
        }
    }
}

/// Normalizes `train` and every set in `others` with statistics fitted on
/// `train` alone.
pub fn normalize(train: &LabeledBatch, others: &[&LabeledBatch], input: InputSpec) -> Result<(LabeledBatch, Vec<LabeledBatch>, NormStats)> {
    let stats = NormStats::fit(train, input)?;
    let mut t = train.clone();
    stats.apply(&mut t);
    let rest = others
        .iter()
        .map(|o| {
            let mut o = (*o).clone();
            stats.apply(&mut o);
            o
        })
        .collect();
    Ok((t, rest, stats))
}

/// Class-conditional Gaussian with diagonal covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassGaussian {
    pub label: ClassId,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub input: InputSpec,
    pub classes: Vec<ClassGaussian>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
    /// Mean offset reached by the last training sample of each class; the
    /// i-th of n training samples is shifted by `drift · i/n`. Test samples
    /// are drawn without drift.
    #[serde(default)]
    pub drift: Option<Vec<f64>>,
}

/// Parameters for [`SyntheticSpec::benchmark`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSpec {
    pub classes: usize,
    pub channels: usize,
    pub timesteps: usize,
    /// Scale of the class-specific patterns around a shared background signal.
    pub separation: f64,
    pub noise: f64,
    /// Overall signal scale; multiplies means and noise alike.
    pub amplitude: f64,
    /// Consecutive class ids sharing a coarse pattern.
    pub group_size: usize,
    /// Weight of each class's own pattern relative to its group pattern.
    /// Only used when `group_size > 1`.
    pub within_group: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            classes: 8,
            channels: 3,
            timesteps: 16,
            separation: 1.0,
            noise: 1.0,
            amplitude: 1.0,
            group_size: 1,
            within_group: 0.0,
            train_per_class: 200,
            test_per_class: 60,
        }
    }
}

impl SyntheticSpec {
    /// Sensor-like class patterns: every class mean is a shared background
    /// waveform plus a class pattern per channel scaled by `separation`,
    /// observed under isotropic noise.
    ///
    /// With `group_size > 1` the class pattern is a pattern shared by the
    /// group plus `within_group` times the class's own pattern, so classes
    /// in a group differ only by a smaller signal.
    pub fn benchmark(b: &BenchmarkSpec, seed: u64) -> Self {
        let input = InputSpec::new(b.channels, b.timesteps);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba5e);
        let wave = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let mut m = Vec::with_capacity(input.width());
            for _ in 0..b.channels {
                let amp: f64 = rng.random_range(0.5..1.5);
                let freq: f64 = rng.random_range(0.5..3.0);
                let phase: f64 = rng.random_range(0.0..core::f64::consts::TAU);
                let offset: f64 = StandardNormal.sample(rng);
                for t in 0..b.timesteps {
                    let x = core::f64::consts::TAU * freq * t as f64 / b.timesteps as f64 + phase;
                    m.push(offset + amp * libm::sin(x));
                }
            }
            m
        };
        let background = wave(&mut rng);
        let own: Vec<Vec<f64>> = (0..b.classes).map(|_| wave(&mut rng)).collect();
        let grouped = b.group_size > 1;
        let groups: Vec<Vec<f64>> = if grouped {
            (0..b.classes.div_ceil(b.group_size)).map(|_| wave(&mut rng)).collect()
        } else {
            Vec::new()
        };
        let classes = (0..b.classes)
            .map(|k| {
                let pattern: Vec<f64> = if grouped {
                    groups[k / b.group_size].iter().zip(&own[k]).map(|(g, o)| g + b.within_group * o).collect()
                } else {
                    own[k].clone()
                };
                ClassGaussian {
                    label: ClassId(k as u32),
                    mean: background.iter().zip(&pattern).map(|(g, o)| b.amplitude * (g + b.separation * o)).collect(),
                    std: vec![b.amplitude * b.noise; input.width()],
                }
            })
            .collect();
        Self {
            input,
            classes,
            train_per_class: b.train_per_class,
            test_per_class: b.test_per_class,
            seed,
            drift: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(contract!("synthetic data needs at least two classes"));
        }
        let w = self.input.width();
        if w == 0 {
            return Err(contract!("synthetic input spec is empty"));
        }
        for c in &self.classes {
            if c.mean.len() != w || c.std.len() != w {
                return Err(contract!("class {} mean/std must have {} entries", c.label, w));
            }
            if c.std.iter().any(|s| !(s.is_finite() && *s >= 0.0)) || c.mean.iter().any(|m| !m.is_finite()) {
                return Err(contract!("class {} has an invalid mean or negative standard deviation", c.label));
            }
        }
        if let Some(d) = &self.drift {
            if d.len() != w {
                return Err(contract!("drift must have {} entries", w));
            }
        }
        let mut labels: Vec<ClassId> = self.classes.iter().map(|c| c.label).collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() != self.classes.len() {
            return Err(contract!("synthetic class labels must be unique"));
        }
        Ok(())
    }
}

/// Draws a deterministic train/test dataset from `spec`.
pub fn synth(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut next_id = 0u64;
    let mut draw = |class: &ClassGaussian, shift: f64, rng: &mut ChaCha8Rng| -> Result<Sample> {
        let values = class
            .mean
            .iter()
            .zip(&class.std)
            .enumerate()
            .map(|(i, (m, s))| {
                let z: f64 = StandardNormal.sample(rng);
                let d = spec.drift.as_ref().map(|d| d[i] * shift).unwrap_or(0.0);
                m + d + s * z
            })
            .collect();
        let id = SampleId(next_id);
        next_id += 1;
        Ok(Sample { id, label: class.label, window: Window::new(spec.input, values)? })
    };
    let mut train = Vec::new();
    for c in &spec.classes {
        for i in 0..spec.train_per_class {
            train.push(draw(c, i as f64 / spec.train_per_class as f64, &mut rng)?);
        }
    }
    let mut test = Vec::new();
    for c in &spec.classes {
        for _ in 0..spec.test_per_class {
            test.push(draw(c, 0.0, &mut rng)?);
        }
    }
    Ok(Dataset { input: spec.input, train: LabeledBatch::new(train), test: LabeledBatch::new(test) })
}

/// Human-readable listing of the windowing presets.
pub fn preset_table() -> String {
    let mut s = String::new();
    for name in WindowingSpec::PRESETS {
        let p = WindowingSpec::preset(name).expect("listed preset");
        if let (Span::Seconds(w), Span::Seconds(st)) = (p.window, p.step) {
            s.push_str(&alloc::format!("{name}: window {w} s, step {st} s\n"));
        }
    }
    s
}
