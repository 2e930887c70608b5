//! Sensor windows and labeled sample collections.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Activity class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Stable identifier of a sample within a dataset, used by stream manifests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SampleId(pub u64);

/// Channel count and timesteps of every window in a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub channels: usize,
    pub timesteps: usize,
}

impl InputSpec {
    pub fn new(channels: usize, timesteps: usize) -> Self {
        Self { channels, timesteps }
    }

    pub fn width(&self) -> usize {
        self.channels * self.timesteps
    }
}

/// A `channels × timesteps` block of sensor readings, stored channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    values: Vec<f64>,
}

impl Window {
    pub fn new(spec: InputSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.width() {
            return Err(contract!(
                "window has {} values, input spec {}x{} needs {}",
                values.len(),
                spec.channels,
                spec.timesteps,
                spec.width()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(contract!("window contains non-finite values"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn channel(&self, spec: InputSpec, c: usize) -> &[f64] {
        &self.values[c * spec.timesteps..(c + 1) * spec.timesteps]
    }
}

/// One labeled window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: SampleId,
    pub label: ClassId,
    pub window: Window,
}

/// A set of labeled windows: the unit of streaming, replay and evaluation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabeledBatch {
    pub samples: Vec<Sample>,
}

impl LabeledBatch {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> core::slice::Iter<'_, Sample> {
        self.samples.iter()
    }

    pub fn labels(&self) -> Vec<ClassId> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn ids(&self) -> Vec<SampleId> {
        self.samples.iter().map(|s| s.id).collect()
    }

    /// Distinct labels in ascending order.
    pub fn classes(&self) -> Vec<ClassId> {
        let mut c: Vec<ClassId> = self.samples.iter().map(|s| s.label).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Samples grouped by label, preserving order within each class.
    pub fn by_class(&self) -> BTreeMap<ClassId, Vec<&Sample>> {
        let mut out: BTreeMap<ClassId, Vec<&Sample>> = BTreeMap::new();
        for s in &self.samples {
            out.entry(s.label).or_default().push(s);
        }
        out
    }

    pub fn extend(&mut self, other: impl IntoIterator<Item = Sample>) {
        self.samples.extend(other);
    }

    /// Keeps the samples whose label satisfies `keep`.
    pub fn filter_classes(&self, keep: impl Fn(ClassId) -> bool) -> LabeledBatch {
        LabeledBatch::new(self.samples.iter().filter(|s| keep(s.label)).cloned().collect())
    }

    /// Stacks the windows into an `n × width` matrix.
    pub fn to_matrix(&self, spec: InputSpec) -> Result<Tensor> {
        stack_windows(self.samples.iter().map(|s| &s.window), spec)
    }
}

impl FromIterator<Sample> for LabeledBatch {
    fn from_iter<I: IntoIterator<Item = Sample>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

impl IntoIterator for LabeledBatch {
    type Item = Sample;
    type IntoIter = alloc::vec::IntoIter<Sample>;

    fn into_iter(self) -> Self::IntoIter {
        self.samples.into_iter()
    }
}

pub fn stack_windows<'a>(windows: impl IntoIterator<Item = &'a Window>, spec: InputSpec) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    for w in windows {
        if w.values.len() != spec.width() {
            return Err(contract!("window of {} values does not match input width {}", w.values.len(), spec.width()));
        }
        data.extend_from_slice(&w.values);
        n += 1;
    }
    Tensor::matrix(n, spec.width(), data)
}
