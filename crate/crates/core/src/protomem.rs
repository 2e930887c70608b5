//! Prototype memory: one running-mean embedding per class seen so far.
//!
//! The memory is the classifier. A query is assigned a softmax over the
//! negative squared distances to every stored prototype. Prototypes are
//! refined online as labeled batches arrive, and can be pulled toward the
//! replay-buffer mean under the current encoder with a fixed refresh ratio.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::log_sum_exp;
use crate::data::{ClassId, LabeledBatch, Window};
use crate::encoder::Encoder;
use crate::error::{contract, Result};
use crate::replay::ReplayBuffer;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub vector: Vec<f64>,
    /// Number of samples folded into `vector` by online averaging.
    pub count: u64,
}

/// Softmax over classes in memory for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub probabilities: BTreeMap<ClassId, f64>,
}

impl ClassDistribution {
    /// Most probable class; ties go to the lowest class id.
    pub fn argmax(&self) -> ClassId {
        let mut best: Option<(ClassId, f64)> = None;
        for (&k, &p) in &self.probabilities {
            match best {
                Some((_, bp)) if p <= bp => {}
                _ => best = Some((k, p)),
            }
        }
        best.expect("distribution over a non-empty memory").0
    }

    pub fn probability(&self, class: ClassId) -> f64 {
        self.probabilities.get(&class).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeMemory {
    dim: usize,
    entries: BTreeMap<ClassId, Prototype>,
}

/// Per-class sums and counts of the rows of `emb`.
fn class_sums(emb: &Tensor, labels: &[ClassId], dim: usize) -> Result<BTreeMap<ClassId, (Vec<f64>, u64)>> {
    if emb.rows() != labels.len() || (emb.rows() > 0 && emb.cols() != dim) {
        return Err(contract!(
            "{} labels for {} embeddings of width {} (memory dimension {})",
            labels.len(),
            emb.rows(),
            emb.cols(),
            dim
        ));
    }
    let mut sums: BTreeMap<ClassId, (Vec<f64>, u64)> = BTreeMap::new();
    for (i, &k) in labels.iter().enumerate() {
        let entry = sums.entry(k).or_insert_with(|| (alloc::vec![0.0; dim], 0));
        for (s, v) in entry.0.iter_mut().zip(emb.row(i)) {
            *s += v;
        }
        entry.1 += 1;
    }
    Ok(sums)
}

impl PrototypeMemory {
    pub fn new(dim: usize) -> Self {
        Self { dim, entries: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn classes(&self) -> Vec<ClassId> {
        self.entries.keys().copied().collect()
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.entries.contains_key(&class)
    }

    pub fn get(&self, class: ClassId) -> Option<&Prototype> {
        self.entries.get(&class)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, &Prototype)> {
        self.entries.iter().map(|(k, p)| (*k, p))
    }

    /// Inserts or replaces a prototype directly.
    pub fn insert(&mut self, class: ClassId, vector: Vec<f64>, count: u64) -> Result<()> {
        if vector.len() != self.dim {
            return Err(contract!("prototype of width {} in memory of dimension {}", vector.len(), self.dim));
        }
        if count == 0 {
            return Err(contract!("prototype count must be positive"));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(contract!("prototype for class {} is not finite", class));
        }
        self.entries.insert(class, Prototype { vector, count });
        Ok(())
    }

    /// Class means of precomputed embeddings.
    pub fn from_embeddings(emb: &Tensor, labels: &[ClassId], dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(contract!("cannot build a prototype memory from no samples"));
        }
        let mut mem = Self::new(dim);
        for (k, (sum, n)) in class_sums(emb, labels, dim)? {
            let vector = sum.into_iter().map(|s| s / n as f64).collect();
            mem.insert(k, vector, n)?;
        }
        Ok(mem)
    }

    /// One prototype per class in `base`: the mean embedding of all its samples.
    pub fn init_from_data(encoder: &Encoder, base: &LabeledBatch) -> Result<Self> {
        if base.is_empty() {
            return Err(contract!("base data is empty"));
        }
        let emb = encoder.embed_batch(base)?;
        Self::from_embeddings(&emb, &base.labels(), encoder.embedding_dim())
    }

    /// Online averaging with precomputed embeddings. Unknown classes are
    /// created from their batch mean; classes absent from the batch are left
    /// alone.
    pub fn update_with_embeddings(&mut self, emb: &Tensor, labels: &[ClassId]) -> Result<()> {
        for (k, (sum, n)) in class_sums(emb, labels, self.dim)? {
            match self.entries.get_mut(&k) {
                Some(p) => {
                    let new_count = p.count + n;
                    let keep = p.count as f64 / new_count as f64;
                    for (v, s) in p.vector.iter_mut().zip(&sum) {
                        *v = keep * *v + s / new_count as f64;
                    }
                    p.count = new_count;
                }
                None => {
                    let vector = sum.into_iter().map(|s| s / n as f64).collect();
                    self.insert(k, vector, n)?;
                }
            }
        }
        Ok(())
    }

    /// Embeds `batch` with the (frozen) encoder and folds it into memory.
    pub fn online_update(&mut self, encoder: &Encoder, batch: &LabeledBatch) -> Result<()> {
        if batch.is_empty() {
            return Ok(());
        }
        let emb = encoder.embed_batch(batch)?;
        self.update_with_embeddings(&emb, &batch.labels())
    }

    /// Prototype vectors stacked in class-id order.
    pub fn prototype_matrix(&self) -> Result<(Vec<ClassId>, Tensor)> {
        let classes = self.classes();
        let data = self.entries.values().flat_map(|p| p.vector.iter().copied()).collect();
        Ok((classes.clone(), Tensor::matrix(classes.len(), self.dim, data)?))
    }

    /// Softmax over negative squared distances for each row of `emb`.
    pub fn distributions(&self, emb: &Tensor) -> Result<Vec<ClassDistribution>> {
        if self.is_empty() {
            return Err(contract!("prediction needs a non-empty prototype memory"));
        }
        if emb.rows() > 0 && emb.cols() != self.dim {
            return Err(contract!("query width {} does not match memory dimension {}", emb.cols(), self.dim));
        }
        let mut out = Vec::with_capacity(emb.rows());
        let mut logits = Vec::with_capacity(self.len());
        for i in 0..emb.rows() {
            let q = emb.row(i);
            logits.clear();
            logits.extend(self.entries.values().map(|p| -sq_dist(q, &p.vector)));
            let lse = log_sum_exp(&logits);
            let probabilities = self.entries.keys().zip(&logits).map(|(&k, &l)| (k, libm::exp(l - lse))).collect();
            out.push(ClassDistribution { probabilities });
        }
        Ok(out)
    }

    /// Nearest-prototype labels for each row of `emb` (lowest id wins ties).
    pub fn classify(&self, emb: &Tensor) -> Result<Vec<ClassId>> {
        if self.is_empty() {
            return Err(contract!("prediction needs a non-empty prototype memory"));
        }
        if emb.rows() > 0 && emb.cols() != self.dim {
            return Err(contract!("query width {} does not match memory dimension {}", emb.cols(), self.dim));
        }
        Ok((0..emb.rows())
            .map(|i| {
                let q = emb.row(i);
                let mut best = (ClassId(0), f64::INFINITY);
                for (&k, p) in &self.entries {
                    let d = sq_dist(q, &p.vector);
                    if d < best.1 {
                        best = (k, d);
                    }
                }
                best.0
            })
            .collect())
    }

    pub fn predict<'a>(&self, encoder: &Encoder, windows: impl IntoIterator<Item = &'a Window>) -> Result<Vec<ClassDistribution>> {
        if self.is_empty() {
            return Err(contract!("prediction needs a non-empty prototype memory"));
        }
        self.distributions(&encoder.embed(windows)?)
    }

    pub fn predict_labels<'a>(&self, encoder: &Encoder, windows: impl IntoIterator<Item = &'a Window>) -> Result<Vec<ClassId>> {
        if self.is_empty() {
            return Err(contract!("prediction needs a non-empty prototype memory"));
        }
        self.classify(&encoder.embed(windows)?)
    }

    /// `p[k] ← α·p[k] + (1−α)·mean(emb of class k)` for every class in
    /// `labels`. Counts are left unchanged.
    pub fn adapt_with_embeddings(&mut self, emb: &Tensor, labels: &[ClassId], alpha: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(contract!("refresh ratio must lie in [0, 1], got {}", alpha));
        }
        let sums = class_sums(emb, labels, self.dim)?;
        if let Some(k) = sums.keys().find(|k| !self.entries.contains_key(k)) {
            return Err(contract!("replayed class {} has no prototype", k));
        }
        if alpha == 1.0 {
            return Ok(());
        }
        for (k, (sum, n)) in sums {
            let p = self.entries.get_mut(&k).expect("checked above");
            for (v, s) in p.vector.iter_mut().zip(sum) {
                *v = alpha * *v + (1.0 - alpha) * (s / n as f64);
            }
        }
        Ok(())
    }

    /// Refreshes every class held in `replay` toward its mean embedding under
    /// the updated encoder.
    pub fn replay_adapt(&mut self, encoder: &Encoder, replay: &ReplayBuffer, alpha: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(contract!("refresh ratio must lie in [0, 1], got {}", alpha));
        }
        let stored = replay.drain();
        if stored.is_empty() || alpha == 1.0 {
            return Ok(());
        }
        let emb = encoder.embed_batch(&stored)?;
        self.adapt_with_embeddings(&emb, &stored.labels(), alpha)
    }

    /// Checks that every prototype has the memory's width, finite entries
    /// and a positive count.
    pub fn check_invariants(&self) -> Result<()> {
        for (k, p) in &self.entries {
            if p.vector.len() != self.dim || p.count == 0 || p.vector.iter().any(|v| !v.is_finite()) {
                return Err(contract!("prototype for class {} violates memory invariants", k));
            }
        }
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
