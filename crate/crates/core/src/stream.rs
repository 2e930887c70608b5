//! Task-free data-incremental streaming protocol.
//!
//! Classes are split at random into base and new classes. Part of each base
//! class's training data is set aside for offline pretraining; everything
//! else forms the streaming pool. The pool is then emitted in small batches
//! that mix at most a handful of classes, with no task boundaries.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClassId, InputSpec, LabeledBatch, Sample};
use crate::error::{contract, Result};

/// Training and held-out test data of one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub input: InputSpec,
    pub train: LabeledBatch,
    pub test: LabeledBatch,
}

impl Dataset {
    pub fn classes(&self) -> Vec<ClassId> {
        self.train.classes()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub base: Vec<ClassId>,
    pub new: Vec<ClassId>,
    pub pretrain_fraction: f64,
}

/// Everything a continual run needs from one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolSplit {
    pub classes: ClassSplit,
    /// `D_0`: the pretraining share of the base classes.
    pub pretrain: LabeledBatch,
    /// Remaining base-class data plus all new-class training data.
    pub pool: LabeledBatch,
    pub eval_base: LabeledBatch,
    pub eval_new: LabeledBatch,
}

/// Splits `dataset` into pretraining data, a streaming pool and held-out
/// base/new evaluation sets.
pub fn make_split(dataset: &Dataset, n_base: usize, fraction: f64, seed: u64) -> Result<ProtocolSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(contract!("pretrain fraction must lie in (0, 1), got {}", fraction));
    }
    let grouped = dataset.train.by_class();
    let mut classes = Vec::new();
    for (k, samples) in &grouped {
        if samples.len() < 2 {
            log::warn!("class {} has {} training sample(s); excluded from the protocol", k, samples.len());
        } else {
            classes.push(*k);
        }
    }
    if n_base == 0 || classes.len() < n_base + 1 {
        return Err(contract!("need at least {} usable classes for {} base classes, found {}", n_base + 1, n_base, classes.len()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = classes.clone();
    order.shuffle(&mut rng);
    let mut base: Vec<ClassId> = order[..n_base].to_vec();
    let mut new: Vec<ClassId> = order[n_base..].to_vec();
    base.sort_unstable();
    new.sort_unstable();

    let mut pretrain = Vec::new();
    let mut pool = Vec::new();
    for k in &classes {
        let samples = &grouped[k];
        if base.binary_search(k).is_ok() {
            let n = samples.len();
            let take = ((n as f64 * fraction) as usize).clamp(1, n - 1);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let (head, tail) = idx.split_at(take);
            let mut head = head.to_vec();
            let mut tail = tail.to_vec();
            head.sort_unstable();
            tail.sort_unstable();
            pretrain.extend(head.into_iter().map(|i| samples[i].clone()));
            pool.extend(tail.into_iter().map(|i| samples[i].clone()));
        } else {
            pool.extend(samples.iter().map(|s| (*s).clone()));
        }
    }
    pretrain.sort_by_key(|s: &Sample| s.id);
    pool.sort_by_key(|s: &Sample| s.id);

    let eval_base = dataset.test.filter_classes(|k| base.binary_search(&k).is_ok());
    let eval_new = dataset.test.filter_classes(|k| new.binary_search(&k).is_ok());
    Ok(ProtocolSplit {
        classes: ClassSplit { base, new, pretrain_fraction: fraction },
        pretrain: LabeledBatch::new(pretrain),
        pool: LabeledBatch::new(pool),
        eval_base,
        eval_new,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub batch_size: usize,
    pub max_classes: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self { batch_size: 20, max_classes: 5 }
    }
}

/// One streamed batch `D_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamBatch {
    pub step: usize,
    pub batch: LabeledBatch,
}

/// Emits the streaming pool exactly once, in random capped batches.
#[derive(Debug, Clone)]
pub struct StreamGenerator {
    remaining: BTreeMap<ClassId, Vec<Sample>>,
    rng: ChaCha8Rng,
    config: StreamConfig,
    step: usize,
}

impl StreamGenerator {
    pub fn new(pool: &LabeledBatch, config: StreamConfig, seed: u64) -> Result<Self> {
        if config.batch_size == 0 || config.max_classes == 0 {
            return Err(contract!("stream batch size and class cap must be positive"));
        }
        let mut remaining: BTreeMap<ClassId, Vec<Sample>> = BTreeMap::new();
        for s in pool.iter() {
            remaining.entry(s.label).or_default().push(s.clone());
        }
        Ok(Self { remaining, rng: ChaCha8Rng::seed_from_u64(seed), config, step: 0 })
    }

    pub fn remaining(&self) -> usize {
        self.remaining.values().map(Vec::len).sum()
    }

    /// Picks up to `max_classes` classes with data left, then draws up to
    /// `batch_size` samples uniformly from their combined remainder, so each
    /// class contributes in proportion to what it has left.
    pub fn next_batch(&mut self) -> Option<StreamBatch> {
        let live: Vec<ClassId> = self.remaining.iter().filter(|(_, v)| !v.is_empty()).map(|(k, _)| *k).collect();
        if live.is_empty() {
            return None;
        }
        let k = live.len().min(self.config.max_classes);
        let mut chosen: Vec<ClassId> =
            rand::seq::index::sample(&mut self.rng, live.len(), k).into_iter().map(|i| live[i]).collect();
        chosen.sort_unstable();

        let candidates: Vec<(ClassId, usize)> = chosen
            .iter()
            .flat_map(|c| (0..self.remaining[c].len()).map(move |i| (*c, i)))
            .collect();
        let n = candidates.len().min(self.config.batch_size);
        let picks: Vec<(ClassId, usize)> =
            rand::seq::index::sample(&mut self.rng, candidates.len(), n).into_iter().map(|i| candidates[i]).collect();

        let mut taken: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for &(c, i) in &picks {
            taken.entry(c).or_default().push(i);
        }
        let mut batch = Vec::with_capacity(n);
        for &(c, i) in &picks {
            batch.push(self.remaining[&c][i].clone());
        }
        for (c, mut idx) in taken {
            idx.sort_unstable_by(|a, b| b.cmp(a));
            let v = self.remaining.get_mut(&c).expect("chosen class exists");
            for i in idx {
                v.remove(i);
            }
        }
        self.remaining.retain(|_, v| !v.is_empty());

        let step = self.step;
        self.step += 1;
        Some(StreamBatch { step, batch: LabeledBatch::new(batch) })
    }
}

impl Iterator for StreamGenerator {
    type Item = StreamBatch;

    fn next(&mut self) -> Option<StreamBatch> {
        self.next_batch()
    }
}
