//! Class-balanced replay buffer of raw windows.
//!
//! Each class keeps at most `capacity` samples. On every update the kept
//! samples are redrawn uniformly without replacement from the candidate
//! pool for that class (the current batch plus what the buffer already
//! holds), so old and fresh samples compete on equal terms.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{ClassId, LabeledBatch, Sample};
use crate::error::{contract, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    store: BTreeMap<ClassId, Vec<Sample>>,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(contract!("replay capacity per class must be positive"));
        }
        Ok(Self { capacity, store: BTreeMap::new(), rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total number of stored samples.
    pub fn len(&self) -> usize {
        self.store.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn classes(&self) -> Vec<ClassId> {
        self.store.keys().copied().collect()
    }

    pub fn class_samples(&self, class: ClassId) -> &[Sample] {
        self.store.get(&class).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Redraws each class present in `combined` from that class's samples.
    ///
    /// `combined` is expected to already contain the buffer's own contents
    /// (see [`ReplayBuffer::pool_with`]); classes missing from it are kept.
    pub fn update(&mut self, combined: &LabeledBatch) {
        for (class, pool) in combined.by_class() {
            let kept: Vec<Sample> = if pool.len() <= self.capacity {
                pool.into_iter().cloned().collect()
            } else {
                let mut picks = rand::seq::index::sample(&mut self.rng, pool.len(), self.capacity).into_vec();
                picks.sort_unstable();
                picks.into_iter().map(|i| pool[i].clone()).collect()
            };
            self.store.insert(class, kept);
        }
    }

    /// All stored samples in class-id order. The buffer is not modified.
    pub fn drain(&self) -> LabeledBatch {
        self.store.values().flat_map(|v| v.iter().cloned()).collect()
    }

    /// `batch ∪ stored samples`, the candidate pool for the next update.
    pub fn pool_with(&self, batch: &LabeledBatch) -> LabeledBatch {
        let mut pool = batch.clone();
        pool.extend(self.drain());
        pool
    }
}
