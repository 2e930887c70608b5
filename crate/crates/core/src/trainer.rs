//! Offline episodic pretraining and the continual learning loop.
//!
//! A continual step on batch `D_t` runs four phases in a fixed order:
//!
//! 1. fold `D_t` into the prototype memory with the encoder from `t-1`
//!    (creating prototypes for unseen classes);
//! 2. form the query set `Q = D_t ∪ M_r` (or just `D_t` without experience
//!    replay), compute the loss and take an optimizer step;
//! 3. refresh prototypes of replayed classes under the updated encoder;
//! 4. resample the replay buffer from `D_t ∪ M_r`.
//!
//! Each component can be switched off, which yields the ablations and the
//! online finetuning baseline.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{forward_backward, Graph};
use crate::data::{ClassId, LabeledBatch, Sample};
use crate::encoder::Encoder;
use crate::error::{contract, Result};
use crate::losses::{self, LossReport};
use crate::metrics::{macro_f1, per_class_f1, Evaluation, MetricsLedger};
use crate::optim::{OptimizerState, UpdateRule};
use crate::protomem::PrototypeMemory;
use crate::replay::ReplayBuffer;
use crate::stream::StreamBatch;
use crate::tensor::Tensor;

/// Which parts of the continual method are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Keep a replay buffer `M_r` at all.
    pub replay_buffer: bool,
    /// Mix the replay buffer into the training query set.
    pub experience_replay: bool,
    pub contrastive: bool,
    /// Replay-based prototype adaptation.
    pub adapt: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::FULL
    }
}

impl AblationFlags {
    pub const FULL: Self = Self { replay_buffer: true, experience_replay: true, contrastive: true, adapt: true };
    pub const NONE: Self = Self { replay_buffer: false, experience_replay: false, contrastive: false, adapt: false };

    /// Dependency violations between flags.
    pub fn violations(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.adapt && !self.replay_buffer {
            v.push("prototype adaptation requires the replay buffer");
        }
        if self.experience_replay && !self.replay_buffer {
            v.push("experience replay requires the replay buffer");
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContinualConfig {
    pub refresh_ratio: f64,
    pub margin: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub max_classes_per_batch: usize,
    pub learning_rate: f64,
    pub epochs_per_batch: usize,
    pub flags: AblationFlags,
    pub eval_stride: usize,
    pub seed: u64,
}

impl Default for ContinualConfig {
    fn default() -> Self {
        Self {
            refresh_ratio: 0.5,
            margin: 1.0,
            replay_capacity: 6,
            batch_size: 20,
            max_classes_per_batch: 5,
            learning_rate: 0.001,
            epochs_per_batch: 1,
            flags: AblationFlags::FULL,
            eval_stride: 1,
            seed: 0,
        }
    }
}

impl ContinualConfig {
    pub fn violations(&self) -> Vec<alloc::string::String> {
        let mut v: Vec<alloc::string::String> = self.flags.violations().into_iter().map(Into::into).collect();
        if !(0.0..=1.0).contains(&self.refresh_ratio) {
            v.push(alloc::format!("refresh_ratio {} outside [0, 1]", self.refresh_ratio));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            v.push(alloc::format!("margin {} must be positive", self.margin));
        }
        if self.replay_capacity == 0 {
            v.push("replay_capacity must be positive".into());
        }
        if self.batch_size == 0 {
            v.push("batch_size must be positive".into());
        }
        if self.max_classes_per_batch == 0 {
            v.push("max_classes_per_batch must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            v.push(alloc::format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.epochs_per_batch == 0 {
            v.push("epochs_per_batch must be positive".into());
        }
        if self.eval_stride == 0 {
            v.push("eval_stride must be positive".into());
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Sample budget per episode; episodes per epoch are `⌈N / batch_size⌉`.
    pub batch_size: usize,
    pub support_per_class: usize,
    pub query_per_class: usize,
    pub learning_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 100, batch_size: 200, support_per_class: 5, query_per_class: 15, learning_rate: 0.001 }
    }
}

impl PretrainConfig {
    pub fn violations(&self) -> Vec<alloc::string::String> {
        let mut v = Vec::new();
        if self.batch_size == 0 {
            v.push("pretrain batch_size must be positive".into());
        }
        if self.support_per_class == 0 || self.query_per_class == 0 {
            v.push("support and query sizes must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            v.push(alloc::format!("pretrain learning_rate {} must be positive", self.learning_rate));
        }
        v
    }
}

/// Ordered phases of a continual step, reported to a [`StepObserver`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    MemoryUpdate,
    ModelUpdate,
    Adaptation,
    BufferUpdate,
}

/// Instrumentation hooks for the training loop. Every method has a no-op
/// default.
pub trait StepObserver {
    fn phase(&mut self, _phase: Phase, _learner: &Learner) {}
    /// The set used for the gradient step.
    fn query_set(&mut self, _query: &LabeledBatch) {}
    fn evaluated(&mut self, _step: usize, _learner: &Learner) {}
    fn batch(&mut self, _batch: &StreamBatch) {}
}

pub struct NoObserver;

impl StepObserver for NoObserver {}

/// Trainable state carried through the stream.
#[derive(Debug, Clone)]
pub struct Learner {
    pub encoder: Encoder,
    pub memory: PrototypeMemory,
    pub replay: ReplayBuffer,
    pub optimizer: OptimizerState,
}

fn take_per_class(rng: &mut ChaCha8Rng, samples: &[&Sample], support: usize, query: usize) -> (Vec<Sample>, Vec<Sample>) {
    let n = samples.len();
    let s = if n >= 2 { support.min(n - 1) } else { 1 };
    if s < support {
        log::warn!("class {} has {} samples; shrinking support set to {}", samples[0].label, n, s);
    }
    let q = query.min(n - s);
    let picks = rand::seq::index::sample(rng, n, s + q).into_vec();
    let sup = picks[..s].iter().map(|&i| samples[i].clone()).collect();
    let qry = picks[s..].iter().map(|&i| samples[i].clone()).collect();
    (sup, qry)
}

/// Episodic prototypical training of `encoder` on `data`.
///
/// Each episode samples a support and a query set from every class. Support
/// embeddings are averaged into episode prototypes (gradient flows through
/// them) and the loss is the query NLL under the distance softmax.
pub fn train_episodic(encoder: &mut Encoder, data: &LabeledBatch, cfg: &PretrainConfig, seed: u64) -> Result<Vec<f64>> {
    if let Some(v) = cfg.violations().into_iter().next() {
        return Err(contract!("{}", v));
    }
    if data.is_empty() {
        return Err(contract!("pretraining data is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = OptimizerState::new(UpdateRule::ADAM, cfg.learning_rate)?;
    let grouped = data.by_class();
    let classes: Vec<ClassId> = grouped.keys().copied().collect();
    let episodes = data.len().div_ceil(cfg.batch_size);
    let input = encoder.input_spec();
    let mut losses = Vec::with_capacity(cfg.epochs * episodes);
    for _ in 0..cfg.epochs {
        for _ in 0..episodes {
            let mut support = Vec::new();
            let mut query = Vec::new();
            let mut support_class = Vec::new();
            let mut query_targets = Vec::new();
            for (ci, k) in classes.iter().enumerate() {
                let (s, q) = take_per_class(&mut rng, &grouped[k], cfg.support_per_class, cfg.query_per_class);
                support_class.extend(core::iter::repeat_n(ci, s.len()));
                query_targets.extend(core::iter::repeat_n(ci, q.len()));
                support.extend(s);
                query.extend(q);
            }
            if query.is_empty() {
                return Err(contract!("every class has a single sample; no query set can be formed"));
            }
            // Averaging matrix: prototypes = A · support embeddings.
            let (nc, ns) = (classes.len(), support.len());
            let mut avg = vec![0.0; nc * ns];
            let mut counts = vec![0usize; nc];
            support_class.iter().for_each(|&c| counts[c] += 1);
            for (j, &c) in support_class.iter().enumerate() {
                avg[c * ns + j] = 1.0 / counts[c] as f64;
            }
            let avg = Tensor::matrix(nc, ns, avg)?;
            let xs = LabeledBatch::new(support).to_matrix(input)?;
            let xq = LabeledBatch::new(query).to_matrix(input)?;
            let enc: &Encoder = encoder;
            let mut params = enc.params().to_vec();
            let loss = forward_backward(&mut params, |g, vars| {
                let xs = g.input(&xs)?;
                let xq = g.input(&xq)?;
                let a = g.input(&avg)?;
                let es = enc.forward(g, vars, xs)?;
                let eq = enc.forward(g, vars, xq)?;
                let protos = g.matmul(a, es)?;
                losses::prototype_nll(g, eq, protos, &query_targets)
            })?;
            opt.step(&mut params)?;
            encoder.params_mut().clone_from_slice(&params);
            losses.push(loss);
        }
    }
    Ok(losses)
}

/// Result of offline pretraining: `θ_0`, the base prototype memory built
/// from all of `D_0`, and a replay buffer seeded from `D_0`.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub encoder: Encoder,
    pub memory: PrototypeMemory,
    pub replay: ReplayBuffer,
    pub losses: Vec<f64>,
}

pub fn offline_pretrain(
    mut encoder: Encoder,
    base: &LabeledBatch,
    cfg: &PretrainConfig,
    replay_capacity: usize,
    seed: u64,
) -> Result<Pretrained> {
    let losses = if cfg.epochs > 0 { train_episodic(&mut encoder, base, cfg, seed)? } else { Vec::new() };
    let memory = PrototypeMemory::init_from_data(&encoder, base)?;
    let mut replay = ReplayBuffer::new(replay_capacity, seed.wrapping_add(0x9e37_79b9_7f4a_7c15))?;
    replay.update(base);
    Ok(Pretrained { encoder, memory, replay, losses })
}

impl Learner {
    pub fn new(pre: Pretrained, learning_rate: f64) -> Result<Self> {
        Ok(Self {
            encoder: pre.encoder,
            memory: pre.memory,
            replay: pre.replay,
            optimizer: OptimizerState::new(UpdateRule::ADAM, learning_rate)?,
        })
    }

    /// One pass of the continual update on `batch`.
    pub fn continual_step(&mut self, batch: &LabeledBatch, cfg: &ContinualConfig, obs: &mut dyn StepObserver) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(contract!("continual step needs a non-empty batch"));
        }
        if let Some(v) = cfg.flags.violations().into_iter().next() {
            return Err(contract!("{}", v));
        }
        let flags = cfg.flags;

        self.memory.online_update(&self.encoder, batch)?;
        obs.phase(Phase::MemoryUpdate, self);

        let stored = if flags.replay_buffer { self.replay.drain() } else { LabeledBatch::default() };
        let mut query = batch.clone();
        if flags.experience_replay {
            query.extend(stored.samples.iter().cloned());
        }
        obs.query_set(&query);
        let x = query.to_matrix(self.encoder.input_spec())?;
        let labels = query.labels();
        let margin = if flags.contrastive { Some(cfg.margin) } else { None };
        let mut report = LossReport::default();
        for _ in 0..cfg.epochs_per_batch.max(1) {
            let enc = &self.encoder;
            let memory = &self.memory;
            let mut params = enc.params().to_vec();
            let mut graph_report = LossReport::default();
            forward_backward(&mut params, |g: &mut Graph, vars| {
                let xv = g.input(&x)?;
                let emb = enc.forward(g, vars, xv)?;
                let t = losses::combined(g, emb, &labels, memory, margin)?;
                graph_report = t.report(g)?;
                Ok(t.total)
            })?;
            self.optimizer.step(&mut params)?;
            self.encoder.params_mut().clone_from_slice(&params);
            report = graph_report;
        }
        obs.phase(Phase::ModelUpdate, self);

        if flags.adapt {
            self.memory.replay_adapt(&self.encoder, &self.replay, cfg.refresh_ratio)?;
            obs.phase(Phase::Adaptation, self);
        }

        if flags.replay_buffer {
            let mut pool = batch.clone();
            pool.extend(stored);
            self.replay.update(&pool);
            obs.phase(Phase::BufferUpdate, self);
        }
        Ok(report)
    }
}

/// Held-out evaluation sets.
#[derive(Debug, Clone, Default)]
pub struct EvalSets {
    pub base: LabeledBatch,
    pub new: LabeledBatch,
}

/// Scores the current model on the base test set plus the test data of the
/// new classes seen so far.
pub fn evaluate(encoder: &Encoder, memory: &PrototypeMemory, eval: &EvalSets, base_classes: &[ClassId]) -> Result<Evaluation> {
    let seen_new: Vec<ClassId> = memory.classes().into_iter().filter(|k| !base_classes.contains(k)).collect();
    let mut classes_seen: Vec<ClassId> = base_classes.iter().copied().chain(seen_new.iter().copied()).collect();
    classes_seen.sort_unstable();
    classes_seen.dedup();

    let base_part = &eval.base;
    let new_part = eval.new.filter_classes(|k| seen_new.contains(&k));
    let predict = |b: &LabeledBatch| -> Result<Vec<ClassId>> {
        if b.is_empty() {
            Ok(Vec::new())
        } else {
            memory.classify(&encoder.embed_batch(b)?)
        }
    };
    let base_pred = predict(base_part)?;
    let new_pred = predict(&new_part)?;
    let base_labels = base_part.labels();
    let new_labels = new_part.labels();

    let all_pred: Vec<ClassId> = base_pred.iter().chain(&new_pred).copied().collect();
    let all_labels: Vec<ClassId> = base_labels.iter().chain(&new_labels).copied().collect();
    Ok(Evaluation {
        per_class: per_class_f1(&all_pred, &all_labels, &classes_seen),
        base_f1: macro_f1(&base_pred, &base_labels, base_classes),
        new_f1: if seen_new.is_empty() { None } else { Some(macro_f1(&new_pred, &new_labels, &seen_new)) },
        overall_f1: macro_f1(&all_pred, &all_labels, &classes_seen),
        classes_seen,
    })
}

/// Output of [`run`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub ledger: MetricsLedger,
    pub learner: Learner,
    pub steps: usize,
}

/// Streams every batch through [`Learner::continual_step`], evaluating after
/// pretraining and then every `eval_stride` steps (and after the last one).
pub fn run(
    mut learner: Learner,
    stream: impl IntoIterator<Item = StreamBatch>,
    cfg: &ContinualConfig,
    eval: &EvalSets,
    base_classes: &[ClassId],
    reference: Option<BTreeMap<ClassId, f64>>,
    obs: &mut dyn StepObserver,
) -> Result<RunOutput> {
    let mut ledger = MetricsLedger::new(base_classes.to_vec(), reference);
    let e = evaluate(&learner.encoder, &learner.memory, eval, base_classes)?;
    ledger.push(0, e, None)?;
    obs.evaluated(0, &learner);

    let mut step = 0;
    let mut pending: Option<LossReport> = None;
    for b in stream {
        obs.batch(&b);
        let report = learner.continual_step(&b.batch, cfg, obs)?;
        step += 1;
        pending = Some(report);
        if step % cfg.eval_stride == 0 {
            let e = evaluate(&learner.encoder, &learner.memory, eval, base_classes)?;
            ledger.push(step, e, pending.take())?;
            obs.evaluated(step, &learner);
        }
    }
    if pending.is_some() {
        let e = evaluate(&learner.encoder, &learner.memory, eval, base_classes)?;
        ledger.push(step, e, pending.take())?;
        obs.evaluated(step, &learner);
    }
    Ok(RunOutput { ledger, learner, steps: step })
}
