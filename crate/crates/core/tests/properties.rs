use std::collections::BTreeMap;

use lapnet_core::autodiff::Graph;
use lapnet_core::ingest::{normalize, synth, ClassGaussian, SyntheticSpec};
use lapnet_core::metrics::{forgetting, macro_f1};
use lapnet_core::*;
use proptest::prelude::*;

fn matrix(rows: &[Vec<f64>]) -> Tensor {
    let cols = rows.first().map_or(0, Vec::len);
    Tensor::matrix(rows.len(), cols, rows.concat()).unwrap()
}

fn emb_rows(dim: usize, max: usize) -> impl Strategy<Value = Vec<(Vec<f64>, u32)>> {
    prop::collection::vec((prop::collection::vec(-5.0..5.0f64, dim), 0u32..4), 1..max)
}

fn contrastive_value(rows: &[(Vec<f64>, u32)], margin: f64) -> f64 {
    let mut g = Graph::new();
    let e = g.input(&matrix(&rows.iter().map(|r| r.0.clone()).collect::<Vec<_>>())).unwrap();
    let labels: Vec<ClassId> = rows.iter().map(|r| ClassId(r.1)).collect();
    let (v, _, _) = losses::contrastive(&mut g, e, &labels, margin).unwrap();
    g.scalar(v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn online_averaging_matches_batch_mean(chunks in prop::collection::vec(emb_rows(3, 8), 1..6)) {
        let mut mem = PrototypeMemory::new(3);
        let mut all: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
        for c in &chunks {
            let labels: Vec<ClassId> = c.iter().map(|r| ClassId(r.1)).collect();
            mem.update_with_embeddings(&matrix(&c.iter().map(|r| r.0.clone()).collect::<Vec<_>>()), &labels).unwrap();
            for (v, k) in c {
                all.entry(*k).or_default().push(v.clone());
            }
        }
        prop_assert_eq!(mem.len(), all.len());
        for (k, vs) in &all {
            let p = mem.get(ClassId(*k)).unwrap();
            prop_assert_eq!(p.count as usize, vs.len());
            for d in 0..3 {
                let mean = vs.iter().map(|v| v[d]).sum::<f64>() / vs.len() as f64;
                prop_assert!((p.vector[d] - mean).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn softmax_ignores_common_translation(rows in emb_rows(2, 6), shift in prop::collection::vec(-10.0..10.0f64, 2)) {
        let protos: Vec<(Vec<f64>, u32)> = vec![(vec![0.0, 1.0], 0), (vec![2.0, -1.0], 1), (vec![-1.5, 0.5], 2)];
        let build = |s: &[f64]| {
            let mut m = PrototypeMemory::new(2);
            for (v, k) in &protos {
                m.insert(ClassId(*k), v.iter().zip(s).map(|(a, b)| a + b).collect(), 1).unwrap();
            }
            m
        };
        let emb = |s: &[f64]| matrix(&rows.iter().map(|r| r.0.iter().zip(s).map(|(a, b)| a + b).collect()).collect::<Vec<_>>());
        let a = build(&[0.0, 0.0]).distributions(&emb(&[0.0, 0.0])).unwrap();
        let b = build(&shift).distributions(&emb(&shift)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for k in 0..3 {
                prop_assert!((x.probability(ClassId(k)) - y.probability(ClassId(k))).abs() < 1e-9);
            }
            let total: f64 = (0..3).map(|k| x.probability(ClassId(k))).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adaptation_contracts_toward_replay_mean(
        p in prop::collection::vec(-5.0..5.0f64, 3),
        replay in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 3), 1..6),
        alpha in 0.0..=1.0f64,
    ) {
        let mut mem = PrototypeMemory::new(3);
        mem.insert(ClassId(0), p.clone(), 7).unwrap();
        let labels = vec![ClassId(0); replay.len()];
        mem.adapt_with_embeddings(&matrix(&replay), &labels, alpha).unwrap();
        let mean: Vec<f64> = (0..3).map(|d| replay.iter().map(|r| r[d]).sum::<f64>() / replay.len() as f64).collect();
        let dist = |a: &[f64]| a.iter().zip(&mean).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let after = mem.get(ClassId(0)).unwrap();
        prop_assert!((dist(&after.vector) - alpha * dist(&p)).abs() < 1e-9);
        prop_assert_eq!(after.count, 7);
    }

    #[test]
    fn contrastive_is_nonnegative_and_symmetric(rows in emb_rows(2, 8), margin in 0.1..4.0f64, rot in 0usize..8) {
        let v = contrastive_value(&rows, margin);
        prop_assert!(v >= 0.0);
        let mut rotated = rows.clone();
        rotated.rotate_left(rot % rows.len());
        prop_assert!((contrastive_value(&rotated, margin) - v).abs() < 1e-9);
        let shifted: Vec<_> = rows.iter().map(|(e, k)| (e.iter().map(|x| x + 3.25).collect(), *k)).collect();
        prop_assert!((contrastive_value(&shifted, margin) - v).abs() < 1e-9);
    }

    #[test]
    fn contrastive_grows_with_margin(rows in emb_rows(2, 8), m in 0.1..3.0f64, dm in 0.0..2.0f64) {
        prop_assert!(contrastive_value(&rows, m + dm) >= contrastive_value(&rows, m) - 1e-12);
    }

    #[test]
    fn replay_respects_capacity_and_covers_classes(
        labels in prop::collection::vec(0u32..5, 1..60),
        cap in 1usize..8,
        seed in any::<u64>(),
    ) {
        let pool: LabeledBatch = labels.iter().enumerate().map(|(i, &k)| Sample {
            id: SampleId(i as u64),
            label: ClassId(k),
            window: Window::new(InputSpec::new(1, 1), vec![i as f64]).unwrap(),
        }).collect();
        let mut buf = ReplayBuffer::new(cap, seed).unwrap();
        buf.update(&pool);
        for (k, members) in pool.by_class() {
            let kept = buf.class_samples(k);
            prop_assert_eq!(kept.len(), members.len().min(cap));
            for s in kept {
                prop_assert!(members.iter().any(|m| m.id == s.id));
            }
            let mut ids: Vec<_> = kept.iter().map(|s| s.id).collect();
            ids.dedup();
            prop_assert_eq!(ids.len(), kept.len());
        }
        prop_assert_eq!(buf.classes(), pool.classes());
    }

    #[test]
    fn stream_caps_and_covers_pool(sizes in prop::collection::vec(0usize..40, 1..9), seed in any::<u64>()) {
        let mut id = 0;
        let mut samples = Vec::new();
        for (k, &n) in sizes.iter().enumerate() {
            for _ in 0..n {
                samples.push(Sample { id: SampleId(id), label: ClassId(k as u32), window: Window::new(InputSpec::new(1, 1), vec![0.0]).unwrap() });
                id += 1;
            }
        }
        let pool = LabeledBatch::new(samples);
        let mut seen = Vec::new();
        for (i, b) in StreamGenerator::new(&pool, StreamConfig::default(), seed).unwrap().enumerate() {
            prop_assert_eq!(b.step, i);
            prop_assert!(b.batch.len() <= 20 && !b.batch.is_empty());
            prop_assert!(b.batch.classes().len() <= 5);
            seen.extend(b.batch.ids());
        }
        seen.sort_unstable();
        prop_assert_eq!(seen, pool.ids());
    }

    #[test]
    fn forgetting_responds_monotonically(
        history in prop::collection::vec(prop::collection::vec(0.0..=1.0f64, 3), 2..6),
        drop in 0.0..=1.0f64,
        j in 0usize..3,
    ) {
        let classes = [ClassId(0), ClassId(1), ClassId(2)];
        let h: Vec<BTreeMap<ClassId, f64>> = history.iter().map(|r| classes.iter().copied().zip(r.iter().copied()).collect()).collect();
        let t = h.len() - 1;
        let f = forgetting(&h, t, &classes);
        prop_assert!((0.0..=1.0).contains(&f));
        let mut lowered = h.clone();
        let cur = lowered[t][&classes[j]];
        lowered[t].insert(classes[j], cur * (1.0 - drop));
        prop_assert!(forgetting(&lowered, t, &classes) >= f - 1e-12);
    }

    #[test]
    fn macro_f1_is_permutation_and_relabel_invariant(
        pairs in prop::collection::vec((0u32..4, 0u32..4), 1..50),
        rot in 0usize..50,
    ) {
        let classes: Vec<ClassId> = (0..4).map(ClassId).collect();
        let preds: Vec<ClassId> = pairs.iter().map(|p| ClassId(p.0)).collect();
        let labels: Vec<ClassId> = pairs.iter().map(|p| ClassId(p.1)).collect();
        let base = macro_f1(&preds, &labels, &classes);
        let mut rp = pairs.clone();
        rp.rotate_left(rot % pairs.len());
        let preds2: Vec<ClassId> = rp.iter().map(|p| ClassId(p.0)).collect();
        let labels2: Vec<ClassId> = rp.iter().map(|p| ClassId(p.1)).collect();
        prop_assert!((macro_f1(&preds2, &labels2, &classes) - base).abs() < 1e-12);
        let relabel = |k: ClassId| ClassId(10 + (k.0 + 1) % 4);
        let classes3: Vec<ClassId> = classes.iter().map(|&k| relabel(k)).collect();
        let preds3: Vec<ClassId> = preds.iter().map(|&k| relabel(k)).collect();
        let labels3: Vec<ClassId> = labels.iter().map(|&k| relabel(k)).collect();
        prop_assert!((macro_f1(&preds3, &labels3, &classes3) - base).abs() < 1e-12);
    }

    #[test]
    fn normalization_uses_training_statistics_only(
        train in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 4), 2..20),
        other in prop::collection::vec(prop::collection::vec(-30.0..30.0f64, 4), 1..20),
    ) {
        let spec = InputSpec::new(2, 2);
        let to_batch = |rows: &[Vec<f64>]| -> LabeledBatch {
            rows.iter().enumerate().map(|(i, v)| Sample { id: SampleId(i as u64), label: ClassId(0), window: Window::new(spec, v.clone()).unwrap() }).collect()
        };
        let (tr, _, stats_a) = normalize(&to_batch(&train), &[&to_batch(&other)], spec).unwrap();
        let (_, _, stats_b) = normalize(&to_batch(&train), &[], spec).unwrap();
        prop_assert_eq!(&stats_a, &stats_b);
        for c in 0..2 {
            let vals: Vec<f64> = tr.iter().flat_map(|s| s.window.channel(spec, c).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            prop_assert!(mean.abs() < 1e-9);
        }
    }
}

#[test]
fn synthetic_data_is_seed_deterministic() {
    let spec = SyntheticSpec::benchmark(&Default::default(), 11);
    let a = synth(&spec).unwrap();
    let b = synth(&spec).unwrap();
    assert_eq!(a, b);
    let c = synth(&SyntheticSpec { seed: 12, ..spec }).unwrap();
    assert_ne!(a.train, c.train);
}

#[test]
fn far_apart_classes_are_separable_by_nearest_mean() {
    let input = InputSpec::new(2, 4);
    let class = |k: u32, m: f64| ClassGaussian { label: ClassId(k), mean: vec![m; 8], std: vec![1.0; 8] };
    let spec = SyntheticSpec { input, classes: vec![class(0, -3.0), class(1, 3.0)], train_per_class: 300, test_per_class: 300, seed: 5, drift: None };
    let ds = synth(&spec).unwrap();
    let means: Vec<Vec<f64>> = [0, 1]
        .iter()
        .map(|&k| {
            let rows: Vec<&Sample> = ds.train.iter().filter(|s| s.label == ClassId(k)).collect();
            (0..8).map(|d| rows.iter().map(|s| s.window.values()[d]).sum::<f64>() / rows.len() as f64).collect()
        })
        .collect();
    let correct = ds
        .test
        .iter()
        .filter(|s| {
            let d = |m: &Vec<f64>| s.window.values().iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let pred = if d(&means[0]) <= d(&means[1]) { 0 } else { 1 };
            ClassId(pred) == s.label
        })
        .count();
    assert!(correct as f64 / ds.test.len() as f64 >= 0.99);
}

#[test]
fn zero_drift_matches_no_drift() {
    let spec = SyntheticSpec::benchmark(&Default::default(), 3);
    let zero = SyntheticSpec { drift: Some(vec![0.0; spec.input.width()]), ..spec.clone() };
    assert_eq!(synth(&spec).unwrap(), synth(&zero).unwrap());
}

#[test]
fn replay_selection_is_uniform() {
    // 12 candidates, capacity 6: every candidate should be kept half the time.
    let pool: LabeledBatch = (0..12)
        .map(|i| Sample { id: SampleId(i), label: ClassId(0), window: Window::new(InputSpec::new(1, 1), vec![0.0]).unwrap() })
        .collect();
    let trials = 10_000;
    let mut hits = [0usize; 12];
    let mut buf = ReplayBuffer::new(6, 99).unwrap();
    for _ in 0..trials {
        buf.update(&pool);
        for s in buf.class_samples(ClassId(0)) {
            hits[s.id.0 as usize] += 1;
        }
    }
    for h in hits {
        let f = h as f64 / trials as f64;
        assert!((f - 0.5).abs() < 0.02, "frequency {f}");
    }
}
