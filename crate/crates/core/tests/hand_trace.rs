//! The hand-traced step from docs/oracle_worksheet.md.

use lapnet_core::*;

fn sample(id: u64, class: u32, x: f64) -> Sample {
    Sample { id: SampleId(id), label: ClassId(class), window: Window::new(InputSpec::new(1, 1), vec![x]).unwrap() }
}

fn learner() -> Learner {
    let config = EncoderConfig { architecture: Architecture::Dense { hidden: vec![] }, activation: Activation::Relu, embedding_dim: 1 };
    let params = vec![Tensor::matrix(1, 1, vec![1.0]).unwrap(), Tensor::new(vec![1], vec![0.0]).unwrap()];
    let encoder = Encoder::from_params(InputSpec::new(1, 1), config, params).unwrap();
    let mut memory = PrototypeMemory::new(1);
    memory.insert(ClassId(0), vec![0.0], 2).unwrap();
    memory.insert(ClassId(1), vec![2.0], 2).unwrap();
    let mut replay = ReplayBuffer::new(6, 0).unwrap();
    replay.update(&LabeledBatch::new(vec![sample(100, 0, 0.0), sample(101, 1, 2.0)]));
    Learner { encoder, memory, replay, optimizer: OptimizerState::sgd(0.1).unwrap() }
}

fn close(a: f64, b: f64) {
    assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
}

#[test]
fn one_step_matches_worksheet() {
    let mut l = learner();
    let batch = LabeledBatch::new(vec![sample(1, 0, 0.5), sample(2, 1, 1.25), sample(3, 1, 2.5)]);
    let cfg = ContinualConfig { margin: 1.0, refresh_ratio: 0.5, ..Default::default() };
    let report = l.continual_step(&batch, &cfg, &mut trainer::NoObserver).unwrap();

    close(report.ce_term, 0.11983660875219361);
    close(report.contrastive_term, 0.30625);
    close(report.total, 0.42608660875219361);
    assert_eq!((report.positive_pairs, report.negative_pairs), (4, 6));

    close(l.encoder.params()[0].data()[0], 0.98953170774795292);
    close(l.encoder.params()[1].data()[0], 0.015842390638839103);

    let p0 = l.memory.get(ClassId(0)).unwrap();
    let p1 = l.memory.get(ClassId(1)).unwrap();
    close(p0.vector[0], 0.091254528652752885);
    close(p1.vector[0], 1.9662029030673725);
    assert_eq!((p0.count, p1.count), (3, 4));

    let ids = |k: u32| {
        let mut v: Vec<u64> = l.replay.class_samples(ClassId(k)).iter().map(|s| s.id.0).collect();
        v.sort_unstable();
        v
    };
    assert_eq!(ids(0), vec![1, 100]);
    assert_eq!(ids(1), vec![2, 3, 101]);
}

#[test]
fn memory_update_uses_the_old_encoder() {
    struct Peek(Vec<(trainer::Phase, f64, f64, f64)>);
    impl trainer::StepObserver for Peek {
        fn phase(&mut self, phase: trainer::Phase, l: &Learner) {
            let p = |k| l.memory.get(ClassId(k)).unwrap().vector[0];
            self.0.push((phase, p(0), p(1), l.encoder.params()[0].data()[0]));
        }
    }
    let mut l = learner();
    let batch = LabeledBatch::new(vec![sample(1, 0, 0.5), sample(2, 1, 1.25), sample(3, 1, 2.5)]);
    let mut peek = Peek(Vec::new());
    l.continual_step(&batch, &ContinualConfig::default(), &mut peek).unwrap();
    let phases: Vec<_> = peek.0.iter().map(|p| p.0).collect();
    use trainer::Phase::*;
    assert_eq!(phases, vec![MemoryUpdate, ModelUpdate, Adaptation, BufferUpdate]);
    let (_, p0, p1, w) = peek.0[0];
    close(p0, 1.0 / 6.0);
    close(p1, 1.9375);
    assert_eq!(w, 1.0);
}
