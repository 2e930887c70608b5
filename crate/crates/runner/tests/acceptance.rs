//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use lapnet_core::ingest::{synth, ClassGaussian, SyntheticSpec};
use lapnet_core::losses::combined;
use lapnet_core::metrics::{class_forgetting, forgetting, intransigence, macro_f1, per_class_f1};
use lapnet_core::trainer::NoObserver;
use lapnet_core::*;
use lapnet_runner::summary::SummaryRow;
use lapnet_runner::{run_experiment, run_sweep, ExperimentConfig, Method, SweepParam};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn benchmark_config() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/benchmark.toml");
    ExperimentConfig::load(&path).expect("benchmark config")
}

fn random_encoder(rng: &mut ChaCha8Rng, input: InputSpec, activation: Activation) -> Encoder {
    let architecture = if rng.random_bool(0.5) || input.timesteps < 3 {
        Architecture::Dense { hidden: vec![rng.random_range(2..6)] }
    } else {
        Architecture::TemporalConv { filters: rng.random_range(1..3), kernel: 2, conv_layers: 1, hidden: vec![3] }
    };
    let config = EncoderConfig { architecture, activation, embedding_dim: rng.random_range(1..4) };
    Encoder::init(input, config, rng.random()).unwrap()
}

/// Gaussian classes with random means, `per_class` training samples each.
fn random_dataset(rng: &mut ChaCha8Rng, input: InputSpec, classes: u32, per_class: usize) -> Dataset {
    let classes = (0..classes)
        .map(|k| ClassGaussian {
            label: ClassId(k),
            mean: (0..input.width()).map(|_| rng.random_range(-2.0..2.0)).collect(),
            std: vec![rng.random_range(0.2..1.0); input.width()],
        })
        .collect();
    synth(&SyntheticSpec { input, classes, train_per_class: per_class, test_per_class: 1, seed: rng.random(), drift: None })
        .unwrap()
}

fn c1_online_averaging() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let input = InputSpec::new(rng.random_range(1..3), rng.random_range(2..5));
        let (classes, per_class) = (rng.random_range(2..7), rng.random_range(1..40));
        let ds = random_dataset(&mut rng, input, classes, per_class);
        let enc = random_encoder(&mut rng, input, Activation::Relu);
        let stream = StreamGenerator::new(&ds.train, StreamConfig::default(), rng.random()).unwrap();
        let mut memory = PrototypeMemory::new(enc.embedding_dim());
        for b in stream {
            memory.online_update(&enc, &b.batch).unwrap();
        }
        let emb = enc.embed_batch(&ds.train).unwrap();
        let mut sums: BTreeMap<ClassId, (Vec<f64>, u64)> = BTreeMap::new();
        for (i, y) in ds.train.labels().into_iter().enumerate() {
            let e = sums.entry(y).or_insert((vec![0.0; emb.cols()], 0));
            for (s, v) in e.0.iter_mut().zip(emb.row(i)) {
                *s += v;
            }
            e.1 += 1;
        }
        ensure(memory.classes() == sums.keys().copied().collect::<Vec<_>>(), || "class sets differ".into())?;
        for (k, (sum, n)) in &sums {
            let p = memory.get(*k).unwrap();
            ensure(p.count == *n, || format!("class {k}: count {} vs {n}", p.count))?;
            for (a, s) in p.vector.iter().zip(sum) {
                worst = worst.max((a - s / *n as f64).abs());
            }
        }
    }
    let t = start.elapsed();
    ensure(worst <= 1e-9, || format!("max deviation {worst:.3e} > 1e-9"))?;
    ensure(t < Duration::from_secs(10), || format!("took {t:?}"))?;
    Ok(format!("100 streams, max deviation {worst:.1e}, {:.2} s", t.as_secs_f64()))
}

fn replay_means(enc: &Encoder, replay: &ReplayBuffer) -> BTreeMap<ClassId, Vec<f64>> {
    replay
        .classes()
        .into_iter()
        .map(|k| {
            let emb = enc.embed(replay.class_samples(k).iter().map(|s| &s.window)).unwrap();
            let n = emb.rows() as f64;
            (k, (0..emb.cols()).map(|c| (0..emb.rows()).map(|r| emb.row(r)[c]).sum::<f64>() / n).collect())
        })
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn c2_adaptation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst0, mut worst_c) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let input = InputSpec::new(2, 3);
        let classes = rng.random_range(2..6);
        let ds = random_dataset(&mut rng, input, classes, 20);
        let enc = random_encoder(&mut rng, input, Activation::Tanh);
        let mut memory = PrototypeMemory::new(enc.embedding_dim());
        for k in ds.classes() {
            memory.insert(k, (0..enc.embedding_dim()).map(|_| rng.random_range(-3.0..3.0)).collect(), 7).unwrap();
        }
        let mut replay = ReplayBuffer::new(6, rng.random()).unwrap();
        replay.update(&ds.train.filter_classes(|k| k.0 % 2 == 0 || k.0 == 1));
        let means = replay_means(&enc, &replay);

        let mut same = memory.clone();
        same.replay_adapt(&enc, &replay, 1.0).unwrap();
        ensure(same == memory, || "alpha = 1 changed the memory".into())?;

        let mut zero = memory.clone();
        zero.replay_adapt(&enc, &replay, 0.0).unwrap();
        for (k, m) in &means {
            for (a, b) in zero.get(*k).unwrap().vector.iter().zip(m) {
                worst0 = worst0.max((a - b).abs());
            }
        }
        for alpha in [0.25, 0.5, 0.75] {
            let mut adapted = memory.clone();
            adapted.replay_adapt(&enc, &replay, alpha).unwrap();
            for (k, p) in memory.iter() {
                let q = adapted.get(k).unwrap();
                ensure(q.count == p.count, || "adaptation changed a count".into())?;
                match means.get(&k) {
                    Some(m) => worst_c = worst_c.max((dist(&q.vector, m) - alpha * dist(&p.vector, m)).abs()),
                    None => ensure(q == p, || format!("class {k} has no replay samples but moved"))?,
                }
            }
        }
    }
    ensure(worst0 <= 1e-12, || format!("alpha = 0 deviation {worst0:.3e} > 1e-12"))?;
    ensure(worst_c <= 1e-9, || format!("contraction deviation {worst_c:.3e} > 1e-9"))?;
    Ok(format!("50 instances, alpha=1 bitwise, alpha=0 within {worst0:.1e}, contraction within {worst_c:.1e}"))
}

fn c3_gradients() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut done, mut worst) = (0, 0.0f64);
    let h = 1e-6;
    while done < 50 {
        let input = InputSpec::new(rng.random_range(1..3), rng.random_range(2..5));
        let classes = rng.random_range(2..4);
        let ds = random_dataset(&mut rng, input, classes, 4);
        let enc = random_encoder(&mut rng, input, Activation::Tanh);
        let d = enc.embedding_dim();
        let mut memory = PrototypeMemory::new(d);
        for k in 0..classes {
            memory.insert(ClassId(k), (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(), 1).unwrap();
        }
        let batch = LabeledBatch::new(ds.train.iter().filter(|_| rng.random_bool(0.6)).cloned().collect());
        if batch.len() < 2 {
            continue;
        }
        let margin = rng.random_range(0.2..3.0);
        let x = batch.to_matrix(input).unwrap();
        let labels = batch.labels();

        // Finite differences are meaningless across a hinge kink.
        let emb = enc.embed_matrix(&x).unwrap();
        let near_kink = (0..labels.len()).any(|i| {
            (i + 1..labels.len()).any(|j| labels[i] != labels[j] && (dist(emb.row(i), emb.row(j)).powi(2) - margin).abs() < 1e-3)
        });
        if near_kink {
            continue;
        }

        let loss = |params: &mut [Tensor]| {
            let e = Encoder::from_params(input, enc.config().clone(), params.to_vec()).unwrap();
            forward_backward(params, |g, vars| {
                let xv = g.input(&x)?;
                let out = e.forward(g, vars, xv)?;
                Ok(combined(g, out, &labels, &memory, Some(margin))?.total)
            })
            .unwrap()
        };
        let mut params = enc.params().to_vec();
        loss(&mut params);
        let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad().unwrap().to_vec()).collect();
        for pi in 0..params.len() {
            for j in 0..params[pi].len() {
                let mut plus = enc.params().to_vec();
                plus[pi].data_mut()[j] += h;
                let mut minus = enc.params().to_vec();
                minus[pi].data_mut()[j] -= h;
                let numeric = (loss(&mut plus) - loss(&mut minus)) / (2.0 * h);
                let a = analytic[pi][j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
                worst = worst.max(rel);
            }
        }
        done += 1;
    }
    let t = start.elapsed();
    ensure(worst <= 1e-4, || format!("max relative error {worst:.3e} > 1e-4"))?;
    ensure(t < Duration::from_secs(60), || format!("took {t:?}"))?;
    Ok(format!("50 instances, max relative error {worst:.1e}, {:.2} s", t.as_secs_f64()))
}

fn c4_hand_trace() -> Check {
    let sample = |id: u64, class: u32, x: f64| Sample {
        id: SampleId(id),
        label: ClassId(class),
        window: Window::new(InputSpec::new(1, 1), vec![x]).unwrap(),
    };
    let config = EncoderConfig { architecture: Architecture::Dense { hidden: vec![] }, activation: Activation::Relu, embedding_dim: 1 };
    let params = vec![Tensor::matrix(1, 1, vec![1.0]).unwrap(), Tensor::new(vec![1], vec![0.0]).unwrap()];
    let encoder = Encoder::from_params(InputSpec::new(1, 1), config, params).unwrap();
    let mut memory = PrototypeMemory::new(1);
    memory.insert(ClassId(0), vec![0.0], 2).unwrap();
    memory.insert(ClassId(1), vec![2.0], 2).unwrap();
    let mut replay = ReplayBuffer::new(6, 0).unwrap();
    replay.update(&LabeledBatch::new(vec![sample(100, 0, 0.0), sample(101, 1, 2.0)]));
    let mut l = Learner { encoder, memory, replay, optimizer: OptimizerState::sgd(0.1).unwrap() };

    let batch = LabeledBatch::new(vec![sample(1, 0, 0.5), sample(2, 1, 1.25), sample(3, 1, 2.5)]);
    let cfg = ContinualConfig { margin: 1.0, refresh_ratio: 0.5, ..Default::default() };
    let r = l.continual_step(&batch, &cfg, &mut NoObserver).map_err(|e| e.to_string())?;

    let p = |k: u32| l.memory.get(ClassId(k)).unwrap().clone();
    let checks = [
        ("cross-entropy", r.ce_term, 0.11983660875219361),
        ("contrastive", r.contrastive_term, 0.30625),
        ("total loss", r.total, 0.42608660875219361),
        ("weight", l.encoder.params()[0].data()[0], 0.98953170774795292),
        ("bias", l.encoder.params()[1].data()[0], 0.015842390638839103),
        ("prototype 0", p(0).vector[0], 0.091254528652752885),
        ("prototype 1", p(1).vector[0], 1.9662029030673725),
    ];
    for (name, got, want) in checks {
        ensure((got - want).abs() <= 1e-12 * want.abs().max(1.0), || format!("{name}: {got} vs worksheet {want}"))?;
    }
    ensure((p(0).count, p(1).count) == (3, 4), || "prototype counts".into())?;
    let mut ids: Vec<u64> = l.replay.drain().ids().into_iter().map(|s| s.0).collect();
    ids.sort_unstable();
    ensure(ids == vec![1, 2, 3, 100, 101], || format!("buffer holds {ids:?}"))?;
    Ok("all worksheet quantities match to 1e-12".into())
}

fn c5_stream() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut batches = 0;
    for _ in 0..1000 {
        let classes = rng.random_range(1..12);
        let samples: Vec<Sample> = (0..classes)
            .flat_map(|k| (0..rng.random_range(1..60)).map(move |i| (k, i)))
            .enumerate()
            .map(|(n, (k, _))| Sample {
                id: SampleId(n as u64),
                label: ClassId(k),
                window: Window::new(InputSpec::new(1, 1), vec![0.0]).unwrap(),
            })
            .collect();
        let pool = LabeledBatch::new(samples);
        let mut seen: Vec<SampleId> = Vec::new();
        for b in StreamGenerator::new(&pool, StreamConfig::default(), rng.random()).unwrap() {
            ensure(b.batch.len() <= 20, || format!("batch of {}", b.batch.len()))?;
            ensure(b.batch.classes().len() <= 5, || format!("batch with {} classes", b.batch.classes().len()))?;
            seen.extend(b.batch.ids());
            batches += 1;
        }
        seen.sort_unstable();
        ensure(seen == pool.ids(), || "streamed samples differ from the pool".into())?;
    }
    Ok(format!("1000 streams, {batches} batches, all capped, pools reproduced exactly"))
}

fn c6_metrics() -> Check {
    let k = ClassId;
    let labels = vec![k(0), k(0), k(0), k(1), k(1), k(1), k(1)];
    let preds = vec![k(0), k(0), k(1), k(1), k(1), k(1), k(0)];
    let per = per_class_f1(&preds, &labels, &[k(0), k(1)]);
    ensure(per[&k(0)] == 2.0 / 3.0 && per[&k(1)] == 0.75, || format!("per-class F1 {per:?}"))?;
    let m = macro_f1(&preds, &labels, &[k(0), k(1)]);
    ensure((m - 17.0 / 24.0).abs() < 1e-15, || format!("macro F1 {m}"))?;

    ensure((class_forgetting(0.6, 0.8) - 0.25).abs() < 1e-15, || "forgetting 0.6 after 0.8".into())?;
    ensure(class_forgetting(0.0, 0.0) == 0.0 && class_forgetting(0.9, 0.8) == 0.0, || "forgetting edge cases".into())?;
    let hist: Vec<BTreeMap<ClassId, f64>> =
        [[0.8, 0.5], [0.6, 0.5], [0.7, 0.25]].iter().map(|r| [(k(0), r[0]), (k(1), r[1])].into_iter().collect()).collect();
    let f = forgetting(&hist, 2, &[k(0), k(1)]);
    ensure((f - (0.125 + 0.5) / 2.0).abs() < 1e-15, || format!("history forgetting {f}"))?;
    let mono: Vec<BTreeMap<ClassId, f64>> =
        [0.1, 0.4, 0.4, 0.9].iter().map(|&v| [(k(0), v), (k(1), v * v)].into_iter().collect()).collect();
    ensure((1..4).all(|t| forgetting(&mono, t, &[k(0), k(1)]) == 0.0), || "monotone history forgets".into())?;

    let reference: BTreeMap<ClassId, f64> = [(k(2), 0.9), (k(3), 0.8)].into_iter().collect();
    let same = intransigence(&reference, &reference, &[k(2), k(3)]).unwrap();
    ensure(same == Some(0.0), || format!("intransigence against itself {same:?}"))?;
    let current: BTreeMap<ClassId, f64> = [(k(2), 0.6), (k(3), 0.9)].into_iter().collect();
    let i = intransigence(&reference, &current, &[k(2), k(3)]).unwrap().unwrap();
    ensure((i - (0.3 - 0.1) / 2.0).abs() < 1e-15, || format!("intransigence {i}"))?;
    Ok(format!("macro-F1 {m:.4}, forgetting {f:.4}, intransigence {i:.4} as hand-computed"))
}

fn row<'a>(rows: &'a [SummaryRow], m: Method) -> &'a SummaryRow {
    rows.iter().find(|r| r.variant.method == m).expect("method row")
}

struct Benchmark {
    out: tempfile::TempDir,
    rows: Vec<SummaryRow>,
    elapsed: Duration,
}

fn run_benchmark() -> Result<Benchmark, String> {
    let out = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let f = run_experiment(&benchmark_config(), out.path()).map_err(|e| format!("{e:#}"))?;
    ensure(f.failed_runs == 0, || format!("{} runs failed", f.failed_runs))?;
    Ok(Benchmark { out, rows: f.rows, elapsed: start.elapsed() })
}

fn c7_ordering(b: &Benchmark) -> Check {
    let o = |m| row(&b.rows, m).get("final_overall").0;
    let f = |m| row(&b.rows, m).get("final_forgetting").0;
    let (off, lap, dag, ddag, onl) = (
        o(Method::Offline),
        o(Method::Lapnet),
        o(Method::LapnetNoContrastive),
        o(Method::LapnetNoReplayNoContrastive),
        o(Method::Online),
    );
    let detail = format!(
        "overall F1 offline {off:.4} > lapnet {lap:.4} > no-contrastive {dag:.4} > no-replay-no-contrastive {ddag:.4} >= online {onl:.4}; \
         forgetting lapnet {:.4} vs online {:.4}; {:.0} s",
        f(Method::Lapnet),
        f(Method::Online),
        b.elapsed.as_secs_f64()
    );
    let ok = off > lap && lap > dag && dag > ddag && ddag >= onl && lap - onl >= 0.10 && f(Method::Lapnet) < f(Method::Online);
    let fast = b.elapsed < Duration::from_secs(600);
    if ok && fast {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c8_sweeps() -> Check {
    let mut cfg = benchmark_config();
    cfg.methods = vec![Method::Lapnet];
    let out = tempfile::tempdir().unwrap();
    let margins = run_sweep(&cfg, SweepParam::Margin, &[0.2, 1.0, 2.0, 3.0], out.path()).map_err(|e| format!("{e:#}"))?;
    ensure(margins.failed_runs == 0, || "margin sweep had failures".into())?;
    let at = |v: f64, m: &str| margins.rows.iter().find(|r| r.variant.sweep.unwrap().1 == v).unwrap().get(m).0;
    let traj = [0.2, 1.0, 2.0, 3.0].map(|v| at(v, "traj_new"));
    let fin = [0.2, 1.0, 2.0, 3.0].map(|v| at(v, "final_new"));

    let alphas = [0.0, 0.2, 0.5, 0.8, 1.0];
    let refresh = run_sweep(&cfg, SweepParam::RefreshRatio, &alphas, out.path()).map_err(|e| format!("{e:#}"))?;
    ensure(refresh.failed_runs == 0, || "refresh-ratio sweep had failures".into())?;
    let csv = std::fs::read_to_string(&refresh.csv_path).map_err(|e| e.to_string())?;
    ensure(csv.lines().count() == 1 + alphas.len(), || "refresh-ratio CSV rows".into())?;

    let detail = format!(
        "New F1 (stream mean) at m = 0.2/1/2/3: {:.4}/{:.4}/{:.4}/{:.4}; final-step New F1: {:.4}/{:.4}/{:.4}/{:.4}; \
         refresh-ratio sweep wrote {} rows",
        traj[0], traj[1], traj[2], traj[3], fin[0], fin[1], fin[2], fin[3], alphas.len()
    );
    if traj[1] > traj[0] {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c9_reproducible(b: &Benchmark) -> Check {
    let first = std::fs::read(b.out.path().join("summary.csv")).map_err(|e| e.to_string())?;
    let again = run_benchmark()?;
    let second = std::fs::read(again.out.path().join("summary.csv")).map_err(|e| e.to_string())?;
    ensure(first == second, || "summary CSV differs between identical runs".into())?;
    Ok(format!("benchmark rerun gives a byte-identical summary ({} bytes)", first.len()))
}

fn main() {
    // `cargo test -- --list` and filters are not meaningful for this target.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut failed = 0;
    let mut report = |n: usize, name: &str, r: Check| {
        match &r {
            Ok(d) => println!("criterion {n} {name}: PASS ({d})"),
            Err(d) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({d})");
            }
        }
    };
    report(1, "online averaging oracle", c1_online_averaging());
    report(2, "prototype adaptation limits", c2_adaptation());
    report(3, "loss gradient", c3_gradients());
    report(4, "hand-traced step", c4_hand_trace());
    report(5, "stream protocol", c5_stream());
    report(6, "metric formulas", c6_metrics());
    match run_benchmark() {
        Ok(b) => {
            print!("{}", lapnet_runner::summary::to_table(&b.rows));
            report(7, "method ordering", c7_ordering(&b));
            report(8, "sweeps", c8_sweeps());
            report(9, "reproducibility", c9_reproducible(&b));
        }
        Err(e) => {
            report(7, "method ordering", Err(e.clone()));
            report(8, "sweeps", c8_sweeps());
            report(9, "reproducibility", Err(e));
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
