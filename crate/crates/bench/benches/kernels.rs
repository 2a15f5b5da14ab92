use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use hierenv::env_infer::{stage1_forward, Stage1Config, Stage1Model};
use hierenv::graph::{batch_graphs, Batch};
use hierenv::invariant::{invariant_loss, InvariantClassifier, Stage2Config};
use hierenv::metrics::{ks_two_sample, roc_auc};
use hierenv::rng::RngStreams;
use hierenv::subgraph::MaskGradient;
use hierenv::synthetic::{generate_synthetic, SyntheticConfig, NUM_CLASSES};
use hierenv::{ParamStore, Tape};
use rand::Rng;

fn batch(n: usize) -> Batch {
    let ds = generate_synthetic(&SyntheticConfig {
        n_train: n,
        n_val: 2,
        n_test: 2,
        ..Default::default()
    })
    .unwrap();
    batch_graphs(&ds.train).unwrap()
}

fn stage1(c: &mut Criterion) {
    let b = batch(32);
    let cfg = Stage1Config::default();
    let streams = RngStreams::new(1);
    let mut store = ParamStore::new();
    let model = Stage1Model::new(&mut store, b.features.cols(), NUM_CLASSES, &cfg, &mut streams.stream("init")).unwrap();
    c.bench_function("stage1_forward_backward_b32", |bench| {
        bench.iter_batched(
            || (store.clone(), streams.stream("gumbel")),
            |(mut s, mut rng)| {
                let mut tape = Tape::new();
                let pass = stage1_forward(&mut tape, &s, &model, &b, &cfg, Some(&mut rng), MaskGradient::StraightThrough).unwrap();
                tape.backward_into(pass.total, &mut s).unwrap();
                black_box(s)
            },
            BatchSize::SmallInput,
        )
    });
}

fn stage2(c: &mut Criterion) {
    let b = batch(32);
    let cfg = Stage2Config::default();
    let streams = RngStreams::new(1);
    let mut store = ParamStore::new();
    let model = InvariantClassifier::new(&mut store, b.features.cols(), NUM_CLASSES, &cfg, &mut streams.stream("init")).unwrap();
    let envs: Vec<usize> = (0..b.len()).map(|i| i % 2).collect();
    c.bench_function("stage2_forward_backward_b32", |bench| {
        bench.iter_batched(
            || (store.clone(), streams.stream("dropout")),
            |(mut s, mut rng)| {
                let mut tape = Tape::new();
                let logits = model.forward(&mut tape, &s, &b, Some(&mut rng)).unwrap();
                let loss = invariant_loss(&mut tape, logits, &b.labels, &envs, 0.01).unwrap();
                tape.backward_into(loss.total, &mut s).unwrap();
                black_box(s)
            },
            BatchSize::SmallInput,
        )
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = RngStreams::new(2).stream("data");
    let a: Vec<f64> = (0..1000).map(|_| rng.gen()).collect();
    let b: Vec<f64> = (0..1000).map(|_| rng.gen::<f64>() + 0.05).collect();
    let pos: Vec<bool> = (0..1000).map(|i| i % 3 == 0).collect();
    c.bench_function("ks_two_sample_1000", |bench| bench.iter(|| ks_two_sample(black_box(&a), black_box(&b)).unwrap()));
    c.bench_function("roc_auc_1000", |bench| bench.iter(|| roc_auc(black_box(&a), black_box(&pos)).unwrap()));
}

criterion_group!(benches, stage1, stage2, metrics);
criterion_main!(benches);
