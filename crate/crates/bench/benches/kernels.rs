use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use dapo_bench::{frozen_backbone, run_config, small_corpus};
use dapo_core::metrics::{aupro, auroc, ScoredSet};
use dapo_core::numerics::{Graph, Tensor};
use dapo_core::{DapoModel, RngHandle};

fn matmul(c: &mut Criterion) {
    let mut rng = RngHandle::new(1);
    let a = Tensor::randn(&[256, 64], 0.0, 1.0, &mut rng);
    let b = Tensor::randn(&[64, 256], 0.0, 1.0, &mut rng);
    c.bench_function("matmul_256x64x256_fwd_bwd", |bench| {
        bench.iter(|| {
            let g = Graph::new();
            let (x, y) = (g.param(a.clone()), g.param(b.clone()));
            let z = g.sum(g.matmul(x, y).unwrap());
            g.backward(z).unwrap();
            black_box(g.grad(x))
        })
    });
}

fn encoders(c: &mut Criterion) {
    let cfg = run_config(8);
    let (backbone, _) = frozen_backbone(&cfg.encoder);
    let corpus = small_corpus();
    let images: Vec<_> = corpus.train.samples.iter().take(8).map(|s| &s.image).collect();
    c.bench_function("vision_tower_batch8", |bench| {
        bench.iter(|| black_box(backbone.embed_images(&images, None, &cfg.encoder).unwrap()))
    });
}

fn train_step(c: &mut Criterion) {
    let cfg = run_config(8);
    let (backbone, vocab) = frozen_backbone(&cfg.encoder);
    let corpus = small_corpus();
    let model = DapoModel::new(cfg, vocab, backbone, &corpus.train.defects).unwrap();
    let batch: Vec<_> = corpus.train.samples.iter().take(8).collect();
    c.bench_function("dapo_loss_and_backward_batch8", |bench| {
        bench.iter(|| {
            let g = Graph::new();
            let bm = model.bind(&g, true);
            let loss = model.batch_loss(&g, &bm, &batch).unwrap();
            g.backward(loss.total).unwrap();
            black_box(g.len())
        })
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = RngHandle::new(2);
    let n = 20_000;
    let labels: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.3)).collect();
    let scores: Vec<f64> = labels.iter().map(|&l| rng.normal(l as u8 as f64, 1.0)).collect();
    c.bench_function("auroc_20k", |bench| {
        bench.iter_batched(
            || ScoredSet::new(scores.clone(), labels.clone()).unwrap(),
            |s| black_box(auroc(&s).unwrap()),
            BatchSize::SmallInput,
        )
    });

    let side = 64;
    let maps: Vec<Vec<f64>> = (0..16).map(|_| (0..side * side).map(|_| rng.uniform()).collect()).collect();
    let masks: Vec<Vec<bool>> = (0..16)
        .map(|k| (0..side * side).map(|i| (i % side + k) % 9 < 3 && i / side > 20).collect())
        .collect();
    let map_refs: Vec<&[f64]> = maps.iter().map(|m| &m[..]).collect();
    let mask_refs: Vec<&[bool]> = masks.iter().map(|m| &m[..]).collect();
    c.bench_function("aupro_16x64x64", |bench| {
        bench.iter(|| black_box(aupro(&map_refs, &mask_refs, side, 0.3).unwrap()))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = matmul, encoders, train_step, metrics
}
criterion_main!(benches);
