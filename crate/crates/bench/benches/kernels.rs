use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use mskl_core::diffcore::kernels;
use mskl_core::episodes::{
    minmax_normalize, pad_batch, sample_episode, synth_metaset, SynthConfig, TaskDataset,
};
use mskl_core::metalearn::{
    episode_gradient, inner_adapt, InnerLoopConfig, LearnerKind, MetaModel,
};
use mskl_core::metrics::{roc_auc, trust_density, tukey_filter, TrustConfig, TUKEY_K};
use mskl_core::seqnet::{build_backbone, Backbone};
use mskl_core::Array;

fn ramp(shape: &[usize]) -> Array {
    let n: usize = shape.iter().product();
    Array::new(
        shape.to_vec(),
        (0..n)
            .map(|i| ((i * 37) % 101) as f64 / 101.0 - 0.5)
            .collect(),
    )
    .unwrap()
}

fn tasks() -> Vec<TaskDataset> {
    synth_metaset(&SynthConfig::default())
        .unwrap()
        .tasks
        .into_iter()
        .map(|mut t| {
            t.trials = minmax_normalize(&t.trials).unwrap();
            t
        })
        .collect()
}

fn diffcore(c: &mut Criterion) {
    let x = ramp(&[60, 16]);
    let k = ramp(&[16, 16, 3]);
    c.bench_function("conv1d 60x16 k3 d2", |b| {
        b.iter(|| kernels::conv1d(black_box(&x), &k, 2).unwrap())
    });
    let e = ramp(&[32, 512]);
    let w = ramp(&[3, 512]);
    let bias = ramp(&[3]);
    c.bench_function("dense 32x512 -> 3", |b| {
        b.iter(|| kernels::dense(black_box(&e), &w, &bias).unwrap())
    });
}

fn seqnet(c: &mut Criterion) {
    let (cfg, params) = build_backbone(4, 0).unwrap();
    let bb = Backbone::new(cfg, &params).unwrap();
    let seq = ramp(&[60, 4]);
    let one = pad_batch([&seq]).unwrap();
    c.bench_function("embed one 60x4 sequence", |b| {
        b.iter(|| bb.embed(&params, black_box(&one)).unwrap())
    });
    let seqs: Vec<Array> = (20..36).map(|t| ramp(&[t, 4])).collect();
    let batch = pad_batch(seqs.iter()).unwrap();
    c.bench_function("embed padded batch of 16", |b| {
        b.iter(|| bb.embed(&params, black_box(&batch)).unwrap())
    });
}

fn metalearn(c: &mut Criterion) {
    let tasks = tasks();
    let model = MetaModel::init(LearnerKind::ProtoMaml, 4, 3, 0).unwrap();
    let ep = sample_episode(&tasks[0], 4, 0.5, 0).unwrap();
    c.bench_function("protomaml episode gradient", |b| {
        b.iter(|| {
            episode_gradient(&model, black_box(&ep), &InnerLoopConfig::train(), false).unwrap()
        })
    });
    c.bench_function("protomaml 20-step adaptation", |b| {
        b.iter(|| {
            inner_adapt(
                &model,
                black_box(&ep.support),
                3,
                &InnerLoopConfig::test(),
                false,
            )
            .unwrap()
        })
    });
}

fn metrics(c: &mut Criterion) {
    let scores: Vec<f64> = (0..1000)
        .map(|i| ((i * 7919) % 1000) as f64 / 1000.0)
        .collect();
    let pos: Vec<bool> = (0..1000).map(|i| (i * 31) % 3 == 0).collect();
    c.bench_function("roc_auc 1000", |b| {
        b.iter(|| roc_auc(black_box(&scores), &pos).unwrap())
    });
    c.bench_function("trust_density 1000", |b| {
        b.iter(|| trust_density(black_box(&scores), &TrustConfig::default()).unwrap())
    });
    c.bench_function("tukey_filter 100", |b| {
        b.iter(|| tukey_filter(black_box(&scores[..100]), TUKEY_K))
    });
}

criterion_group!(benches, diffcore, seqnet, metalearn, metrics);
criterion_main!(benches);
