use criterion::{black_box, criterion_group, criterion_main, Criterion};

use clisa::contrastive::train_contrastive;
use clisa::network::embed_graph;
use clisa::predict::{
    extract_features, lds_smooth, train_classifier, ClassifierConfig, Extractor, FeatureConfig,
};
use clisa::preprocess::{seconds_to_samples, stratified_normalize};
use clisa::sampler::draw_minibatch;
use clisa::{seeded_rng, Graph, ModelParams};
use clisa_bench::{corpus, small_hyperparams};

fn training(c: &mut Criterion) {
    let recs = corpus();
    let hp = small_hyperparams();
    let arch = hp.architecture(recs[0].n_channels());
    let params = ModelParams::<f32>::init(arch, &mut seeded_rng(0)).unwrap();
    let len = seconds_to_samples(hp.sample_len_s, recs[0].sampling_rate);
    let batch = draw_minibatch(&recs[0], &recs[1], len, &mut seeded_rng(1)).unwrap();

    let mut group = c.benchmark_group("contrastive");
    group.sample_size(10);
    group.bench_function("minibatch forward+backward", |b| {
        b.iter(|| {
            let norm = stratified_normalize(&batch).unwrap();
            let groups = norm.groups();
            let mut g = Graph::new();
            let vars = params.record(&mut g);
            let x = g.constant(norm.stacked::<f32>().unwrap());
            let z = embed_graph(&mut g, &vars, &arch, x, Some(&groups)).unwrap();
            let loss = g.nt_xent(z, 0.5).unwrap();
            black_box(g.backward(loss).unwrap());
        })
    });
    group.bench_function("one epoch, 4 subjects", |b| {
        b.iter(|| train_contrastive::<f32, _>(&recs[..4], &hp, &mut seeded_rng(2)).unwrap())
    });
    group.finish();
}

fn prediction(c: &mut Criterion) {
    let recs = corpus();
    let hp = small_hyperparams();
    let params =
        ModelParams::<f32>::init(hp.architecture(recs[0].n_channels()), &mut seeded_rng(0))
            .unwrap();
    let cfg = FeatureConfig::default();

    let mut group = c.benchmark_group("prediction");
    group.sample_size(10);
    group.bench_function("trained DE, one subject", |b| {
        b.iter(|| extract_features(&recs[0], Extractor::Encoder(&params.encoder), &cfg).unwrap())
    });
    group.bench_function("raw DE, one subject", |b| {
        b.iter(|| extract_features::<f32>(&recs[0], Extractor::RawDe, &cfg).unwrap())
    });
    let seq: Vec<Vec<f64>> = (0..30)
        .map(|t| {
            (0..64)
                .map(|d| ((t * 64 + d) as f64 * 0.37).sin())
                .collect()
        })
        .collect();
    group.bench_function("LDS smoothing 30x64", |b| {
        b.iter(|| lds_smooth(black_box(&seq), 0.1).unwrap())
    });

    let rows: Vec<_> = recs[..4]
        .iter()
        .flat_map(|r| extract_features(r, Extractor::Encoder(&params.encoder), &cfg).unwrap())
        .collect();
    let x: Vec<Vec<f64>> = rows.iter().map(|r| r.values.clone()).collect();
    let y: Vec<usize> = rows.iter().map(|r| r.label).collect();
    let mask: Vec<bool> = (0..rows.len()).map(|i| i % 5 == 0).collect();
    let ccfg = ClassifierConfig {
        epochs: 10,
        weight_decays: vec![0.011],
        ..ClassifierConfig::default()
    };
    group.bench_function("MLP fit, 10 epochs", |b| {
        b.iter(|| train_classifier(&x, &y, &mask, 2, &ccfg, &mut seeded_rng(3)).unwrap())
    });
    group.finish();
}

criterion_group!(benches, training, prediction);
criterion_main!(benches);
