use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use image::{GrayImage, Luma};
use patchwise::config::{BackboneSpec, PipelineConfig, Setting};
use patchwise::geometry::{per_layer_counts, pyramid_patches, sparse_sample, PyramidSpec, DEFAULT_ENUMERATION_CAP};
use patchwise::metrics::{auc, ScoredSample};
use patchwise::model::PatchClassifier;
use patchwise::nn::Mode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn geometry(c: &mut Criterion) {
    let spec = PyramidSpec::default();
    c.bench_function("pyramid_patches 1200x900", |b| b.iter(|| pyramid_patches((1200, 900), &spec).unwrap()));
    let boxes = pyramid_patches((1200, 900), &spec).unwrap();
    let counts = per_layer_counts(&spec.layer_counts(), 0.5).unwrap();
    c.bench_function("sparse_sample alpha 0.5", |b| {
        b.iter(|| sparse_sample(&boxes, &counts, DEFAULT_ENUMERATION_CAP).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let samples: Vec<ScoredSample> = (0..10_000)
        .map(|_| ScoredSample::new(rng.random_range(0..1000) as f64 / 1000.0, rng.random_bool(0.3)))
        .collect();
    c.bench_function("auc 10k with ties", |b| b.iter(|| auc(&samples).unwrap()));
}

fn forward(c: &mut Criterion) {
    let mut cfg = PipelineConfig::new(Setting::IRec, (0..8).map(|i| format!("c{i}")).collect(), Some(0));
    cfg.backbone = BackboneSpec::tiny();
    cfg.augment = None;
    let mut model = PatchClassifier::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = GrayImage::from_fn(1200, 900, |_, _| Luma([rng.random_range(0..=255u8)]));
    let set = model.extract(&img).unwrap();
    let x = model.stack(&[&set]).unwrap();
    c.bench_function("extract 17 patches", |b| b.iter(|| model.extract(&img).unwrap()));
    c.bench_function("tiny forward 1 image", |b| {
        b.iter_batched(|| x.clone(), |x| model.forward_batch(&x, Mode::Eval).unwrap(), BatchSize::LargeInput)
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = geometry, metrics, forward
}
criterion_main!(benches);
