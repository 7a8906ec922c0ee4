//! Sequential versus data-parallel execution of the two hot paths: scoring
//! a frame's patches and one training step. Run with
//! `--no-default-features` to bench the build without rayon at all.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hazard_core::autoencoder::{AutoencoderConfig, AutoencoderModel};
use hazard_core::dataset::{FrameKey, Generator, SynthConfig};
use hazard_core::detector::{self, DetectorConfig};
use hazard_core::par;
use hazard_core::preprocessing::Scale;
use hazard_core::training::{self, PreparedFrame, TrainingConfig};

fn model() -> AutoencoderModel {
    AutoencoderModel::build(AutoencoderConfig {
        first_layer_size: 16,
        ..Default::default()
    })
    .unwrap()
}

fn frames(n: usize, scale: Scale) -> Vec<PreparedFrame> {
    let g = Generator::new(SynthConfig::default()).unwrap();
    (0..n)
        .map(|i| {
            let k = FrameKey::Train(i);
            PreparedFrame::new(&g.render(k, None).to_frame(k.relative_path("pgm")), scale)
        })
        .collect()
}

fn worker_counts() -> Vec<usize> {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    if available > 1 {
        vec![1, available]
    } else {
        vec![1]
    }
}

fn scoring(c: &mut Criterion) {
    let model = model();
    let image = frames(1, Scale::S2).remove(0).image;
    let config = DetectorConfig {
        patch_count: 64,
        ..DetectorConfig::for_scale(Scale::S2)
    };
    let mut group = c.benchmark_group("score_64_patches");
    group.sample_size(10);
    for workers in worker_counts() {
        group.bench_with_input(BenchmarkId::from_parameter(workers), &workers, |b, &w| {
            par::with_workers(w, || b.iter(|| detector::prepared_patch_scores(&model, &image, &config).unwrap()))
        });
    }
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let train = frames(4, Scale::S2);
    let val = training::validation_patches(&train, 8, 0);
    let cfg = TrainingConfig {
        scale: Scale::S2,
        total_samples: 64,
        batch_size: 64,
        samples_per_epoch: 64,
        validation_patches: 8,
        ..Default::default()
    };
    let mut group = c.benchmark_group("train_batch_64");
    group.sample_size(10);
    for workers in worker_counts() {
        group.bench_with_input(BenchmarkId::from_parameter(workers), &workers, |b, &w| {
            par::with_workers(w, || {
                b.iter(|| training::train_prepared(&cfg, model(), &train, &val, |_| {}).unwrap())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, scoring, training_step);
criterion_main!(benches);
