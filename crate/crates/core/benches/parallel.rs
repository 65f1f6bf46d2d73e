//! Sequential vs data-parallel execution of the two hot loops: per-sample
//! gradients over a mini-batch and per-voxel inference over a bounding box.
//! Build with `--no-default-features` to get the sequential fallback only.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use patchconv::classifier::{ModelConfig, ModelParams};
use patchconv::data::{generate_phantom, sample_training_set, PhantomSpec, SamplingPlan};
use patchconv::inference::{compute_bbox, segment_volume, BboxMode};
use patchconv::parallel::Workers;
use patchconv::train::batch_gradient;

fn worker_counts() -> Vec<usize> {
    let all = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut counts = vec![1];
    if all > 1 {
        counts.push(all);
    }
    counts
}

fn gradients(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let (vol, labels) = generate_phantom([40, 40, 40], 1, &PhantomSpec::default()).unwrap();
    let set = sample_training_set(&vol.normalized(), &labels, &SamplingPlan::balanced(8, 4, 1), cfg.patch_size, cfg.slices)
        .unwrap();
    let batch: Vec<_> = set.iter().collect();
    let seeds: Vec<u64> = (0..batch.len() as u64).collect();
    let params = ModelParams::<f32>::init(&cfg, 0).unwrap();
    let mut group = c.benchmark_group("batch_gradient");
    group.sample_size(10);
    for n in worker_counts() {
        let workers = Workers::new(n);
        group.bench_with_input(BenchmarkId::new("workers", n), &workers, |b, w| {
            b.iter(|| batch_gradient(&params, &batch, &seeds, w).unwrap())
        });
    }
    group.finish();
}

fn inference(c: &mut Criterion) {
    let cfg = ModelConfig::shrunken();
    let (vol, _) = generate_phantom([32, 32, 32], 2, &PhantomSpec::default()).unwrap();
    let vol = vol.normalized();
    let params = ModelParams::<f32>::init(&cfg, 0).unwrap();
    let bbox = compute_bbox(&vol, &BboxMode::FlairThreshold { k: 1.5 }, 0).unwrap();
    let mut group = c.benchmark_group("segment_volume");
    group.sample_size(10);
    for n in worker_counts() {
        let workers = Workers::new(n);
        group.bench_with_input(BenchmarkId::new("workers", n), &workers, |b, w| {
            b.iter(|| segment_volume(&vol, &params, &bbox, w).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, gradients, inference);
criterion_main!(benches);
