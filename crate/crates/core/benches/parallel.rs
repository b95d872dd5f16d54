use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenectx::ergonomics::{contact_loss_with, Pose};
use scenectx::layout::{plan_layout, IcpParams};
use scenectx::projection::{canonical_cameras_sized, render_pointmap_with};
use scenectx::{demo, Execution, SpatialIndex, Vec3};
use std::hint::black_box;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn random_points(n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect()
}

fn nearest(c: &mut Criterion) {
    let index = SpatialIndex::build(&random_points(50_000, 1)).unwrap();
    let queries = random_points(20_000, 2);
    let mut group = c.benchmark_group("nearest_batch");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(index.nearest_batch(&queries, exec)))
        });
    }
    group.finish();
}

fn contact(c: &mut Criterion) {
    let a = random_points(2048, 3);
    let b = random_points(2048, 4);
    let shifted = Pose::rigid(Default::default(), Vec3::new(1.5, 0.0, 0.0));
    let mut group = c.benchmark_group("contact_loss");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| black_box(contact_loss_with(&a, &b, &Pose::identity(), &shifted, 0.01, exec).unwrap()))
        });
    }
    group.finish();
}

fn layout(c: &mut Criterion) {
    let ctx = demo::bedroom();
    let meshes = ctx.meshes.clone();
    let mut group = c.benchmark_group("plan_layout");
    group.sample_size(10);
    for (name, exec) in MODES {
        let params = IcpParams { max_iterations: 20, execution: exec, ..IcpParams::default() };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(plan_layout(&ctx, &meshes, &params).unwrap()))
        });
    }
    group.finish();
}

fn render(c: &mut Criterion) {
    let ctx = demo::bedroom();
    let camera = canonical_cameras_sized(&ctx.cloud, 512, 512).unwrap().remove(0);
    let mut group = c.benchmark_group("render_pointmap");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(render_pointmap_with(&ctx.cloud, &camera, 1, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, nearest, contact, layout, render);
criterion_main!(benches);
