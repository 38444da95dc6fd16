use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fedfa_core::model::{calibration_loss_grad, init_model, local_loss_grads};
use fedfa_core::numerics::{rng_normal, seeded_rng};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [16, 64, 256] {
        let mut rng = seeded_rng(1);
        let a = rng_normal(&mut rng, n, n, 0.0, 1.0);
        let b = rng_normal(&mut rng, n, n, 0.0, 1.0);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn gradients(c: &mut Criterion) {
    let mut rng = seeded_rng(2);
    // desk shape and the FMNIST-sized MLP on flattened 28x28 inputs
    for (name, dims, classes, batch) in [("desk", vec![8, 4, 4], 4, 32), ("mlp-784", vec![784, 384, 192], 10, 64)] {
        let model = init_model(&dims, classes, &mut rng).unwrap();
        let x = rng_normal(&mut rng, batch, dims[0], 0.0, 1.0);
        let y: Vec<usize> = (0..batch).map(|j| j % classes).collect();
        let anchors = rng_normal(&mut rng, classes, *dims.last().unwrap(), 0.0, 1.0);
        c.bench_function(&format!("local_loss_grads/{name}"), |b| {
            b.iter(|| local_loss_grads(black_box(&model), &x, &y, Some(&anchors), 0.1).unwrap())
        });
        c.bench_function(&format!("calibration_loss_grad/{name}"), |b| {
            b.iter(|| calibration_loss_grad(black_box(&model.classifier), &anchors).unwrap())
        });
    }
}

criterion_group!(benches, matmul, gradients);
criterion_main!(benches);
