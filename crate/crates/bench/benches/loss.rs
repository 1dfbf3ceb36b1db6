use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdl_core::loss::{final_loss, LabelInstance, LossConfig, Variant};
use sdl_core::model::ModelParams;
use sdl_core::EmbeddingMatrix;

fn vectors(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

fn per_image_loss(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let d = 300;
    let pos = vectors(&mut rng, 5, d);
    let neg = vectors(&mut rng, 80, d);
    let inst = LabelInstance::new(
        pos.iter().map(Vec::as_slice).collect(),
        neg.iter().map(Vec::as_slice).collect(),
    );
    let mut group = c.benchmark_group("final_loss");
    for (variant, rows) in [
        (Variant::Fast0Tag, 1),
        (Variant::Max, 3),
        (Variant::Max, 7),
        (Variant::L2Norm, 7),
    ] {
        let a = EmbeddingMatrix::new(rows, d, (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let cfg = LossConfig {
            variant,
            rows,
            ..LossConfig::default()
        };
        group.bench_with_input(BenchmarkId::new(variant.as_str(), rows), &a, |b, a| {
            b.iter(|| final_loss(a, &inst, &cfg).unwrap())
        });
    }
    group.finish();
}

fn head_pass(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = ModelParams::init(7, 300, 512, 0).unwrap();
    let x: Vec<f64> = (0..512).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grad_a = params.forward(&x).unwrap();
    c.bench_function("head_forward_m7", |b| b.iter(|| params.forward(&x).unwrap()));
    c.bench_function("head_backward_m7", |b| b.iter(|| params.backward(&x, &grad_a).unwrap()));
}

criterion_group!(benches, per_image_loss, head_pass);
criterion_main!(benches);
