use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stexpr::eval;
use stexpr::fixture::{self, FixtureConfig};
use stexpr::model::attention::attention;
use stexpr::model::{backward, forward, init_params, LossConfig, TrunkConfig, TrunkVariant};
use stexpr::stain::{self, StainParams};

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(42)
}

fn metrics(c: &mut Criterion) {
    let mut r = rng();
    let a: Vec<f64> = (0..10_000).map(|_| r.random()).collect();
    let b: Vec<f64> = a.iter().map(|x| x + 0.1 * r.random::<f64>()).collect();
    c.bench_function("pcc/10k", |bn| {
        bn.iter(|| eval::pcc(black_box(&a), black_box(&b)))
    });
    c.bench_function("rmse/10k", |bn| {
        bn.iter(|| eval::rmse(black_box(&a), black_box(&b)))
    });
}

fn attn(c: &mut Criterion) {
    let mut r = rng();
    let mut m = |rows, cols| Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0));
    let (q, k, v) = (m(64, 16), m(64, 16), m(64, 16));
    c.bench_function("attention/64x16", |bn| {
        bn.iter(|| attention(q.view(), k.view(), v.view()))
    });
}

fn model(c: &mut Criterion) {
    let mut r = rng();
    let batch: Vec<Array3<f64>> = (0..8)
        .map(|_| Array3::from_shape_fn((3, 32, 32), |_| r.random_range(-1.0..1.0)))
        .collect();
    let lc = LossConfig::default();
    let mut g = c.benchmark_group("model");
    g.sample_size(20);
    for variant in [
        TrunkVariant::Mlp,
        TrunkVariant::Conv,
        TrunkVariant::VitMicro,
    ] {
        let cfg = TrunkConfig::default_for(variant);
        let state = init_params(&cfg, 20, 30, 1).unwrap();
        let main = Array2::zeros((batch.len(), 20));
        let aux = Array2::zeros((batch.len(), 30));
        g.bench_function(format!("{variant}/forward+backward/8"), |bn| {
            bn.iter(|| {
                let cache = forward(&state, batch.iter().map(|x| x.view())).unwrap();
                backward(&state, &cache, main.view(), aux.view(), &lc).unwrap()
            })
        });
    }
    g.finish();
}

fn stain_profile(c: &mut Criterion) {
    let fx = fixture::generate(&FixtureConfig::default()).unwrap();
    let img = &fx.sections[0].image;
    let params = StainParams::default();
    let mut g = c.benchmark_group("stain");
    g.sample_size(10);
    g.bench_function("estimate_profile/fixture", |bn| {
        bn.iter_batched(
            || stain::rgb_to_od(img, stain::DEFAULT_I0),
            |od| stain::estimate_stain_profile(&od, &params).unwrap(),
            BatchSize::LargeInput,
        )
    });
    let prof =
        stain::estimate_stain_profile(&stain::rgb_to_od(img, stain::DEFAULT_I0), &params).unwrap();
    g.bench_function("normalize/fixture", |bn| {
        bn.iter(|| stain::normalize_to_target(black_box(img), &prof, &prof, &params).unwrap())
    });
    g.finish();
}

criterion_group!(benches, metrics, attn, model, stain_profile);
criterion_main!(benches);
