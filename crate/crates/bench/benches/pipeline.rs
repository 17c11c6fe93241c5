use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use distill_lab::distill::{estimator_delta, DistillWeights, Estimator};
use distill_lab::field::VoxelGrid;
use distill_lab::image::Image;
use distill_lab::prior::{add_noise, standard_normal_image, AnalyticPrior, Condition, GaussianComponent, Modality, NoisePredictor, NoiseSchedule};
use distill_lab::render::{self, make_rays, Camera, RayUpstream, RenderConfig, SamplingConfig, DEFAULT_FAR, DEFAULT_NEAR};
use distill_lab::scene::{build_scene, canonical_setup};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn canonical() -> (VoxelGrid, Camera) {
    let setup = canonical_setup();
    let grid = build_scene(&setup.scene).expect("canonical scene builds");
    let cam = setup.cameras.cameras().expect("canonical cameras")[0].resized(64, 64);
    (grid, cam)
}

fn bench_render(c: &mut Criterion) {
    let (grid, cam) = canonical();
    let mut g = c.benchmark_group("render_64x64");
    for normals in [false, true] {
        let cfg = RenderConfig { normals, ..RenderConfig::with_sampling(SamplingConfig { samples: 64, stratified: true, seed: 3 }) };
        g.bench_function(BenchmarkId::from_parameter(if normals { "with_normals" } else { "color_depth" }), |b| {
            b.iter(|| render::render(black_box(&grid), &cam, &cfg).unwrap())
        });
    }
    g.finish();
}

fn bench_vjp(c: &mut Criterion) {
    let (grid, cam) = canonical();
    let rays = make_rays(&cam, DEFAULT_NEAR, DEFAULT_FAR).unwrap();
    let cfg = RenderConfig::with_sampling(SamplingConfig { samples: 32, stratified: true, seed: 3 });
    let (_, tape) = render::render_rays_taped(&grid, &rays, &cfg).unwrap();
    let up = vec![RayUpstream { d_color: [1.0, -0.5, 0.25], d_depth: 0.1, d_opacity: 0.0, d_normal: [0.1, 0.2, -0.3] }; rays.len()];
    c.bench_function("render_taped_4096_rays", |b| b.iter(|| render::render_rays_taped(black_box(&grid), &rays, &cfg).unwrap()));
    c.bench_function("render_vjp_4096_rays", |b| b.iter(|| render::render_vjp(black_box(&grid), &tape, &up).unwrap()));
}

fn prior() -> (AnalyticPrior, NoiseSchedule, Image) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mean = standard_normal_image(&mut rng, 64, 64, 3).map(|v| 0.5 + 0.1 * v);
    let prior = AnalyticPrior::new(
        Modality::Rgb,
        GaussianComponent { mean: mean.clone(), variance: 0.01 },
        GaussianComponent { mean: mean.box_blur(3), variance: 0.01 },
        0.5,
    )
    .unwrap();
    let x = standard_normal_image(&mut rng, 64, 64, 3).map(|v| 0.5 + 0.2 * v);
    (prior, NoiseSchedule::default(), x)
}

fn bench_prior(c: &mut Criterion) {
    let (prior, schedule, x) = prior();
    let noise = standard_normal_image(&mut ChaCha8Rng::seed_from_u64(6), 64, 64, 3);
    let n = add_noise(&schedule, &x, 0.5, &noise).unwrap();
    let mut g = c.benchmark_group("predict_noise_64x64");
    for (name, cond) in [("positive", Condition::Positive), ("unconditional", Condition::Unconditional)] {
        g.bench_function(name, |b| b.iter(|| prior.predict_noise(&schedule, black_box(&n.x_t), n.t, cond).unwrap()));
    }
    g.finish();
}

fn bench_estimators(c: &mut Criterion) {
    let (prior, schedule, x) = prior();
    let noise = standard_normal_image(&mut ChaCha8Rng::seed_from_u64(7), 64, 64, 3);
    let n = add_noise(&schedule, &x, 0.5, &noise).unwrap();
    let mut w = DistillWeights::appearance();
    w.omega3 = 1.0;
    let mut g = c.benchmark_group("estimator_delta_64x64");
    for est in Estimator::ALL {
        g.bench_function(est.name(), |b| b.iter(|| estimator_delta(est, &prior, &schedule, black_box(&n), &w).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, bench_render, bench_vjp, bench_prior, bench_estimators);
criterion_main!(benches);
