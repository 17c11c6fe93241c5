use super::*;
use crate::bench::oracle::{max_relative_error, numeric_gradient, FD_STEP};
use crate::experiment::{build_problem, ExperimentConfig, ExperimentData};
use crate::field::Aabb;
use crate::scene::{self, DatasetView};

fn tiny_config() -> ExperimentConfig {
    ExperimentConfig::smoke()
}

fn tiny_problem(cfg: &ExperimentConfig) -> TrainingProblem {
    let data = ExperimentData::generate(cfg).unwrap();
    build_problem(&data, cfg).unwrap()
}

fn fresh(problem: &TrainingProblem, cfg: &TrainConfig) -> TrainState {
    let _ = problem;
    TrainState::init([8, 8, 8], Aabb::cube(1.0), cfg).unwrap()
}

fn opaque_gray(samples: usize) -> (VoxelGrid, RenderConfig) {
    let grid = VoxelGrid::filled([2, 2, 2], Aabb::cube(1.0), 2000.0, [0.0; 3]).unwrap();
    let cfg = RenderConfig::with_sampling(SamplingConfig { samples, stratified: false, seed: 0 });
    (grid, cfg)
}

fn one_ray(origin_z: f64, color: [f64; 3], depth: f64) -> RayBatch {
    RayBatch { rays: vec![Ray::new([0.0, 0.0, origin_z], [0.0, 0.0, 1.0], 0.0, 100.0)], colors: vec![color], depths: vec![depth] }
}

#[test]
fn appearance_loss_example() {
    let (grid, cfg) = opaque_gray(2);
    let (loss, _) = reconstruction_loss_appearance(&grid, &one_ray(-3.0, [1.0, 0.0, 0.0], 0.0), &cfg).unwrap();
    assert!((loss - 0.75).abs() < 1e-12, "{loss}");
}

#[test]
fn depth_loss_example() {
    // Box spans t in [1.75, 3.75]; with 4 samples the opaque first midpoint is t = 2.
    let (grid, cfg) = opaque_gray(4);
    let (loss, _) = reconstruction_loss_depth(&grid, &one_ray(-2.75, [0.0; 3], 1.5), &cfg).unwrap();
    assert!((loss - 0.25).abs() < 1e-12, "{loss}");
}

#[test]
fn exact_targets_give_zero_loss_and_gradient() {
    let (grid, cfg) = opaque_gray(2);
    let (loss, g) = reconstruction_loss_appearance(&grid, &one_ray(-3.0, [0.5; 3], 0.0), &cfg).unwrap();
    assert_eq!(loss, 0.0);
    assert!(g.is_zero());
    let empty = RayBatch::default();
    let (loss, g) = reconstruction_loss_appearance(&grid, &empty, &cfg).unwrap();
    assert_eq!(loss, 0.0);
    assert!(g.is_zero());
}

#[test]
fn reconstruction_gradient_matches_finite_differences() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 8 * 8 * 8;
    let d = (0..n).map(|_| rng.random_range(-2.0..1.0)).collect();
    let c = (0..3 * n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let grid = VoxelGrid::from_raw([8, 8, 8], Aabb::cube(1.0), d, c).unwrap();
    let cam = Camera::look_at([0.4, -2.8, 0.6], [0.0; 3], [0.0, 0.0, 1.0], 0.6, 3, 3);
    let rays = render::make_rays(&cam, 0.0, 100.0).unwrap();
    let batch = RayBatch {
        colors: (0..rays.len()).map(|_| [0; 3].map(|_| rng.random_range(0.0..1.0))).collect(),
        depths: (0..rays.len()).map(|_| rng.random_range(1.5..3.5)).collect(),
        rays,
    };
    let cfg = RenderConfig::with_sampling(SamplingConfig { samples: 12, stratified: true, seed: 4 });
    let rec = reconstruction(&grid, &batch, &cfg, 1.0, 0.1).unwrap();
    let num = numeric_gradient(&grid, FD_STEP, |g| {
        let r = reconstruction(g, &batch, &cfg, 1.0, 0.1).unwrap();
        r.loss_appearance + 0.1 * r.loss_depth
    });
    let (err, at) = max_relative_error(&rec.grad, &num);
    assert!(err <= 1e-6, "rel err {err} at {at}");
}

#[test]
fn adam_first_step_and_fixed_point() {
    let mut grid = VoxelGrid::filled([2, 2, 2], Aabb::cube(1.0), 0.5, [0.1, 0.2, 0.3]).unwrap();
    let before = grid.clone();
    let mut opt = OptimizerState::new(&grid, AdamConfig::default());
    let zero = ParamGradient::zeros_like(&grid);
    opt.update(&mut grid, &zero, 0.1);
    assert_eq!(grid, before);
    assert!(opt.m.is_zero() && opt.v.is_zero());
    assert_eq!(opt.step, 1);

    let mut g = ParamGradient::zeros_like(&grid);
    g.d_raw_density[0] = 3.0;
    g.d_raw_color[4] = -0.02;
    let mut opt = OptimizerState::new(&grid, AdamConfig::default());
    opt.update(&mut grid, &g, 0.1);
    // Bias-corrected first step: -lr * g / (|g| + eps).
    assert!((grid.raw_density()[0] - (0.5 - 0.1 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
    assert!((grid.raw_color()[4] - (0.2 + 0.1 * 0.02 / (0.02 + 1e-8))).abs() < 1e-15);
    assert_eq!(grid.raw_density()[1], 0.5);
}

#[test]
fn psnr_conventions() {
    assert_eq!(psnr(0.0), PSNR_CAP);
    assert!((psnr(0.25) - 6.0206).abs() < 1e-4);
    assert_eq!(psnr(1e-30), PSNR_CAP);
}

#[test]
fn ground_truth_field_scores_at_the_cap() {
    let cfg = tiny_config();
    let data = ExperimentData::generate(&cfg).unwrap();
    let rcfg = scene::reference_render_config(cfg.scene.sampling);
    let m = evaluate(data.target_grid.as_ref().unwrap(), &data.target, &rcfg).unwrap();
    assert!(m.psnr_masked >= 60.0 && m.psnr_unmasked >= 60.0, "{m:?}");
    assert!(m.depth_rmse < 1e-9 && m.normal_error_deg < 1e-6, "{m:?}");
}

#[test]
fn constant_render_against_constant_reference() {
    // A narrow camera facing an opaque gray cube sees 0.5 in every pixel.
    let gray = VoxelGrid::filled([2, 2, 2], Aabb::cube(1.0), 2000.0, [0.0; 3]).unwrap();
    let camera = Camera::look_at([0.0, 0.0, -3.0], [0.0; 3], [0.0, 1.0, 0.0], 0.3, 6, 6);
    let view = DatasetView {
        camera,
        image: Image::filled(6, 6, 3, 1.0),
        mask: Mask::new(6, 6),
        depth: Image::new(6, 6, 1),
        normal: Image::new(6, 6, 3),
    };
    let reference = SceneDataset { width: 6, height: 6, near: 0.0, far: 100.0, views: vec![view] };
    let rcfg = RenderConfig::with_sampling(SamplingConfig { samples: 4, stratified: false, seed: 0 });
    let m = evaluate(&gray, &reference, &rcfg).unwrap();
    assert!((m.psnr - 10.0 * 4f64.log10()).abs() < 1e-9, "{m:?}");
    assert!((m.psnr - 6.0206).abs() < 1e-4);
    assert_eq!(m.psnr_masked, PSNR_CAP);

    let same = SceneDataset { views: vec![DatasetView { image: Image::filled(6, 6, 3, 0.5), ..reference.views[0].clone() }], ..reference };
    assert_eq!(evaluate(&gray, &same, &rcfg).unwrap().psnr, PSNR_CAP);
}

#[test]
fn zero_distill_weights_reduce_to_reconstruction() {
    let mut cfg = tiny_config();
    let problem = tiny_problem(&cfg);
    cfg.train.loss.lambda2 = 0.0;
    cfg.train.loss.lambda3 = 0.0;
    let tc = &cfg.train;
    let mut a = fresh(&problem, tc);
    let mut b = fresh(&problem, tc);
    for step in 0..3 {
        train_step(&mut a, &problem, tc).unwrap();
        let batch = problem.sample_batch(&mut ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, step, STREAM_RAYS)), tc.batch_size);
        let rec = reconstruction(&b.grid, &batch, &tc.render_config(step), 1.0, tc.loss.lambda1).unwrap();
        b.optimizer.update(&mut b.grid, &rec.grad, tc.learning_rate);
    }
    assert_eq!(a, b);
}

#[test]
fn each_lambda_gates_its_term() {
    let cfg = tiny_config();
    let problem = tiny_problem(&cfg);
    let tc = &cfg.train;
    let grid = fresh(&problem, tc).grid;
    let (full, _) = step_gradient(&grid, &problem, tc, 0).unwrap();
    let mut no_rgb = tc.clone();
    no_rgb.loss.lambda2 = 0.0;
    let mut rgb_only = tc.clone();
    rgb_only.loss.lambda3 = 0.0;
    rgb_only.loss.lambda1 = 0.0;
    let mut base = tc.clone();
    base.loss = LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0 };
    let (g_no_rgb, r) = step_gradient(&grid, &problem, &no_rgb, 0).unwrap();
    assert_eq!(r.grad_norm_rgb_distill, 0.0);
    assert!(r.grad_norm_normal_distill > 0.0);
    let (g_rgb_only, _) = step_gradient(&grid, &problem, &rgb_only, 0).unwrap();
    let (g_base, _) = step_gradient(&grid, &problem, &base, 0).unwrap();
    // full = base + depth + rgb + normal; removing one term leaves the others bit-identical.
    let mut depth_and_normal = g_no_rgb.clone();
    depth_and_normal.add_scaled(&g_base, -1.0);
    let mut rgb = g_rgb_only.clone();
    rgb.add_scaled(&g_base, -1.0);
    let mut recombined = g_base.clone();
    recombined.add_scaled(&depth_and_normal, 1.0);
    recombined.add_scaled(&rgb, 1.0);
    let diff = recombined.iter().zip(full.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff <= 1e-12 * (1.0 + full.max_abs()), "{diff}");

    let mut no_depth = tc.clone();
    no_depth.depth_supervision = false;
    let (_, r) = step_gradient(&grid, &problem, &no_depth, 0).unwrap();
    assert_eq!(r.loss_depth, 0.0);
}

#[test]
fn bsd_and_zero_w3_csd_train_identically() {
    let mut cfg = tiny_config();
    let problem = tiny_problem(&cfg);
    cfg.train.estimator = Estimator::Bsd;
    let mut a = fresh(&problem, &cfg.train);
    run(&mut a, &problem, &cfg.train, None, |_, _| Ok(())).unwrap();
    cfg.train.estimator = Estimator::CsdW3;
    cfg.train.appearance.omega3 = 0.0;
    cfg.train.geometry.omega3 = 0.0;
    let mut b = fresh(&problem, &cfg.train);
    run(&mut b, &problem, &cfg.train, None, |_, _| Ok(())).unwrap();
    assert_eq!(a, b);
}

#[test]
fn resume_continues_bit_identically() {
    let cfg = tiny_config();
    let problem = tiny_problem(&cfg);
    let tc = &cfg.train;
    let dir = tempfile::tempdir().unwrap();
    let whole = RunOutput { dir: dir.path().join("whole"), timing: false };
    let mut a = fresh(&problem, tc);
    run(&mut a, &problem, tc, Some(&whole), |_, _| Ok(())).unwrap();

    // Same run in two parts through the checkpoint written at step 4.
    let split = RunOutput { dir: dir.path().join("split"), timing: true };
    let mut first = tc.clone();
    first.iterations = 4;
    let mut b = fresh(&problem, tc);
    run(&mut b, &problem, &first, Some(&split), |_, _| Ok(())).unwrap();
    let mut c = load_checkpoint(&split.dir.join("checkpoint")).unwrap();
    assert_eq!(c, b);
    run(&mut c, &problem, tc, Some(&split), |_, _| Ok(())).unwrap();
    assert_eq!(c, a);
    let m1 = fs::read(whole.dir.join("metrics.csv")).unwrap();
    let m2 = fs::read(split.dir.join("metrics.csv")).unwrap();
    assert_eq!(String::from_utf8(m1).unwrap(), String::from_utf8(m2).unwrap());
}

#[test]
fn checkpoint_rejects_other_versions() {
    let cfg = tiny_config();
    let state = TrainState::init([3, 3, 3], Aabb::cube(1.0), &cfg.train).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&state, dir.path()).unwrap();
    let path = dir.path().join("checkpoint.json");
    let text = fs::read_to_string(&path).unwrap().replace("\"version\": 1", "\"version\": 7");
    fs::write(&path, text).unwrap();
    let err = load_checkpoint(dir.path()).unwrap_err().to_string();
    assert!(err.contains("version 7"), "{err}");
}

#[test]
fn non_finite_field_aborts_without_updating() {
    let cfg = tiny_config();
    let problem = tiny_problem(&cfg);
    let mut state = fresh(&problem, &cfg.train);
    state.grid.raw_density_mut().iter_mut().for_each(|v| *v = f64::NAN);
    let before = state.optimizer.clone();
    let err = train_step(&mut state, &problem, &cfg.train).unwrap_err();
    assert!(matches!(err, TrainError::NonFinite(_)), "{err}");
    assert_eq!(state.optimizer, before);
}

#[test]
fn training_reduces_reconstruction_loss() {
    let mut cfg = tiny_config();
    let problem = tiny_problem(&cfg);
    cfg.train.loss = LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0 };
    cfg.train.depth_supervision = false;
    cfg.train.iterations = 100;
    cfg.train.log_every = 1;
    let mut s = fresh(&problem, &cfg.train);
    // Compare on a fixed batch so sampling noise does not hide progress.
    let batch = problem.sample_batch(&mut ChaCha8Rng::seed_from_u64(99), 256);
    let rcfg = cfg.train.render_config(0);
    let (l0, _) = reconstruction_loss_appearance(&s.grid, &batch, &rcfg).unwrap();
    let logs = run(&mut s, &problem, &cfg.train, None, |_, _| Ok(())).unwrap();
    assert_eq!(logs.len(), 100);
    assert!(logs.iter().all(|r| r.is_finite() && r.loss_appearance >= 0.0 && r.loss_depth >= 0.0));
    let (l1, _) = reconstruction_loss_appearance(&s.grid, &batch, &rcfg).unwrap();
    assert!(l1 < 0.5 * l0, "{l0} -> {l1}");
}

#[test]
fn high_frequency_energy_of_flat_and_striped_regions() {
    let mut img = Image::filled(4, 4, 3, 0.3);
    let mask = Mask::from_bits(4, 4, vec![true; 16]);
    assert_eq!(masked_high_frequency_energy(&img, &mask), 0.0);
    for y in 0..4 {
        for c in 0..3 {
            img.set(1, y, c, 1.3);
        }
    }
    assert!(masked_high_frequency_energy(&img, &mask) > 0.0);
}
