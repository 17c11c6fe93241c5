//! Reconstruction plus masked distillation, optimized with Adam.
//!
//! Total objective per step:
//!
//! ```text
//! L = L_rgb(unmasked) + l1 * L_depth(unmasked) + l2 * L_distill(RGB) + l3 * L_distill(normal)
//! ```
//!
//! Randomness is derived from `(seed, step)` alone, so a run resumed from a
//! checkpoint continues exactly like an uninterrupted one.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::{self, DistillError, DistillSetup, DistillWeights, Estimator};
use crate::field::{FieldError, ParamGradient, VoxelGrid};
use crate::image::{Image, Mask};
use crate::prior::{AnalyticPrior, Modality, NoiseSchedule, PriorError};
use crate::render::{self, Camera, Ray, RayUpstream, RenderConfig, RenderError, SamplingConfig};
use crate::scene::SceneDataset;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite values at step {}: {}", .0.step, .0.summary())]
    NonFinite(Box<StepReport>),
    #[error("view {view}: {what}")]
    Data { view: usize, what: String },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.1, lambda2: 1e-4, lambda3: 1e-4 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainError> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(TrainError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Initial raw values for a fresh field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub raw_density: f64,
    pub raw_color: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { raw_density: -2.0, raw_color: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub seed: u64,
    pub estimator: Estimator,
    pub appearance: DistillWeights,
    pub geometry: DistillWeights,
    pub loss: LossWeights,
    pub depth_supervision: bool,
    /// Long side of the distillation render, in pixels.
    pub distill_resolution: usize,
    /// Samples per ray for every training render.
    pub samples: usize,
    pub stratified: bool,
    /// Multiply distillation gradients by `sqrt(alpha_bar(t))`.
    pub chain_sqrt_alpha_bar: bool,
    pub adam: AdamConfig,
    pub init: InitConfig,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            learning_rate: 1e-4,
            batch_size: 1024,
            t_min: 0.02,
            t_max: 0.98,
            seed: 0,
            estimator: Estimator::Bsd,
            appearance: DistillWeights::appearance(),
            geometry: DistillWeights::geometry(),
            loss: LossWeights::default(),
            depth_supervision: true,
            distill_resolution: 64,
            samples: 32,
            stratified: true,
            chain_sqrt_alpha_bar: true,
            adam: AdamConfig::default(),
            init: InitConfig::default(),
            log_every: 50,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(0.0 <= self.t_min && self.t_min < self.t_max && self.t_max <= 1.0) {
            return bad(format!("need 0 <= t_min < t_max <= 1, got [{}, {}]", self.t_min, self.t_max));
        }
        if self.iterations == 0 || self.batch_size == 0 || self.distill_resolution == 0 {
            return bad("iterations, batch_size and distill_resolution must be positive".into());
        }
        if self.samples < 2 {
            return bad(format!("samples must be >= 2, got {}", self.samples));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.appearance.is_finite() && self.geometry.is_finite()) {
            return bad("distillation weights must be finite".into());
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad(format!("invalid Adam constants {a:?}"));
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return bad("log_every and checkpoint_every must be positive".into());
        }
        self.loss.validate()
    }

    pub fn render_config(&self, step: u64) -> RenderConfig {
        RenderConfig {
            sampling: SamplingConfig { samples: self.samples, stratified: self.stratified, seed: derive_seed(self.seed, step, 0) },
            normals: false,
            ..RenderConfig::default()
        }
    }
}

/// Stateless stream seed for `(seed, step, stream)`.
pub fn derive_seed(seed: u64, step: u64, stream: u64) -> u64 {
    render::mix_seed(render::mix_seed(seed, step), stream)
}

const STREAM_RAYS: u64 = 1;
const STREAM_VIEW: u64 = 2;
const STREAM_RGB: u64 = 3;
const STREAM_NORMAL: u64 = 4;

/// Adam moments over every raw parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: ParamGradient,
    pub v: ParamGradient,
    pub step: u64,
    pub cfg: AdamConfig,
}

impl OptimizerState {
    pub fn new(grid: &VoxelGrid, cfg: AdamConfig) -> Self {
        Self { m: ParamGradient::zeros_like(grid), v: ParamGradient::zeros_like(grid), step: 0, cfg }
    }

    /// One descent step on `grad`.
    pub fn update(&mut self, grid: &mut VoxelGrid, grad: &ParamGradient, lr: f64) {
        assert!(grad.matches(grid) && self.m.matches(grid), "optimizer state does not match the field");
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let mut delta = ParamGradient::zeros_like(grid);
        for (((d, g), m), v) in delta.iter_mut().zip(grad.iter()).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *d = -lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
        grid.apply_update(&delta);
    }
}

/// Distillation inputs for one training view.
#[derive(Debug, Clone)]
pub struct ViewPriors {
    /// Camera at the distillation resolution.
    pub camera: Camera,
    /// Mask resampled to the distillation resolution.
    pub mask: Mask,
    pub rgb: AnalyticPrior,
    pub normal: AnalyticPrior,
}

/// A training dataset plus per-view priors, with the unmasked pixel pool.
#[derive(Debug, Clone)]
pub struct TrainingProblem {
    pub dataset: SceneDataset,
    pub priors: Vec<ViewPriors>,
    pub schedule: NoiseSchedule,
    unmasked: Vec<(u32, u32)>,
}

impl TrainingProblem {
    pub fn new(dataset: SceneDataset, priors: Vec<ViewPriors>, schedule: NoiseSchedule) -> Result<Self, TrainError> {
        schedule.validate()?;
        if priors.len() != dataset.views.len() {
            return Err(TrainError::Config(format!("{} priors for {} views", priors.len(), dataset.views.len())));
        }
        for (view, p) in priors.iter().enumerate() {
            let (w, h) = (p.camera.width, p.camera.height);
            if (p.mask.width(), p.mask.height()) != (w, h)
                || p.rgb.shape() != (w, h, 3)
                || p.normal.shape() != (w, h, 3)
            {
                return Err(TrainError::Data { view, what: "prior, mask and distillation camera disagree in size".into() });
            }
            if p.rgb.modality != Modality::Rgb || p.normal.modality != Modality::Normal {
                return Err(TrainError::Data { view, what: "prior modalities are swapped".into() });
            }
        }
        let mut unmasked = Vec::new();
        for (v, view) in dataset.views.iter().enumerate() {
            for i in 0..dataset.width * dataset.height {
                if !view.mask.get(i) {
                    unmasked.push((v as u32, i as u32));
                }
            }
        }
        Ok(Self { dataset, priors, schedule, unmasked })
    }

    pub fn unmasked_pixel_count(&self) -> usize {
        self.unmasked.len()
    }

    /// `batch` unmasked pixels drawn uniformly with replacement.
    pub fn sample_batch<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize) -> RayBatch {
        let w = self.dataset.width;
        let mut out = RayBatch::default();
        if self.unmasked.is_empty() {
            return out;
        }
        for _ in 0..batch {
            let (v, i) = self.unmasked[rng.random_range(0..self.unmasked.len())];
            let view = &self.dataset.views[v as usize];
            let i = i as usize;
            out.rays.push(view.camera.ray(i % w, i / w, self.dataset.near, self.dataset.far));
            let c = view.image.pixel(i);
            out.colors.push([c[0], c[1], c[2]]);
            out.depths.push(view.depth.data()[i]);
        }
        out
    }
}

/// Supervised rays with their targets.
#[derive(Debug, Clone, Default)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub colors: Vec<[f64; 3]>,
    pub depths: Vec<f64>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

/// Loss values and the gradient of `L_rgb + depth_weight * L_depth`.
#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    pub loss_appearance: f64,
    pub loss_depth: f64,
    pub grad: ParamGradient,
}

/// Sum-of-squares color and depth losses over `batch` with one fused render.
pub fn reconstruction(
    grid: &VoxelGrid,
    batch: &RayBatch,
    cfg: &RenderConfig,
    color_weight: f64,
    depth_weight: f64,
) -> Result<ReconstructionResult, TrainError> {
    if batch.is_empty() {
        return Ok(ReconstructionResult { loss_appearance: 0.0, loss_depth: 0.0, grad: ParamGradient::zeros_like(grid) });
    }
    let mut cfg = *cfg;
    cfg.normals = false;
    let (samples, tape) = render::render_rays_taped(grid, &batch.rays, &cfg)?;
    let (mut la, mut ld) = (0.0, 0.0);
    let upstream: Vec<RayUpstream> = samples
        .iter()
        .enumerate()
        .map(|(r, s)| {
            let mut up = RayUpstream::default();
            for k in 0..3 {
                let e = s.color[k] - batch.colors[r][k];
                la += e * e;
                up.d_color[k] = color_weight * 2.0 * e;
            }
            let e = s.depth - batch.depths[r];
            ld += e * e;
            up.d_depth = depth_weight * 2.0 * e;
            up
        })
        .collect();
    let grad = if color_weight == 0.0 && depth_weight == 0.0 {
        ParamGradient::zeros_like(grid)
    } else {
        render::render_vjp(grid, &tape, &upstream)?
    };
    Ok(ReconstructionResult { loss_appearance: la, loss_depth: ld, grad })
}

/// `sum_r |C_hat(r) - C(r)|^2` and its gradient.
pub fn reconstruction_loss_appearance(
    grid: &VoxelGrid,
    batch: &RayBatch,
    cfg: &RenderConfig,
) -> Result<(f64, ParamGradient), TrainError> {
    let r = reconstruction(grid, batch, cfg, 1.0, 0.0)?;
    Ok((r.loss_appearance, r.grad))
}

/// `sum_r (D_hat(r) - D(r))^2` and its gradient.
pub fn reconstruction_loss_depth(
    grid: &VoxelGrid,
    batch: &RayBatch,
    cfg: &RenderConfig,
) -> Result<(f64, ParamGradient), TrainError> {
    let r = reconstruction(grid, batch, cfg, 0.0, 1.0)?;
    Ok((r.loss_depth, r.grad))
}

/// Per-step diagnostics. Gradient norms are of the weighted contributions.
/// After [`train_step`], `step` counts completed steps (the first is 1).
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StepReport {
    pub step: u64,
    pub loss_appearance: f64,
    pub loss_depth: f64,
    pub grad_norm_reconstruction: f64,
    pub grad_norm_rgb_distill: f64,
    pub grad_norm_normal_distill: f64,
    pub grad_norm_total: f64,
    pub distill_view: usize,
    pub t_rgb: f64,
    pub t_normal: f64,
}

impl StepReport {
    pub const CSV_HEADER: &'static str = "step,loss_appearance,loss_depth,grad_norm_reconstruction,grad_norm_rgb_distill,grad_norm_normal_distill,grad_norm_total,distill_view,t_rgb,t_normal";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{},{},{}",
            self.step,
            self.loss_appearance,
            self.loss_depth,
            self.grad_norm_reconstruction,
            self.grad_norm_rgb_distill,
            self.grad_norm_normal_distill,
            self.grad_norm_total,
            self.distill_view,
            self.t_rgb,
            self.t_normal
        )
    }

    pub fn is_finite(&self) -> bool {
        [
            self.loss_appearance,
            self.loss_depth,
            self.grad_norm_reconstruction,
            self.grad_norm_rgb_distill,
            self.grad_norm_normal_distill,
            self.grad_norm_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn summary(&self) -> String {
        format!(
            "L_rgb={:.6e} L_depth={:.6e} |g_rec|={:.3e} |g_rgb|={:.3e} |g_nrm|={:.3e}",
            self.loss_appearance,
            self.loss_depth,
            self.grad_norm_reconstruction,
            self.grad_norm_rgb_distill,
            self.grad_norm_normal_distill
        )
    }
}

/// Field and optimizer, advanced together.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub grid: VoxelGrid,
    pub optimizer: OptimizerState,
}

impl TrainState {
    /// Fresh field on the dataset's grid layout.
    pub fn init(dims: [usize; 3], bbox: crate::field::Aabb, cfg: &TrainConfig) -> Result<Self, TrainError> {
        let c = cfg.init.raw_color;
        let grid = VoxelGrid::filled(dims, bbox, cfg.init.raw_density, [c, c, c])?;
        let optimizer = OptimizerState::new(&grid, cfg.adam);
        Ok(Self { grid, optimizer })
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }
}

/// The full gradient of the objective at `step`, without updating anything.
pub fn step_gradient(
    grid: &VoxelGrid,
    problem: &TrainingProblem,
    cfg: &TrainConfig,
    step: u64,
) -> Result<(ParamGradient, StepReport), TrainError> {
    let rcfg = cfg.render_config(step);
    let mut report = StepReport { step, ..StepReport::default() };

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, step, STREAM_RAYS));
    let batch = problem.sample_batch(&mut rng, cfg.batch_size);
    let depth_weight = if cfg.depth_supervision { cfg.loss.lambda1 } else { 0.0 };
    let rec = reconstruction(grid, &batch, &rcfg, 1.0, depth_weight)?;
    report.loss_appearance = rec.loss_appearance;
    report.loss_depth = if cfg.depth_supervision { rec.loss_depth } else { 0.0 };
    report.grad_norm_reconstruction = rec.grad.norm();
    let mut total = rec.grad;

    let view = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, step, STREAM_VIEW)).random_range(0..problem.priors.len());
    report.distill_view = view;
    let vp = &problem.priors[view];
    // When both terms need the whole image, render the unmasked pixels once
    // with normals; the color channels do not depend on the normals flag.
    let uses_full = |lambda: f64, w: &DistillWeights| lambda != 0.0 && cfg.estimator.uses_unconditional(w);
    let shared = if uses_full(cfg.loss.lambda2, &cfg.appearance) && uses_full(cfg.loss.lambda3, &cfg.geometry) {
        let full = RenderConfig { normals: true, ..rcfg };
        Some(distill::render_unmasked(grid, &vp.camera, &vp.mask, &full)?)
    } else {
        None
    };
    for (modality, lambda, weights, stream) in [
        (Modality::Rgb, cfg.loss.lambda2, &cfg.appearance, STREAM_RGB),
        (Modality::Normal, cfg.loss.lambda3, &cfg.geometry, STREAM_NORMAL),
    ] {
        if lambda == 0.0 {
            continue;
        }
        let setup = DistillSetup {
            grid,
            camera: &vp.camera,
            modality,
            estimator: cfg.estimator,
            weights,
            mask: &vp.mask,
            prior: if modality == Modality::Rgb { &vp.rgb } else { &vp.normal },
            schedule: &problem.schedule,
            t_range: (cfg.t_min, cfg.t_max),
            render: &rcfg,
            chain_sqrt_alpha_bar: cfg.chain_sqrt_alpha_bar,
            unmasked: shared.as_deref(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, step, stream));
        let out = distill::distill_param_grad(&setup, &mut rng)?;
        let norm = lambda * out.grad.norm();
        match modality {
            Modality::Rgb => (report.grad_norm_rgb_distill, report.t_rgb) = (norm, out.t),
            Modality::Normal => (report.grad_norm_normal_distill, report.t_normal) = (norm, out.t),
        }
        total.add_scaled(&out.grad, lambda);
    }
    report.grad_norm_total = total.norm();
    Ok((total, report))
}

/// One optimization step. Non-finite losses or gradients leave the state untouched.
pub fn train_step(state: &mut TrainState, problem: &TrainingProblem, cfg: &TrainConfig) -> Result<StepReport, TrainError> {
    let step = state.optimizer.step;
    let (grad, report) = step_gradient(&state.grid, problem, cfg, step)?;
    if !report.is_finite() || !grad.is_finite() {
        return Err(TrainError::NonFinite(Box::new(report)));
    }
    state.optimizer.update(&mut state.grid, &grad, cfg.learning_rate);
    Ok(StepReport { step: state.optimizer.step, ..report })
}

/// Image-quality metrics over a set of views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub psnr: f64,
    pub psnr_masked: f64,
    pub psnr_unmasked: f64,
    pub mse_masked: f64,
    pub depth_rmse: f64,
    pub normal_error_deg: f64,
    /// [`masked_high_frequency_energy`] of the color render, averaged over
    /// views with a non-empty mask.
    pub hf_energy_masked: f64,
}

/// Sentinel for zero error.
pub const PSNR_CAP: f64 = 99.0;

/// PSNR of a mean squared error on `[0, 1]` images, capped at [`PSNR_CAP`].
pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

/// Running sum of squared errors.
#[derive(Debug, Clone, Copy, Default)]
struct Sse {
    sum: f64,
    count: usize,
}

impl Sse {
    fn add(&mut self, e: f64) {
        self.sum += e * e;
        self.count += 1;
    }

    fn mse(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

/// Render every view of `reference` at its resolution and compare. Masked
/// metrics use each view's mask; normals are compared where both the
/// reference and the render have a well-defined unit normal.
pub fn evaluate(grid: &VoxelGrid, reference: &SceneDataset, cfg: &RenderConfig) -> Result<EvalMetrics, TrainError> {
    let cfg = RenderConfig { normals: true, ..*cfg };
    let (mut all, mut masked, mut unmasked, mut depth) = (Sse::default(), Sse::default(), Sse::default(), Sse::default());
    let (mut angle_sum, mut angle_n) = (0.0, 0usize);
    let (mut hf_sum, mut hf_n) = (0.0, 0usize);
    for view in &reference.views {
        let out = render::render(grid, &view.camera, &cfg)?;
        if view.mask.count() > 0 {
            hf_sum += masked_high_frequency_energy(&out.color, &view.mask);
            hf_n += 1;
        }
        for i in 0..reference.width * reference.height {
            let (a, b) = (out.color.pixel(i), view.image.pixel(i));
            for k in 0..3 {
                let e = a[k] - b[k];
                all.add(e);
                if view.mask.get(i) {
                    masked.add(e);
                } else {
                    unmasked.add(e);
                }
            }
            depth.add(out.depth.data()[i] - view.depth.data()[i]);
            let (n1, n2) = (out.normal.pixel(i), view.normal.pixel(i));
            let (l1, l2) = (crate::math::norm([n1[0], n1[1], n1[2]]), crate::math::norm([n2[0], n2[1], n2[2]]));
            if l1 > 0.5 && l2 > 0.5 {
                let c = (n1[0] * n2[0] + n1[1] * n2[1] + n1[2] * n2[2]) / (l1 * l2);
                angle_sum += c.clamp(-1.0, 1.0).acos().to_degrees();
                angle_n += 1;
            }
        }
    }
    Ok(EvalMetrics {
        psnr: psnr(all.mse()),
        psnr_masked: psnr(masked.mse()),
        psnr_unmasked: psnr(unmasked.mse()),
        mse_masked: masked.mse(),
        depth_rmse: depth.mse().sqrt(),
        normal_error_deg: if angle_n == 0 { 0.0 } else { angle_sum / angle_n as f64 },
        hf_energy_masked: if hf_n == 0 { 0.0 } else { hf_sum / hf_n as f64 },
    })
}

/// Mean gradient magnitude of the masked region of `img` (finite differences
/// to the right and below, both pixels masked). Higher means sharper.
pub fn masked_high_frequency_energy(img: &Image, mask: &Mask) -> f64 {
    let (w, h) = (img.width(), img.height());
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask.get(i) {
                continue;
            }
            for (dx, dy) in [(1, 0), (0, 1)] {
                let (x2, y2) = (x + dx, y + dy);
                if x2 >= w || y2 >= h || !mask.get(y2 * w + x2) {
                    continue;
                }
                let d: f64 = (0..img.channels()).map(|c| (img.get(x2, y2, c) - img.get(x, y, c)).powi(2)).sum();
                sum += d.sqrt();
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

const CHECKPOINT_FORMAT: &str = "distill-lab-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;
const MOMENTS_MAGIC: &[u8; 4] = b"ADM1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    format: String,
    version: u32,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    grid: String,
    moments: String,
}

/// Write `grid.vxg`, `moments.bin` and `checkpoint.json` into `dir`.
pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<(), TrainError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    state.grid.save(&dir.join("grid.vxg"))?;
    let mpath = dir.join("moments.bin");
    let mut w = BufWriter::new(fs::File::create(&mpath).map_err(io_err(&mpath))?);
    let mut buf = Vec::with_capacity(12 + 16 * state.optimizer.m.len());
    buf.extend_from_slice(MOMENTS_MAGIC);
    buf.extend_from_slice(&(state.optimizer.m.len() as u64).to_le_bytes());
    for v in state.optimizer.m.iter().chain(state.optimizer.v.iter()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).and_then(|_| w.flush()).map_err(io_err(&mpath))?;
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        step: state.optimizer.step,
        beta1: state.optimizer.cfg.beta1,
        beta2: state.optimizer.cfg.beta2,
        eps: state.optimizer.cfg.eps,
        grid: "grid.vxg".into(),
        moments: "moments.bin".into(),
    };
    let jpath = dir.join("checkpoint.json");
    fs::write(&jpath, serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n").map_err(io_err(&jpath))
}

pub fn load_checkpoint(dir: &Path) -> Result<TrainState, TrainError> {
    let jpath = dir.join("checkpoint.json");
    let bad = |reason: String| TrainError::Checkpoint { path: jpath.clone(), reason };
    let text = fs::read_to_string(&jpath).map_err(io_err(&jpath))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if meta.format != CHECKPOINT_FORMAT || meta.version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "stored format {:?} version {} is not {CHECKPOINT_FORMAT:?} version {CHECKPOINT_VERSION}",
            meta.format, meta.version
        )));
    }
    let grid = VoxelGrid::load(&dir.join(&meta.grid))?;
    let mpath = dir.join(&meta.moments);
    let mut bytes = Vec::new();
    BufReader::new(fs::File::open(&mpath).map_err(io_err(&mpath))?)
        .read_to_end(&mut bytes)
        .map_err(io_err(&mpath))?;
    if bytes.len() < 12 || &bytes[..4] != MOMENTS_MAGIC {
        return Err(bad(format!("{} is not an ADM1 moments file", mpath.display())));
    }
    let n = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    if n != grid.param_count() || bytes.len() != 12 + 16 * n {
        return Err(bad(format!("moments hold {n} parameters, grid has {}", grid.param_count())));
    }
    let vals: Vec<f64> = bytes[12..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let cfg = AdamConfig { beta1: meta.beta1, beta2: meta.beta2, eps: meta.eps };
    let mut optimizer = OptimizerState::new(&grid, cfg);
    optimizer.step = meta.step;
    for (dst, src) in optimizer.m.iter_mut().zip(&vals[..n]) {
        *dst = *src;
    }
    for (dst, src) in optimizer.v.iter_mut().zip(&vals[n..]) {
        *dst = *src;
    }
    Ok(TrainState { grid, optimizer })
}

/// Where a training run writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    /// Also write per-log-step wall time to `timing.csv`.
    pub timing: bool,
}

/// Run from the current state up to `cfg.iterations`, logging every
/// `log_every` steps (plus the last) and checkpointing every
/// `checkpoint_every`. `on_log` sees the state after each logged step.
pub fn run(
    state: &mut TrainState,
    problem: &TrainingProblem,
    cfg: &TrainConfig,
    output: Option<&RunOutput>,
    mut on_log: impl FnMut(&TrainState, &StepReport) -> Result<(), TrainError>,
) -> Result<Vec<StepReport>, TrainError> {
    cfg.validate()?;
    let started = std::time::Instant::now();
    let mut metrics = None;
    let mut timing = None;
    if let Some(out) = output {
        fs::create_dir_all(&out.dir).map_err(io_err(&out.dir))?;
        metrics = Some(CsvAppender::open(&out.dir.join("metrics.csv"), StepReport::CSV_HEADER, state.step())?);
        if out.timing {
            timing = Some(CsvAppender::open(&out.dir.join("timing.csv"), "step,wall_seconds", state.step())?);
        }
    }
    let mut logged = Vec::new();
    while state.step() < cfg.iterations {
        let report = match train_step(state, problem, cfg) {
            Ok(r) => r,
            Err(e) => {
                if let Some(m) = metrics.as_mut() {
                    m.flush()?;
                }
                return Err(e);
            }
        };
        let done = state.step();
        if done % cfg.log_every == 0 || done == cfg.iterations || done == 1 {
            if let Some(m) = metrics.as_mut() {
                m.row(&report.csv_row())?;
            }
            if let Some(t) = timing.as_mut() {
                t.row(&format!("{},{:.3}", report.step, started.elapsed().as_secs_f64()))?;
            }
            on_log(state, &report)?;
            logged.push(report);
        }
        if let Some(out) = output {
            if done % cfg.checkpoint_every == 0 || done == cfg.iterations {
                save_checkpoint(state, &out.dir.join("checkpoint"))?;
            }
        }
    }
    if let Some(m) = metrics.as_mut() {
        m.flush()?;
    }
    if let Some(t) = timing.as_mut() {
        t.flush()?;
    }
    Ok(logged)
}

/// Appends rows to a CSV file. When resuming after `from_step > 0` completed
/// steps, rows for later steps are dropped first so a resumed run rewrites
/// them identically.
struct CsvAppender {
    path: PathBuf,
    w: BufWriter<fs::File>,
}

impl CsvAppender {
    fn open(path: &Path, header: &str, from_step: u64) -> Result<Self, TrainError> {
        let mut kept = String::new();
        if from_step > 0 {
            if let Ok(text) = fs::read_to_string(path) {
                for (i, line) in text.lines().enumerate() {
                    let keep = i == 0
                        || line.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= from_step);
                    if keep {
                        kept.push_str(line);
                        kept.push('\n');
                    }
                }
            }
        }
        if kept.is_empty() {
            kept = format!("{header}\n");
        }
        let mut w = BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
        w.write_all(kept.as_bytes()).map_err(io_err(path))?;
        Ok(Self { path: path.to_path_buf(), w })
    }

    fn row(&mut self, line: &str) -> Result<(), TrainError> {
        writeln!(self.w, "{line}").map_err(io_err(&self.path))
    }

    fn flush(&mut self) -> Result<(), TrainError> {
        self.w.flush().map_err(io_err(&self.path))
    }
}

#[cfg(test)]
mod tests;
