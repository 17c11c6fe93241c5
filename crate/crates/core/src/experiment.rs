//! Declarative experiment configuration and the data it resolves to.
//!
//! A config names a scene (or a generated dataset directory), prior settings
//! per modality and the training settings. Unknown keys are rejected and
//! every error carries the JSON path of the offending field.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::VoxelGrid;
use crate::image::Image;
use crate::prior::{AnalyticPrior, GaussianComponent, Modality, NoiseSchedule, PriorError};
use crate::render::{self, Camera, RenderConfig, SamplingConfig};
use crate::scene::{self, DatasetError, SceneDataset, SceneError, SceneSetup};
use crate::trainer::{TrainConfig, TrainError, TrainingProblem, ViewPriors};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error("{0}")]
    Other(String),
}

/// Gaussian prior settings for one modality. The positive mean is the
/// object-free target render; the negative mean is its box blur.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub positive_variance: f64,
    pub negative_variance: f64,
    pub negative_blur_radius: usize,
    /// Weight of the positive component in the unconditional mixture.
    pub mix_weight: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { positive_variance: 0.01, negative_variance: 0.05, negative_blur_radius: 2, mix_weight: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorsConfig {
    pub schedule: NoiseSchedule,
    pub rgb: PriorConfig,
    pub normal: PriorConfig,
}

/// Settings for evaluation renders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub samples: usize,
    /// Evaluate every this many steps (0: only at the end).
    pub every: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { samples: 64, every: 0 }
    }
}

impl EvalConfig {
    pub fn render_config(&self) -> RenderConfig {
        RenderConfig::with_sampling(SamplingConfig { samples: self.samples, stratified: false, seed: 0 })
    }
}

fn default_name() -> String {
    "experiment".into()
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

fn default_omega3_values() -> Vec<f64> {
    vec![-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0]
}

/// Settings read only by the benchmark suites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub omega3_values: Vec<f64>,
    /// Apply the swept omega3 to the geometry term as well as the
    /// appearance term; when false the geometry term keeps omega3 = 0.
    pub omega3_geometry: bool,
    pub variance_draws: usize,
    pub compare_estimators: Vec<crate::distill::Estimator>,
    pub gradcheck_trials: usize,
    pub identity_instances: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        use crate::distill::Estimator;
        Self {
            omega3_values: default_omega3_values(),
            omega3_geometry: true,
            variance_draws: 10_000,
            compare_estimators: vec![Estimator::Sds, Estimator::Csd, Estimator::Bsd],
            gradcheck_trials: 4,
            identity_instances: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub scene: SceneSetup,
    /// Directory written by `genscene`; when absent, data is generated in memory.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub priors: PriorsConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

/// The committed JSON schema for [`ExperimentConfig`].
pub const EXPERIMENT_SCHEMA: &str = include_str!("../../../schema/experiment.schema.json");

impl ExperimentConfig {
    /// Canonical scene with default settings.
    pub fn canonical() -> Self {
        Self {
            name: default_name(),
            scene: scene::canonical_setup(),
            dataset: None,
            priors: PriorsConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
            output: None,
            seeds: default_seeds(),
        }
    }

    /// A seconds-scale setup for smoke tests: 8^3 grid, four 12x12 views,
    /// 8x8 distillation renders, six steps.
    pub fn smoke() -> Self {
        use crate::field::Aabb;
        use crate::scene::{CameraRing, Primitive, SceneSpec};
        let mut cfg = Self::canonical();
        cfg.name = "smoke".into();
        cfg.scene = SceneSetup {
            scene: SceneSpec {
                dims: [8, 8, 8],
                bbox: Aabb::cube(1.0),
                primitives: vec![
                    Primitive::Box { min: [-1.0, -1.0, -1.0], max: [1.0, 1.0, -0.5], color: [0.6, 0.5, 0.4], density: 20.0, removable: false },
                    Primitive::Sphere { center: [0.1, 0.0, -0.1], radius: 0.35, color: [0.9, 0.7, 0.1], density: 20.0, removable: true },
                ],
                smoothing_voxels: 1.5,
            },
            cameras: CameraRing { count: 4, radius: 3.0, elevation_deg: 30.0, target: [0.0, 0.0, -0.3], fov_x_deg: 50.0, width: 12, height: 12 },
            mask_box: Aabb::new([-0.3, -0.4, -0.5], [0.5, 0.4, 0.3]),
            sampling: SamplingConfig { samples: 16, stratified: false, seed: 0 },
        };
        cfg.train.distill_resolution = 8;
        cfg.train.samples = 8;
        cfg.train.batch_size = 64;
        cfg.train.learning_rate = 0.05;
        cfg.train.iterations = 6;
        cfg.train.log_every = 2;
        cfg.train.checkpoint_every = 2;
        cfg.eval.samples = 16;
        cfg.bench.variance_draws = 1000;
        cfg.bench.gradcheck_trials = 1;
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::Invalid { path: if path == "." { "<root>".into() } else { path }, message: e.into_inner().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    /// Fully resolved config, defaults expanded.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |path: &str, message: String| Err(ConfigError::Invalid { path: path.into(), message });
        if let Err(e) = self.scene.scene.validate() {
            return invalid("scene.scene", e.to_string());
        }
        if let Err(e) = self.scene.cameras.cameras() {
            return invalid("scene.cameras", e.to_string());
        }
        if self.scene.sampling.samples < 2 {
            return invalid("scene.sampling.samples", "must be >= 2".into());
        }
        if let Err(e) = self.priors.schedule.validate() {
            return invalid("priors.schedule", e.to_string());
        }
        for (name, p) in [("priors.rgb", &self.priors.rgb), ("priors.normal", &self.priors.normal)] {
            if !(p.positive_variance > 0.0 && p.negative_variance > 0.0) {
                return invalid(name, "variances must be positive".into());
            }
            if !(0.0..=1.0).contains(&p.mix_weight) {
                return invalid(&format!("{name}.mix_weight"), format!("must lie in [0, 1], got {}", p.mix_weight));
            }
        }
        if let Err(TrainError::Config(m)) = self.train.validate() {
            return invalid("train", m);
        }
        if self.eval.samples < 2 {
            return invalid("eval.samples", "must be >= 2".into());
        }
        if self.eval.every > 0 && self.eval.every % self.train.log_every != 0 {
            return invalid("eval.every", format!("must be a multiple of train.log_every ({})", self.train.log_every));
        }
        if self.seeds.is_empty() {
            return invalid("seeds", "at least one seed is required".into());
        }
        if self.bench.variance_draws < 1000 {
            return invalid("bench.variance_draws", "must be >= 1000".into());
        }
        if !self.bench.omega3_values.contains(&0.0) {
            return invalid("bench.omega3_values", "must include 0".into());
        }
        Ok(())
    }
}

/// Square-pixel distillation camera with the given long side.
pub fn distill_camera(camera: &Camera, long_side: usize) -> Camera {
    let (w, h) = (camera.width as f64, camera.height as f64);
    let s = long_side as f64 / w.max(h);
    camera.resized(((w * s).round() as usize).max(1), ((h * s).round() as usize).max(1))
}

/// Positive prior means per view at the distillation resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMeans {
    pub rgb: Vec<Image>,
    /// Encoded as `(n + 1) / 2`.
    pub normal: Vec<Image>,
}

/// Render the object-free grid from every distillation camera.
pub fn render_prior_means(target: &VoxelGrid, cameras: &[Camera], sampling: SamplingConfig) -> Result<PriorMeans, DataError> {
    let cfg = scene::reference_render_config(sampling);
    let mut means = PriorMeans { rgb: Vec::new(), normal: Vec::new() };
    for cam in cameras {
        let out = render::render(target, cam, &cfg).map_err(SceneError::from)?;
        means.normal.push(out.normal_encoded());
        means.rgb.push(out.color);
    }
    Ok(means)
}

/// Training views, the object-free reference views and the prior means.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: SceneDataset,
    pub target: SceneDataset,
    pub priors: PriorMeans,
    pub target_grid: Option<VoxelGrid>,
    pub full_grid: Option<VoxelGrid>,
}

impl ExperimentData {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self, DataError> {
        let g = scene::generate(&cfg.scene)?;
        let cams: Vec<Camera> =
            g.train.views.iter().map(|v| distill_camera(&v.camera, cfg.train.distill_resolution)).collect();
        let priors = render_prior_means(&g.target_grid, &cams, cfg.scene.sampling)?;
        Ok(Self { train: g.train, target: g.target, priors, target_grid: Some(g.target_grid), full_grid: Some(g.full_grid) })
    }

    /// Layout: `train/`, `target/` (datasets), `priors/{rgb,normal}_view_%03d.pfm`,
    /// and the two ground-truth grids.
    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        scene::save_dataset(&self.train, &dir.join("train"))?;
        scene::save_dataset(&self.target, &dir.join("target"))?;
        let pdir = dir.join("priors");
        fs::create_dir_all(&pdir).map_err(|source| DatasetError::Io { path: pdir.clone(), source })?;
        for (i, (rgb, nrm)) in self.priors.rgb.iter().zip(&self.priors.normal).enumerate() {
            rgb.write_pfm(&pdir.join(format!("rgb_view_{i:03}.pfm"))).map_err(DatasetError::from)?;
            nrm.write_pfm(&pdir.join(format!("normal_view_{i:03}.pfm"))).map_err(DatasetError::from)?;
        }
        for (name, grid) in [("full.vxg", &self.full_grid), ("target.vxg", &self.target_grid)] {
            if let Some(g) = grid {
                g.save(&dir.join(name)).map_err(|e| DataError::Other(e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let train = scene::load_dataset(&dir.join("train"))?;
        let target = scene::load_dataset(&dir.join("target"))?;
        if target.views.len() != train.views.len() {
            return Err(DataError::Other("train and target datasets have different view counts".into()));
        }
        let mut priors = PriorMeans { rgb: Vec::new(), normal: Vec::new() };
        for i in 0..train.views.len() {
            for (kind, list) in [("rgb", &mut priors.rgb), ("normal", &mut priors.normal)] {
                let path = dir.join("priors").join(format!("{kind}_view_{i:03}.pfm"));
                if !path.is_file() {
                    return Err(DatasetError::MissingFile(path).into());
                }
                list.push(Image::read_pfm(&path).map_err(DatasetError::from)?);
            }
        }
        let grid = |name: &str| VoxelGrid::load(&dir.join(name)).ok();
        Ok(Self { train, target, priors, target_grid: grid("target.vxg"), full_grid: grid("full.vxg") })
    }

    /// Load from `cfg.dataset` when set, otherwise generate.
    pub fn resolve(cfg: &ExperimentConfig) -> Result<Self, DataError> {
        match &cfg.dataset {
            Some(dir) => Self::load(dir),
            None => Self::generate(cfg),
        }
    }
}

fn analytic(modality: Modality, mean: &Image, p: &PriorConfig) -> Result<AnalyticPrior, PriorError> {
    AnalyticPrior::new(
        modality,
        GaussianComponent { mean: mean.clone(), variance: p.positive_variance },
        GaussianComponent { mean: mean.box_blur(p.negative_blur_radius), variance: p.negative_variance },
        p.mix_weight,
    )
}

/// Assemble the training problem: distillation cameras, resampled masks and
/// per-view analytic priors.
pub fn build_problem(data: &ExperimentData, cfg: &ExperimentConfig) -> Result<TrainingProblem, DataError> {
    let mut priors = Vec::with_capacity(data.train.views.len());
    for (i, view) in data.train.views.iter().enumerate() {
        let camera = distill_camera(&view.camera, cfg.train.distill_resolution);
        let (w, h) = (camera.width, camera.height);
        let (rgb_mean, nrm_mean) = (&data.priors.rgb[i], &data.priors.normal[i]);
        if rgb_mean.shape() != (w, h, 3) || nrm_mean.shape() != (w, h, 3) {
            return Err(DataError::Other(format!(
                "view {i}: stored prior means are {:?} but distill_resolution gives {w}x{h}; regenerate the dataset",
                rgb_mean.shape()
            )));
        }
        priors.push(ViewPriors {
            mask: view.mask.resize_nearest(w, h),
            rgb: analytic(Modality::Rgb, rgb_mean, &cfg.priors.rgb)?,
            normal: analytic(Modality::Normal, nrm_mean, &cfg.priors.normal)?,
            camera,
        });
    }
    Ok(TrainingProblem::new(data.train.clone(), priors, cfg.priors.schedule)?)
}
