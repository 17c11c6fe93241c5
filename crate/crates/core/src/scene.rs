//! Synthetic scenes: primitives rasterized into a voxel grid, a ring of
//! cameras, world-space mask boxes, and the on-disk dataset layout.
//!
//! ```text
//! <dir>/poses.json
//! <dir>/images/view_000.pfm    color, 3 channels
//! <dir>/masks/view_000.png     0 / 255
//! <dir>/depth/view_000.pfm     1 channel
//! <dir>/normals/view_000.pfm   3 channels, unit vectors (not encoded)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{Aabb, FieldError, VoxelGrid};
use crate::image::{Image, ImageError, Mask};
use crate::math::{self, Vec3};
use crate::render::{self, Camera, RenderConfig, RenderError, SamplingConfig};

/// Raw density used where no primitive contributes.
pub const RAW_DENSITY_FLOOR: f64 = -8.0;
/// Colors are clamped to `[eps, 1 - eps]` before the logit.
pub const COLOR_EPS: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("primitive {index} is not inside the scene box")]
    OutsideBox { index: usize },
    #[error("primitive {index} has non-positive density amplitude {density}")]
    BadDensity { index: usize, density: f64 },
    #[error("primitive {index} is degenerate")]
    Degenerate { index: usize },
    #[error("camera ring is degenerate (count {count}, radius {radius})")]
    DegenerateRing { count: usize, radius: f64 },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("poses not found: {0}")]
    PosesNotFound(PathBuf),
    #[error("missing dataset file: {0}")]
    MissingFile(PathBuf),
    #[error("malformed poses file {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: expected {expected:?} (w, h, c), found {found:?}")]
    Shape { path: PathBuf, expected: (usize, usize, usize), found: (usize, usize, usize) },
    #[error("mask binarization failed: {0}")]
    Binarization(ImageError),
    #[error("dataset has no views")]
    Empty,
    #[error(transparent)]
    Image(ImageError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl From<ImageError> for DatasetError {
    fn from(e: ImageError) -> Self {
        match e {
            e @ ImageError::NonBinaryMask { .. } => DatasetError::Binarization(e),
            e => DatasetError::Image(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    Sphere {
        center: Vec3,
        radius: f64,
        color: Vec3,
        density: f64,
        /// Present in training images, absent from the ground-truth target.
        #[serde(default)]
        removable: bool,
    },
    Box {
        min: Vec3,
        max: Vec3,
        color: Vec3,
        density: f64,
        #[serde(default)]
        removable: bool,
    },
}

impl Primitive {
    /// Signed distance, negative inside.
    pub fn signed_distance(&self, p: Vec3) -> f64 {
        match self {
            Primitive::Sphere { center, radius, .. } => math::norm(math::sub(p, *center)) - radius,
            Primitive::Box { min, max, .. } => {
                let mut q = [0.0; 3];
                for k in 0..3 {
                    let c = 0.5 * (min[k] + max[k]);
                    let h = 0.5 * (max[k] - min[k]);
                    q[k] = (p[k] - c).abs() - h;
                }
                let outside = math::norm(q.map(|v| v.max(0.0)));
                let inside = q[0].max(q[1]).max(q[2]).min(0.0);
                outside + inside
            }
        }
    }

    pub fn color(&self) -> Vec3 {
        match self {
            Primitive::Sphere { color, .. } | Primitive::Box { color, .. } => *color,
        }
    }

    pub fn density(&self) -> f64 {
        match self {
            Primitive::Sphere { density, .. } | Primitive::Box { density, .. } => *density,
        }
    }

    pub fn removable(&self) -> bool {
        match self {
            Primitive::Sphere { removable, .. } | Primitive::Box { removable, .. } => *removable,
        }
    }

    fn bounds(&self) -> (Vec3, Vec3) {
        match self {
            Primitive::Sphere { center, radius, .. } => (center.map(|c| c - radius), center.map(|c| c + radius)),
            Primitive::Box { min, max, .. } => (*min, *max),
        }
    }
}

fn default_smoothing() -> f64 {
    1.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub dims: [usize; 3],
    pub bbox: Aabb,
    pub primitives: Vec<Primitive>,
    /// Width of the density falloff, in voxels.
    #[serde(default = "default_smoothing")]
    pub smoothing_voxels: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        let eps = 1e-12;
        for (index, p) in self.primitives.iter().enumerate() {
            if !(p.density() > 0.0 && p.density().is_finite()) {
                return Err(SceneError::BadDensity { index, density: p.density() });
            }
            let (lo, hi) = p.bounds();
            if (0..3).any(|k| !(hi[k] > lo[k])) {
                return Err(SceneError::Degenerate { index });
            }
            if (0..3).any(|k| lo[k] < self.bbox.min[k] - eps || hi[k] > self.bbox.max[k] + eps) {
                return Err(SceneError::OutsideBox { index });
            }
        }
        Ok(())
    }

    /// The same scene with every removable primitive dropped.
    pub fn without_removable(&self) -> SceneSpec {
        SceneSpec {
            primitives: self.primitives.iter().filter(|p| !p.removable()).cloned().collect(),
            ..self.clone()
        }
    }
}

/// Rasterize `spec` by inverting the field activations at every node.
pub fn build_scene(spec: &SceneSpec) -> Result<VoxelGrid, SceneError> {
    spec.validate()?;
    let mut grid = VoxelGrid::filled(spec.dims, spec.bbox, RAW_DENSITY_FLOOR, [0.0; 3])?;
    let width = spec.smoothing_voxels * grid.voxel_edge();
    let floor_sigma = math::softplus(RAW_DENSITY_FLOOR);
    let [nx, ny, nz] = spec.dims;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let p = grid.node_position(i, j, k);
                let mut sigma: f64 = 0.0;
                // Color of the deepest (or, in empty space, nearest) primitive,
                // so colors stay smooth across boundaries.
                let mut nearest = f64::INFINITY;
                let mut color = [0.5; 3];
                for prim in &spec.primitives {
                    let s = prim.signed_distance(p);
                    let occ = if width > 0.0 {
                        1.0 - math::smoothstep(-0.5 * width, 0.5 * width, s)
                    } else if s <= 0.0 {
                        1.0
                    } else {
                        0.0
                    };
                    sigma = sigma.max(prim.density() * occ);
                    if s < nearest {
                        nearest = s;
                        color = prim.color();
                    }
                }
                let idx = grid.index(i, j, k);
                grid.raw_density_mut()[idx] =
                    if sigma > floor_sigma { math::softplus_inv(sigma) } else { RAW_DENSITY_FLOOR };
                for (c, v) in color.iter().enumerate() {
                    grid.raw_color_mut()[3 * idx + c] = math::logit(v.clamp(COLOR_EPS, 1.0 - COLOR_EPS));
                }
            }
        }
    }
    Ok(grid)
}

/// Cameras on a circle around `target`, all looking at it with `+z` up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRing {
    pub count: usize,
    pub radius: f64,
    pub elevation_deg: f64,
    #[serde(default)]
    pub target: Vec3,
    pub fov_x_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraRing {
    pub fn cameras(&self) -> Result<Vec<Camera>, SceneError> {
        if self.count == 0 || !(self.radius > 0.0) {
            return Err(SceneError::DegenerateRing { count: self.count, radius: self.radius });
        }
        let el = self.elevation_deg.to_radians();
        Ok((0..self.count)
            .map(|i| {
                let az = std::f64::consts::TAU * i as f64 / self.count as f64;
                let offset = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()].map(|v| v * self.radius);
                let eye = math::add(self.target, offset);
                Camera::look_at(eye, self.target, [0.0, 0.0, 1.0], self.fov_x_deg.to_radians(), self.width, self.height)
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetView {
    pub camera: Camera,
    pub image: Image,
    pub mask: Mask,
    pub depth: Image,
    pub normal: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDataset {
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    pub views: Vec<DatasetView>,
}

/// Rendering settings used for ground-truth images.
pub fn reference_render_config(sampling: SamplingConfig) -> RenderConfig {
    RenderConfig { sampling, normals: true, ..RenderConfig::default() }
}

/// Pixels whose ray meets `mask_box` within the camera's ray range.
pub fn mask_for_camera(camera: &Camera, mask_box: &Aabb, near: f64, far: f64) -> Mask {
    let mut mask = Mask::new(camera.width, camera.height);
    for y in 0..camera.height {
        for x in 0..camera.width {
            let r = camera.ray(x, y, near, far);
            let hit = math::ray_box(r.origin, r.dir, mask_box.min, mask_box.max, near, far).is_some();
            mask.set(y * camera.width + x, hit);
        }
    }
    mask
}

/// Render every ring camera and mark the pixels that see `mask_box`.
pub fn generate_dataset(
    grid: &VoxelGrid,
    ring: &CameraRing,
    mask_box: &Aabb,
    sampling: SamplingConfig,
) -> Result<SceneDataset, SceneError> {
    let cfg = reference_render_config(sampling);
    let (near, far) = (render::DEFAULT_NEAR, render::DEFAULT_FAR);
    let views = ring
        .cameras()?
        .into_iter()
        .map(|camera| {
            let out = render::render(grid, &camera, &cfg)?;
            Ok(DatasetView {
                mask: mask_for_camera(&camera, mask_box, near, far),
                image: out.color,
                depth: out.depth,
                normal: out.normal,
                camera,
            })
        })
        .collect::<Result<Vec<_>, SceneError>>()?;
    Ok(SceneDataset { width: ring.width, height: ring.height, near, far, views })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseEntry {
    camera_to_world: [f64; 12],
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PosesFile {
    width: usize,
    height: usize,
    near: f64,
    far: f64,
    poses: Vec<PoseEntry>,
}

fn view_file(dir: &Path, sub: &str, i: usize, ext: &str) -> PathBuf {
    dir.join(sub).join(format!("view_{i:03}.{ext}"))
}

fn create_dir(path: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })
}

pub fn save_dataset(d: &SceneDataset, dir: &Path) -> Result<(), DatasetError> {
    for sub in ["images", "masks", "depth", "normals"] {
        create_dir(&dir.join(sub))?;
    }
    for (i, v) in d.views.iter().enumerate() {
        v.image.write_pfm(&view_file(dir, "images", i, "pfm"))?;
        v.mask.write_png(&view_file(dir, "masks", i, "png"))?;
        v.depth.write_pfm(&view_file(dir, "depth", i, "pfm"))?;
        v.normal.write_pfm(&view_file(dir, "normals", i, "pfm"))?;
    }
    let poses = PosesFile {
        width: d.width,
        height: d.height,
        near: d.near,
        far: d.far,
        poses: d
            .views
            .iter()
            .map(|v| PoseEntry {
                camera_to_world: v.camera.camera_to_world(),
                fx: v.camera.fx,
                fy: v.camera.fy,
                cx: v.camera.cx,
                cy: v.camera.cy,
            })
            .collect(),
    };
    let path = dir.join("poses.json");
    let text = serde_json::to_string_pretty(&poses).expect("poses serialize");
    fs::write(&path, text + "\n").map_err(|source| DatasetError::Io { path, source })
}

fn require(path: PathBuf) -> Result<PathBuf, DatasetError> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(DatasetError::MissingFile(path))
    }
}

fn read_checked(path: PathBuf, w: usize, h: usize, c: usize) -> Result<Image, DatasetError> {
    let path = require(path)?;
    let img = Image::read_pfm(&path)?;
    if img.shape() != (w, h, c) {
        return Err(DatasetError::Shape { path, expected: (w, h, c), found: img.shape() });
    }
    Ok(img)
}

fn read_poses(path: &Path) -> Result<PosesFile, DatasetError> {
    if !path.is_file() {
        return Err(DatasetError::PosesNotFound(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
    let poses: PosesFile =
        serde_json::from_str(&text).map_err(|source| DatasetError::Json { path: path.to_path_buf(), source })?;
    if poses.poses.is_empty() {
        return Err(DatasetError::Empty);
    }
    Ok(poses)
}

fn pose_cameras(poses: &PosesFile) -> Vec<Camera> {
    let (w, h) = (poses.width, poses.height);
    poses.poses.iter().map(|p| Camera::from_camera_to_world(&p.camera_to_world, p.fx, p.fy, p.cx, p.cy, w, h)).collect()
}

/// Cameras and ray range from a `poses.json` file (or a dataset directory
/// containing one).
pub fn load_cameras(path: &Path) -> Result<(Vec<Camera>, f64, f64), DatasetError> {
    let file = if path.is_dir() { path.join("poses.json") } else { path.to_path_buf() };
    let poses = read_poses(&file)?;
    Ok((pose_cameras(&poses), poses.near, poses.far))
}

pub fn load_dataset(dir: &Path) -> Result<SceneDataset, DatasetError> {
    let poses = read_poses(&dir.join("poses.json"))?;
    let (w, h) = (poses.width, poses.height);
    let mut views = Vec::with_capacity(poses.poses.len());
    for (i, camera) in pose_cameras(&poses).into_iter().enumerate() {
        let mask_path = require(view_file(dir, "masks", i, "png"))?;
        let mask = Mask::read_png(&mask_path)?;
        if (mask.width(), mask.height()) != (w, h) {
            return Err(DatasetError::Shape { path: mask_path, expected: (w, h, 1), found: (mask.width(), mask.height(), 1) });
        }
        views.push(DatasetView {
            image: read_checked(view_file(dir, "images", i, "pfm"), w, h, 3)?,
            depth: read_checked(view_file(dir, "depth", i, "pfm"), w, h, 1)?,
            normal: read_checked(view_file(dir, "normals", i, "pfm"), w, h, 3)?,
            mask,
            camera,
        });
    }
    Ok(SceneDataset { width: w, height: h, near: poses.near, far: poses.far, views })
}

/// Everything needed to regenerate an experiment's data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSetup {
    pub scene: SceneSpec,
    pub cameras: CameraRing,
    pub mask_box: Aabb,
    pub sampling: SamplingConfig,
}

/// The committed toy scene: a floor with a painted stripe, a kept sphere, and a
/// removable sphere standing on the stripe inside the mask box.
pub fn canonical_setup() -> SceneSetup {
    serde_json::from_str(CANONICAL_SCENE_JSON).expect("canonical scene fixture parses")
}

pub const CANONICAL_SCENE_JSON: &str = include_str!("../fixtures/canonical_scene.json");

/// Training views, held-out views of the object-free target, and the grids
/// that produced them.
#[derive(Debug, Clone)]
pub struct GeneratedScene {
    pub full_grid: VoxelGrid,
    pub target_grid: VoxelGrid,
    pub train: SceneDataset,
    pub target: SceneDataset,
}

pub fn generate(setup: &SceneSetup) -> Result<GeneratedScene, SceneError> {
    let full_grid = build_scene(&setup.scene)?;
    let target_grid = build_scene(&setup.scene.without_removable())?;
    let train = generate_dataset(&full_grid, &setup.cameras, &setup.mask_box, setup.sampling)?;
    let target = generate_dataset(&target_grid, &setup.cameras, &setup.mask_box, setup.sampling)?;
    Ok(GeneratedScene { full_grid, target_grid, train, target })
}
