//! Score-distillation laboratory for radiance-field inpainting.
//!
//! Modules, bottom-up:
//!
//! * [`field`]: voxel radiance field with exact adjoints.
//! * [`render`]: volume renderer (color, depth, opacity, normals) and its VJP.
//! * [`prior`]: variance-preserving schedule and closed-form noise predictors.
//! * [`distill`]: SDS, CFG-SDS, CSD, generalized CSD and BSD gradient estimators.
//! * [`trainer`]: masked/unmasked objective, Adam, evaluation, checkpoints.
//! * [`scene`]: synthetic scenes, datasets and their on-disk layout.
//! * [`experiment`]: the experiment document shared by all entry points.
//! * [`bench`]: gradient checks, identity audits, sweeps and variance studies.

pub mod bench;
pub mod distill;
pub mod experiment;
pub mod field;
pub mod image;
pub mod math;
pub mod prior;
pub mod render;
pub mod scene;
pub mod trainer;

pub use field::{Aabb, ParamGradient, VoxelGrid};
pub use image::{Image, Mask};
pub use render::{Camera, Ray, RenderConfig, RenderOutput, SamplingConfig};
