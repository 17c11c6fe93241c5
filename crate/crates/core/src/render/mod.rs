//! Differentiable volume rendering of a [`VoxelGrid`].
//!
//! Each ray is clipped to the grid box and split into `N` equal intervals of
//! width `delta`. With `tau_i = sigma_i * delta`, the compositing weights are
//! `w_i = T_i (1 - exp(-tau_i))` where `T_i = exp(-sum_{j<i} tau_j)`, and the
//! pixel outputs are `C = sum w_i c_i`, `D = sum w_i t_i`, `A = sum w_i` and
//! the renormalized normal `N = m / sqrt(|m|^2 + eps^2)` with `m = sum w_i n_i`.
//!
//! [`render_rays_taped`] records every [`RenderSegment`] so that
//! [`render_vjp`] can push per-pixel gradients back into the raw lattices.

mod camera;

pub use camera::{make_rays, Camera, Ray, DEFAULT_FAR, DEFAULT_NEAR};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{self, FieldUpstream, ParamGradient, VoxelGrid, DEFAULT_NORMAL_EPS};
use crate::image::Image;
use crate::math::{self, Vec3};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("camera rotation is not orthonormal (max |R^T R - I| = {0:e})")]
    NonOrthonormal(f64),
    #[error("camera intrinsics must be positive (fx = {fx}, fy = {fy})")]
    BadIntrinsics { fx: f64, fy: f64 },
    #[error("camera image is empty")]
    EmptyImage,
    #[error("sampling needs at least 2 intervals, got {0}")]
    TooFewSamples(usize),
    #[error("forward segments missing: tape holds {taped} rays, upstream has {upstream}")]
    MissingSegments { taped: usize, upstream: usize },
    #[error("tape was recorded for a grid with {taped} nodes, got {grid}")]
    GridMismatch { taped: usize, grid: usize },
}

/// Interval count and placement policy along each ray.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub samples: usize,
    /// Jitter samples inside their interval (seeded per ray); midpoints otherwise.
    pub stratified: bool,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { samples: 64, stratified: false, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    pub sampling: SamplingConfig,
    /// Compute per-sample normals and the normal map.
    pub normals: bool,
    pub normal_eps: f64,
    /// Central-difference step; `None` uses one voxel edge.
    pub normal_step: Option<f64>,
    /// Report `D / A` instead of `D`.
    pub normalize_depth: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            sampling: SamplingConfig::default(),
            normals: true,
            normal_eps: DEFAULT_NORMAL_EPS,
            normal_step: None,
            normalize_depth: false,
        }
    }
}

impl RenderConfig {
    pub fn with_sampling(sampling: SamplingConfig) -> Self {
        Self { sampling, ..Self::default() }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sampling.seed = seed;
        self
    }
}

/// Per-sample record retained for the adjoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSegment {
    pub t: f64,
    pub delta: f64,
    pub sigma: f64,
    pub color: Vec3,
    pub transmittance: f64,
    pub weight: f64,
    pub pos: Vec3,
    pub grad: Vec3,
    pub normal: Vec3,
}

/// Composited outputs of one ray.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RaySample {
    pub color: Vec3,
    pub depth: f64,
    pub opacity: f64,
    pub normal: Vec3,
}

/// Upstream gradient for one ray's outputs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RayUpstream {
    pub d_color: Vec3,
    pub d_depth: f64,
    pub d_opacity: f64,
    pub d_normal: Vec3,
}

impl RayUpstream {
    pub fn is_zero(&self) -> bool {
        self.d_color == [0.0; 3] && self.d_depth == 0.0 && self.d_opacity == 0.0 && self.d_normal == [0.0; 3]
    }
}

/// Rendered images for a camera.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: Image,
    pub depth: Image,
    pub opacity: Image,
    pub normal: Image,
}

impl RenderOutput {
    pub fn from_samples(width: usize, height: usize, samples: &[RaySample]) -> Self {
        assert_eq!(samples.len(), width * height);
        let mut out = Self {
            color: Image::new(width, height, 3),
            depth: Image::new(width, height, 1),
            opacity: Image::new(width, height, 1),
            normal: Image::new(width, height, 3),
        };
        for (i, s) in samples.iter().enumerate() {
            out.color.pixel_mut(i).copy_from_slice(&s.color);
            out.depth.data_mut()[i] = s.depth;
            out.opacity.data_mut()[i] = s.opacity;
            out.normal.pixel_mut(i).copy_from_slice(&s.normal);
        }
        out
    }

    /// Normal map encoded into `[0, 1]` via `(n + 1) / 2`.
    pub fn normal_encoded(&self) -> Image {
        self.normal.map(encode_normal)
    }
}

#[inline]
pub fn encode_normal(n: f64) -> f64 {
    0.5 * (n + 1.0)
}

/// Forward record of a batch of rays.
#[derive(Debug, Clone)]
pub struct RenderTape {
    segments: Vec<RenderSegment>,
    offsets: Vec<usize>,
    outputs: Vec<RaySample>,
    normal_sums: Vec<Vec3>,
    cfg: RenderConfig,
    step: f64,
    nodes: usize,
}

impl RenderTape {
    pub fn ray_count(&self) -> usize {
        self.outputs.len()
    }

    /// Segments of ray `i`.
    pub fn segments(&self, i: usize) -> &[RenderSegment] {
        &self.segments[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn outputs(&self) -> &[RaySample] {
        &self.outputs
    }
}

/// splitmix64 finalizer, used to derive independent per-ray seeds.
#[inline]
pub(crate) fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn normal_step(grid: &VoxelGrid, cfg: &RenderConfig) -> f64 {
    cfg.normal_step.unwrap_or_else(|| grid.voxel_edge())
}

fn trace(
    grid: &VoxelGrid,
    ray: &Ray,
    index: u64,
    cfg: &RenderConfig,
    h: f64,
    segments: Option<&mut Vec<RenderSegment>>,
) -> (RaySample, Vec3) {
    let bbox = grid.bbox();
    let Some((a, b)) = math::ray_box(ray.origin, ray.dir, bbox.min, bbox.max, ray.t_near, ray.t_far) else {
        return (RaySample::default(), [0.0; 3]);
    };
    if b <= a {
        return (RaySample::default(), [0.0; 3]);
    }
    let n = cfg.sampling.samples;
    let delta = (b - a) / n as f64;
    let mut rng = cfg
        .sampling
        .stratified
        .then(|| ChaCha8Rng::seed_from_u64(mix_seed(cfg.sampling.seed, index)));
    let mut out = RaySample::default();
    let mut m = [0.0; 3];
    let mut transmittance = 1.0;
    let mut segments = segments;
    for i in 0..n {
        let u = match rng.as_mut() {
            Some(r) => r.random::<f64>(),
            None => 0.5,
        };
        let t = a + (i as f64 + u) * delta;
        let pos = ray.at(t);
        let (sigma, color, grad, normal) = if cfg.normals {
            let (sigma, color, g) = grid.sample_with_gradient(pos, h);
            (sigma, color, g, field::normal_from_gradient(g, cfg.normal_eps))
        } else {
            let (sigma, color) = grid.sample(pos);
            (sigma, color, [0.0; 3], [0.0; 3])
        };
        let tau = sigma * delta;
        let weight = transmittance * -(-tau).exp_m1();
        for k in 0..3 {
            out.color[k] += weight * color[k];
            m[k] += weight * normal[k];
        }
        out.depth += weight * t;
        out.opacity += weight;
        if let Some(segs) = segments.as_deref_mut() {
            segs.push(RenderSegment { t, delta, sigma, color, transmittance, weight, pos, grad, normal });
        }
        transmittance *= (-tau).exp();
    }
    if cfg.normalize_depth {
        out.depth = if out.opacity > 1e-10 { out.depth / out.opacity } else { 0.0 };
    }
    if cfg.normals {
        out.normal = renormalize(m, cfg.normal_eps);
    }
    (out, m)
}

#[inline]
fn renormalize(m: Vec3, eps: f64) -> Vec3 {
    math::scale(m, 1.0 / (math::dot(m, m) + eps * eps).sqrt())
}

fn check_cfg(cfg: &RenderConfig) -> Result<(), RenderError> {
    if cfg.sampling.samples < 2 {
        return Err(RenderError::TooFewSamples(cfg.sampling.samples));
    }
    Ok(())
}

/// Render a batch of rays without recording segments.
pub fn render_rays(grid: &VoxelGrid, rays: &[Ray], cfg: &RenderConfig) -> Result<Vec<RaySample>, RenderError> {
    check_cfg(cfg)?;
    let h = normal_step(grid, cfg);
    Ok(rays.par_iter().enumerate().map(|(i, r)| trace(grid, r, i as u64, cfg, h, None).0).collect())
}

/// Like [`render_rays`], with jitter for ray `i` keyed on `ids[i]`.
pub fn render_rays_ids(grid: &VoxelGrid, rays: &[Ray], ids: &[u64], cfg: &RenderConfig) -> Result<Vec<RaySample>, RenderError> {
    check_cfg(cfg)?;
    assert_eq!(rays.len(), ids.len(), "one id per ray");
    let h = normal_step(grid, cfg);
    Ok(rays.par_iter().zip(ids.par_iter()).map(|(r, &id)| trace(grid, r, id, cfg, h, None).0).collect())
}

/// Render a batch of rays and keep the segments needed by [`render_vjp`].
pub fn render_rays_taped(
    grid: &VoxelGrid,
    rays: &[Ray],
    cfg: &RenderConfig,
) -> Result<(Vec<RaySample>, RenderTape), RenderError> {
    let ids: Vec<u64> = (0..rays.len() as u64).collect();
    render_rays_taped_ids(grid, rays, &ids, cfg)
}

/// Like [`render_rays_taped`], but jitter for ray `i` is keyed on `ids[i]`
/// instead of its position in the batch, so a subset of an image's rays
/// samples exactly where the full image would.
pub fn render_rays_taped_ids(
    grid: &VoxelGrid,
    rays: &[Ray],
    ids: &[u64],
    cfg: &RenderConfig,
) -> Result<(Vec<RaySample>, RenderTape), RenderError> {
    check_cfg(cfg)?;
    assert_eq!(rays.len(), ids.len(), "one id per ray");
    let h = normal_step(grid, cfg);
    let per_ray: Vec<(RaySample, Vec3, Vec<RenderSegment>)> = rays
        .par_iter()
        .zip(ids.par_iter())
        .map(|(r, &id)| {
            let mut segs = Vec::with_capacity(cfg.sampling.samples);
            let (s, m) = trace(grid, r, id, cfg, h, Some(&mut segs));
            (s, m, segs)
        })
        .collect();
    let mut tape = RenderTape {
        segments: Vec::with_capacity(per_ray.iter().map(|p| p.2.len()).sum()),
        offsets: Vec::with_capacity(rays.len() + 1),
        outputs: Vec::with_capacity(rays.len()),
        normal_sums: Vec::with_capacity(rays.len()),
        cfg: *cfg,
        step: h,
        nodes: grid.node_count(),
    };
    tape.offsets.push(0);
    for (s, m, segs) in per_ray {
        tape.segments.extend(segs);
        tape.offsets.push(tape.segments.len());
        tape.outputs.push(s);
        tape.normal_sums.push(m);
    }
    let outputs = tape.outputs.clone();
    Ok((outputs, tape))
}

/// Render a full image from `camera`.
pub fn render(grid: &VoxelGrid, camera: &Camera, cfg: &RenderConfig) -> Result<RenderOutput, RenderError> {
    let rays = make_rays(camera, DEFAULT_NEAR, DEFAULT_FAR)?;
    let samples = render_rays(grid, &rays, cfg)?;
    Ok(RenderOutput::from_samples(camera.width, camera.height, &samples))
}

/// Rays per private accumulator in [`render_vjp`]. The partition depends only
/// on the ray count, so results do not depend on the worker count.
const VJP_CHUNK: usize = 512;

/// Reverse-mode gradient of `sum_r <upstream_r, outputs_r>` with respect to the
/// raw grid parameters.
pub fn render_vjp(grid: &VoxelGrid, tape: &RenderTape, upstream: &[RayUpstream]) -> Result<ParamGradient, RenderError> {
    if upstream.len() != tape.ray_count() {
        return Err(RenderError::MissingSegments { taped: tape.ray_count(), upstream: upstream.len() });
    }
    if tape.nodes != grid.node_count() {
        return Err(RenderError::GridMismatch { taped: tape.nodes, grid: grid.node_count() });
    }
    let chunks = upstream.len().div_ceil(VJP_CHUNK).max(1);
    let partials: Vec<Option<ParamGradient>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * VJP_CHUNK;
            let hi = (lo + VJP_CHUNK).min(upstream.len());
            let mut acc: Option<ParamGradient> = None;
            for r in lo..hi {
                if upstream[r].is_zero() {
                    continue;
                }
                let acc = acc.get_or_insert_with(|| ParamGradient::zeros_like(grid));
                ray_vjp(grid, tape, r, &upstream[r], acc);
            }
            acc
        })
        .collect();
    let mut total: Option<ParamGradient> = None;
    for p in partials.into_iter().flatten() {
        match total.as_mut() {
            Some(t) => *t += &p,
            None => total = Some(p),
        }
    }
    Ok(total.unwrap_or_else(|| ParamGradient::zeros_like(grid)))
}

fn ray_vjp(grid: &VoxelGrid, tape: &RenderTape, r: usize, up: &RayUpstream, acc: &mut ParamGradient) {
    let segs = tape.segments(r);
    if segs.is_empty() {
        return;
    }
    let cfg = &tape.cfg;
    let out = &tape.outputs[r];
    // N = m / s  =>  dN/dm = I/s - m m^T / s^3
    let dm = if cfg.normals && up.d_normal != [0.0; 3] {
        let m = tape.normal_sums[r];
        let s2 = math::dot(m, m) + cfg.normal_eps * cfg.normal_eps;
        let s = s2.sqrt();
        let md = math::dot(m, up.d_normal);
        let mut dm = [0.0; 3];
        for k in 0..3 {
            dm[k] = up.d_normal[k] / s - m[k] * md / (s2 * s);
        }
        dm
    } else {
        [0.0; 3]
    };

    let mut suffix = 0.0;
    for seg in segs.iter().rev() {
        let depth_term = if cfg.normalize_depth {
            if out.opacity > 1e-10 {
                up.d_depth * (seg.t - out.depth) / out.opacity
            } else {
                0.0
            }
        } else {
            up.d_depth * seg.t
        };
        let dw = math::dot(up.d_color, seg.color) + depth_term + up.d_opacity + math::dot(dm, seg.normal);
        let tau = seg.sigma * seg.delta;
        // dw_i/dtau_i = T_i e^{-tau_i}; dw_j/dtau_i = -w_j for j > i
        let d_tau = dw * seg.transmittance * (-tau).exp() - suffix;
        suffix += dw * seg.weight;

        let d_grad = if cfg.normals && dm != [0.0; 3] {
            field::normal_vjp(seg.grad, cfg.normal_eps, math::scale(dm, seg.weight))
        } else {
            [0.0; 3]
        };
        let fu = FieldUpstream {
            d_sigma: d_tau * seg.delta,
            d_color: math::scale(up.d_color, seg.weight),
            d_grad,
        };
        grid.field_vjp(seg.pos, tape.step, &fu, acc);
    }
}
