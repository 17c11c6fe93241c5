//! Score-distillation gradient estimators.
//!
//! Every estimator maps a noised render to a per-pixel gradient image `delta`:
//!
//! | estimator | delta |
//! |-----------|-------|
//! | SDS       | `eps_w(y) - eps`, with `eps_w = (1 + w) eps(y) - w eps(0)` (plain `eps(y)` when `w = 0`) |
//! | CFG-SDS   | `delta_gen + w * delta_cls`, `delta_gen = eps(y) - eps`, `delta_cls = eps(y) - eps(0)` |
//! | CSD       | `w1 eps(y) + (w2 - w1) eps(0) - w2 eps(y_neg)` |
//! | CSD-w3    | `w1 eps(y) + w3 eps(0) - w2 eps(y_neg)` |
//! | BSD       | `w1 eps(y) - w2 eps(y_neg)` |
//!
//! [`distill_param_grad`] renders the view, noises it, evaluates the chosen
//! estimator, gates it by the mask and pushes it through the renderer adjoint.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{ParamGradient, VoxelGrid};
use crate::image::{Image, Mask};
use crate::prior::{self, Condition, Modality, NoiseSchedule, NoisePredictor, NoisyImage, PriorError};
use crate::render::{self, Camera, Ray, RaySample, RayUpstream, RenderConfig, RenderError};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("mask is {mask:?} but the distillation view is {view:?}")]
    MaskShape { mask: (usize, usize), view: (usize, usize) },
    #[error("timestep range [{0}, {1}] must satisfy 0 <= t_min <= t_max <= 1")]
    BadTimeRange(f64, f64),
    #[error("shared unmasked render has {got} samples, expected {expected}")]
    SharedRender { expected: usize, got: usize },
}

/// Weighting `w(t)` applied to every estimator output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeWeighting {
    #[default]
    Constant,
    OneMinusAlphaBar,
}

impl TimeWeighting {
    pub fn weight(self, alpha_bar: f64) -> f64 {
        match self {
            TimeWeighting::Constant => 1.0,
            TimeWeighting::OneMinusAlphaBar => 1.0 - alpha_bar,
        }
    }
}

/// Guidance and balance coefficients for all estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillWeights {
    /// Classifier-free guidance weight.
    #[serde(default)]
    pub omega: f64,
    pub omega1: f64,
    pub omega2: f64,
    #[serde(default)]
    pub omega3: f64,
    #[serde(default)]
    pub w_t: TimeWeighting,
}

impl DistillWeights {
    /// Appearance weights (`w1 = 7.5`, `w2 = 6.5`).
    pub fn appearance() -> Self {
        Self { omega: 7.5, omega1: 7.5, omega2: 6.5, omega3: 0.0, w_t: TimeWeighting::Constant }
    }

    /// Geometry weights (`w1 = 1.5`, `w2 = 0.5`).
    pub fn geometry() -> Self {
        Self { omega: 7.5, omega1: 1.5, omega2: 0.5, omega3: 0.0, w_t: TimeWeighting::Constant }
    }

    pub fn is_finite(&self) -> bool {
        [self.omega, self.omega1, self.omega2, self.omega3].iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Sds,
    CfgSds,
    Csd,
    CsdW3,
    Bsd,
}

impl Estimator {
    pub const ALL: [Estimator; 5] = [Estimator::Sds, Estimator::CfgSds, Estimator::Csd, Estimator::CsdW3, Estimator::Bsd];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Sds => "sds",
            Estimator::CfgSds => "cfg_sds",
            Estimator::Csd => "csd",
            Estimator::CsdW3 => "csd_w3",
            Estimator::Bsd => "bsd",
        }
    }

    /// Whether the estimator's output depends on the unconditional prediction
    /// with the given weights. The unconditional mixture couples all pixels,
    /// so such estimators need the full render.
    pub fn uses_unconditional(self, w: &DistillWeights) -> bool {
        match self {
            Estimator::Sds | Estimator::CfgSds => w.omega != 0.0,
            Estimator::Csd => w.omega2 - w.omega1 != 0.0,
            Estimator::CsdW3 => w.omega3 != 0.0,
            Estimator::Bsd => false,
        }
    }
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Estimator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| format!("unknown estimator {s:?}"))
    }
}

/// The two parts of the guided SDS gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaDecomposition {
    pub gen: Image,
    pub cls: Image,
}

impl DeltaDecomposition {
    /// `gen + omega * cls`.
    pub fn combine(&self, omega: f64) -> Image {
        zip_map(&self.gen, &self.cls, |g, c| g + omega * c)
    }
}

fn zip_map(a: &Image, b: &Image, f: impl Fn(f64, f64) -> f64) -> Image {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Image::from_vec(a.width(), a.height(), a.channels(), data).expect("shape")
}

fn zip3_map(a: &Image, b: &Image, c: &Image, f: impl Fn(f64, f64, f64) -> f64) -> Image {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((x, y), z)| f(*x, *y, *z))
        .collect();
    Image::from_vec(a.width(), a.height(), a.channels(), data).expect("shape")
}

fn eps<P: NoisePredictor + ?Sized>(p: &P, s: &NoiseSchedule, n: &NoisyImage, c: Condition) -> Result<Image, PriorError> {
    p.predict_noise(s, &n.x_t, n.t, c)
}

/// Guided SDS: `eps_w(x_t; y) - eps`.
pub fn sds_delta<P: NoisePredictor + ?Sized>(
    p: &P,
    s: &NoiseSchedule,
    n: &NoisyImage,
    w: &DistillWeights,
) -> Result<Image, PriorError> {
    let pos = eps(p, s, n, Condition::Positive)?;
    if w.omega == 0.0 {
        return Ok(zip_map(&pos, &n.noise, |e, z| e - z));
    }
    let unc = eps(p, s, n, Condition::Unconditional)?;
    let o = w.omega;
    Ok(zip3_map(&pos, &unc, &n.noise, |ep, eu, z| (1.0 + o) * ep - o * eu - z))
}

/// Generative and classifier parts of the guided SDS gradient.
pub fn cfg_decompose<P: NoisePredictor + ?Sized>(
    p: &P,
    s: &NoiseSchedule,
    n: &NoisyImage,
) -> Result<DeltaDecomposition, PriorError> {
    let pos = eps(p, s, n, Condition::Positive)?;
    let unc = eps(p, s, n, Condition::Unconditional)?;
    Ok(DeltaDecomposition {
        gen: zip_map(&pos, &n.noise, |e, z| e - z),
        cls: zip_map(&pos, &unc, |ep, eu| ep - eu),
    })
}

/// Classifier score distillation with a negative condition.
pub fn csd_delta<P: NoisePredictor + ?Sized>(
    p: &P,
    s: &NoiseSchedule,
    n: &NoisyImage,
    w: &DistillWeights,
) -> Result<Image, PriorError> {
    let pos = eps(p, s, n, Condition::Positive)?;
    let unc = eps(p, s, n, Condition::Unconditional)?;
    let neg = eps(p, s, n, Condition::Negative)?;
    let (w1, w2) = (w.omega1, w.omega2);
    Ok(zip3_map(&pos, &unc, &neg, |ep, eu, en| w1 * ep + (w2 - w1) * eu - w2 * en))
}

/// CSD with an independent coefficient on the unconditional term.
pub fn csd_w3_delta<P: NoisePredictor + ?Sized>(
    p: &P,
    s: &NoiseSchedule,
    n: &NoisyImage,
    w: &DistillWeights,
) -> Result<Image, PriorError> {
    let pos = eps(p, s, n, Condition::Positive)?;
    let unc = eps(p, s, n, Condition::Unconditional)?;
    let neg = eps(p, s, n, Condition::Negative)?;
    let (w1, w2, w3) = (w.omega1, w.omega2, w.omega3);
    Ok(zip3_map(&pos, &unc, &neg, |ep, eu, en| w1 * ep + w3 * eu - w2 * en))
}

/// Balanced score distillation; two predictor evaluations, no noise term.
pub fn bsd_delta<P: NoisePredictor + ?Sized>(
    p: &P,
    s: &NoiseSchedule,
    n: &NoisyImage,
    w: &DistillWeights,
) -> Result<Image, PriorError> {
    let pos = eps(p, s, n, Condition::Positive)?;
    let neg = eps(p, s, n, Condition::Negative)?;
    let (w1, w2) = (w.omega1, w.omega2);
    Ok(zip_map(&pos, &neg, |ep, en| w1 * ep - w2 * en))
}

/// Dispatch on `estimator`.
pub fn estimator_delta<P: NoisePredictor + ?Sized>(
    estimator: Estimator,
    p: &P,
    s: &NoiseSchedule,
    n: &NoisyImage,
    w: &DistillWeights,
) -> Result<Image, PriorError> {
    match estimator {
        Estimator::Sds => sds_delta(p, s, n, w),
        Estimator::CfgSds => Ok(cfg_decompose(p, s, n)?.combine(w.omega)),
        Estimator::Csd => csd_delta(p, s, n, w),
        Estimator::CsdW3 => csd_w3_delta(p, s, n, w),
        Estimator::Bsd => bsd_delta(p, s, n, w),
    }
}

/// Everything [`distill_param_grad`] needs besides the random draws.
#[derive(Debug, Clone, Copy)]
pub struct DistillSetup<'a, P: NoisePredictor + ?Sized> {
    pub grid: &'a VoxelGrid,
    /// Camera at the distillation resolution.
    pub camera: &'a Camera,
    pub modality: Modality,
    pub estimator: Estimator,
    pub weights: &'a DistillWeights,
    pub mask: &'a Mask,
    pub prior: &'a P,
    pub schedule: &'a NoiseSchedule,
    pub t_range: (f64, f64),
    pub render: &'a RenderConfig,
    /// Multiply by `dx_t/dx = sqrt(alpha_bar)`.
    pub chain_sqrt_alpha_bar: bool,
    /// Untaped samples of the unmasked pixels from [`render_unmasked`] with
    /// normals on, shared between modalities. Rendered here when `None`.
    pub unmasked: Option<&'a [RaySample]>,
}

fn pixel_ray(cam: &Camera, w: usize, i: usize) -> Ray {
    cam.ray(i % w, i / w, render::DEFAULT_NEAR, render::DEFAULT_FAR)
}

/// Untaped render of the pixels outside `mask`, in pixel order, with the
/// per-pixel jitter a full-image render would use.
pub fn render_unmasked(
    grid: &VoxelGrid,
    cam: &Camera,
    mask: &Mask,
    rcfg: &RenderConfig,
) -> Result<Vec<RaySample>, DistillError> {
    let rest: Vec<usize> = (0..cam.width * cam.height).filter(|&i| !mask.get(i)).collect();
    let rays: Vec<_> = rest.iter().map(|&i| pixel_ray(cam, cam.width, i)).collect();
    let ids: Vec<u64> = rest.iter().map(|&i| i as u64).collect();
    Ok(render::render_rays_ids(grid, &rays, &ids, rcfg)?)
}

/// Result of one distillation draw.
#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub grad: ParamGradient,
    pub t: f64,
    pub alpha_bar: f64,
    /// Upstream image actually pushed through the renderer (masked and weighted).
    pub upstream: Image,
}

/// Masked distillation gradient with respect to the raw grid parameters.
///
/// Draw order is fixed: one uniform `t`, then the full noise image. An empty
/// mask still consumes both draws and returns a zero gradient.
pub fn distill_param_grad<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    setup: &DistillSetup<'_, P>,
    rng: &mut R,
) -> Result<DistillOutcome, DistillError> {
    let cam = setup.camera;
    let (w, h) = (cam.width, cam.height);
    if (setup.mask.width(), setup.mask.height()) != (w, h) {
        return Err(DistillError::MaskShape { mask: (setup.mask.width(), setup.mask.height()), view: (w, h) });
    }
    let (t_min, t_max) = setup.t_range;
    if !(0.0 <= t_min && t_min <= t_max && t_max <= 1.0) {
        return Err(DistillError::BadTimeRange(t_min, t_max));
    }
    let t = if t_max > t_min { rng.random_range(t_min..t_max) } else { t_min };
    let noise = prior::standard_normal_image(rng, w, h, 3);
    let alpha_bar = setup.schedule.alpha_bar(t)?;
    if setup.mask.count() == 0 {
        return Ok(DistillOutcome {
            grad: ParamGradient::zeros_like(setup.grid),
            t,
            alpha_bar,
            upstream: Image::new(w, h, 3),
        });
    }

    // Only masked pixels carry gradient, so only they are taped. The
    // unconditional mixture couples all pixels, so the rest of the image is
    // rendered untaped when that term is active.
    let ray_at = |&i: &usize| pixel_ray(cam, w, i);
    let pixels: Vec<usize> = (0..w * h).filter(|&i| setup.mask.get(i)).collect();
    let mut rcfg = *setup.render;
    rcfg.normals = setup.modality == Modality::Normal;
    let rays: Vec<_> = pixels.iter().map(ray_at).collect();
    let ids: Vec<u64> = pixels.iter().map(|&i| i as u64).collect();
    let (samples, tape) = render::render_rays_taped_ids(setup.grid, &rays, &ids, &rcfg)?;
    let mut rendered: Vec<(usize, RaySample)> = pixels.iter().copied().zip(samples).collect();
    if setup.estimator.uses_unconditional(setup.weights) {
        let rest: Vec<usize> = (0..w * h).filter(|&i| !setup.mask.get(i)).collect();
        let owned;
        let samples = match setup.unmasked {
            Some(s) => s,
            None => {
                owned = render_unmasked(setup.grid, cam, setup.mask, &rcfg)?;
                &owned
            }
        };
        if samples.len() != rest.len() {
            return Err(DistillError::SharedRender { expected: rest.len(), got: samples.len() });
        }
        rendered.extend(rest.into_iter().zip(samples.iter().copied()));
    }

    let mut x = Image::new(w, h, 3);
    for (i, s) in &rendered {
        let px = x.pixel_mut(*i);
        match setup.modality {
            Modality::Rgb => px.copy_from_slice(&s.color),
            Modality::Normal => {
                for k in 0..3 {
                    px[k] = render::encode_normal(s.normal[k]);
                }
            }
        }
    }
    let noisy = prior::add_noise(setup.schedule, &x, t, &noise)?;
    let delta = estimator_delta(setup.estimator, setup.prior, setup.schedule, &noisy, setup.weights)?;

    let mut scale = setup.weights.w_t.weight(alpha_bar);
    if setup.chain_sqrt_alpha_bar {
        scale *= alpha_bar.sqrt();
    }
    let mut upstream_img = Image::new(w, h, 3);
    let upstream: Vec<RayUpstream> = pixels
        .iter()
        .map(|&i| {
            let d = delta.pixel(i);
            let g = [d[0] * scale, d[1] * scale, d[2] * scale];
            upstream_img.pixel_mut(i).copy_from_slice(&g);
            match setup.modality {
                Modality::Rgb => RayUpstream { d_color: g, ..Default::default() },
                // x = (n + 1) / 2
                Modality::Normal => RayUpstream { d_normal: g.map(|v| 0.5 * v), ..Default::default() },
            }
        })
        .collect();
    let grad = render::render_vjp(setup.grid, &tape, &upstream)?;
    Ok(DistillOutcome { grad, t, alpha_bar, upstream: upstream_img })
}
