//! Closed-form diffusion priors.
//!
//! The forward process is the continuous variance-preserving family with a
//! linear `beta(s)`, so `alpha_bar(t) = exp(-beta_min t - (beta_max - beta_min) t^2 / 2)`
//! and `x_t = sqrt(alpha_bar) x + sqrt(1 - alpha_bar) eps`.
//!
//! Each condition is an isotropic Gaussian over whole images; the
//! unconditional density mixes the positive and negative conditionals. For a
//! Gaussian conditional `N(mu, v I)` the noised marginal is
//! `N(sqrt(a) mu, (a v + 1 - a) I)` and the optimal noise predictor is
//! `eps_hat = -sqrt(1 - a) * grad log p_t(x_t)`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, ImageError};

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("timestep {0} outside [0, 1]")]
    TimestepOutOfRange(f64),
    #[error("schedule needs 0 < beta_min <= beta_max, got ({0}, {1})")]
    BadSchedule(f64, f64),
    #[error("prior variance must be positive, got {0}")]
    BadVariance(f64),
    #[error("mixture weight must lie in [0, 1], got {0}")]
    BadMixWeight(f64),
    #[error("prior mean image contains non-finite values")]
    NonFiniteMean,
    #[error(transparent)]
    Shape(#[from] ImageError),
}

/// Continuous variance-preserving schedule with linear `beta(s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { beta_min: 0.1, beta_max: 20.0 }
    }
}

impl NoiseSchedule {
    pub fn new(beta_min: f64, beta_max: f64) -> Result<Self, PriorError> {
        let s = Self { beta_min, beta_max };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), PriorError> {
        if !(self.beta_min > 0.0 && self.beta_max >= self.beta_min && self.beta_max.is_finite()) {
            return Err(PriorError::BadSchedule(self.beta_min, self.beta_max));
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: f64) -> Result<f64, PriorError> {
        if !(0.0..=1.0).contains(&t) {
            return Err(PriorError::TimestepOutOfRange(t));
        }
        Ok((-self.beta_min * t - 0.5 * (self.beta_max - self.beta_min) * t * t).exp())
    }
}

/// Which density the predictor is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Positive,
    Negative,
    Unconditional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Rgb,
    Normal,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Normal => "normal",
        }
    }
}

/// Isotropic Gaussian over images.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub mean: Image,
    pub variance: f64,
}

/// Noised image together with the noise that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyImage {
    pub x_t: Image,
    pub t: f64,
    pub alpha_bar: f64,
    pub noise: Image,
}

/// `x_t = sqrt(a) x + sqrt(1 - a) eps`.
pub fn add_noise(schedule: &NoiseSchedule, x: &Image, t: f64, noise: &Image) -> Result<NoisyImage, PriorError> {
    x.check_shape(noise)?;
    let a = schedule.alpha_bar(t)?;
    let (s, r) = (a.sqrt(), (1.0 - a).sqrt());
    let data = x.data().iter().zip(noise.data()).map(|(xv, e)| s * xv + r * e).collect();
    Ok(NoisyImage {
        x_t: Image::from_vec(x.width(), x.height(), x.channels(), data)?,
        t,
        alpha_bar: a,
        noise: noise.clone(),
    })
}

/// Image of i.i.d. standard normal draws.
pub fn standard_normal_image<R: Rng + ?Sized>(rng: &mut R, width: usize, height: usize, channels: usize) -> Image {
    let data = (0..width * height * channels).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Image::from_vec(width, height, channels, data).expect("shape")
}

/// Anything that predicts the noise in `x_t` under a condition.
pub trait NoisePredictor {
    fn predict_noise(&self, schedule: &NoiseSchedule, x_t: &Image, t: f64, cond: Condition) -> Result<Image, PriorError>;
}

/// Positive and negative Gaussian conditionals plus their mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticPrior {
    pub modality: Modality,
    pub positive: GaussianComponent,
    pub negative: GaussianComponent,
    /// Weight of the positive component in the unconditional mixture.
    pub mix_weight: f64,
}

impl AnalyticPrior {
    pub fn new(
        modality: Modality,
        positive: GaussianComponent,
        negative: GaussianComponent,
        mix_weight: f64,
    ) -> Result<Self, PriorError> {
        let p = Self { modality, positive, negative, mix_weight };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), PriorError> {
        self.positive.mean.check_shape(&self.negative.mean)?;
        for c in [&self.positive, &self.negative] {
            if !(c.variance > 0.0 && c.variance.is_finite()) {
                return Err(PriorError::BadVariance(c.variance));
            }
            if c.mean.data().iter().any(|v| !v.is_finite()) {
                return Err(PriorError::NonFiniteMean);
            }
        }
        if !(0.0..=1.0).contains(&self.mix_weight) {
            return Err(PriorError::BadMixWeight(self.mix_weight));
        }
        Ok(())
    }

    /// Image shape `(width, height, channels)` the prior is defined over.
    pub fn shape(&self) -> (usize, usize, usize) {
        self.positive.mean.shape()
    }

    fn component(&self, cond: Condition) -> &GaussianComponent {
        match cond {
            Condition::Negative => &self.negative,
            _ => &self.positive,
        }
    }

    /// Log-density of the noised Gaussian component at `x_t`, with `a = alpha_bar`.
    fn component_log_density(c: &GaussianComponent, x_t: &Image, a: f64) -> f64 {
        let var = a * c.variance + 1.0 - a;
        let s = a.sqrt();
        let sq: f64 = x_t.data().iter().zip(c.mean.data()).map(|(x, m)| (x - s * m).powi(2)).sum();
        let dim = x_t.data().len() as f64;
        -0.5 * sq / var - 0.5 * dim * (2.0 * std::f64::consts::PI * var).ln()
    }

    fn component_score(c: &GaussianComponent, x_t: &Image, a: f64) -> Vec<f64> {
        let var = a * c.variance + 1.0 - a;
        let s = a.sqrt();
        x_t.data().iter().zip(c.mean.data()).map(|(x, m)| -(x - s * m) / var).collect()
    }

    /// Posterior weights `(gamma_pos, gamma_neg)` of the mixture components at `x_t`.
    pub fn responsibilities(&self, schedule: &NoiseSchedule, x_t: &Image, t: f64) -> Result<[f64; 2], PriorError> {
        self.positive.mean.check_shape(x_t)?;
        let a = schedule.alpha_bar(t)?;
        Ok(self.responsibilities_at(x_t, a))
    }

    fn responsibilities_at(&self, x_t: &Image, a: f64) -> [f64; 2] {
        let pi = self.mix_weight;
        if pi >= 1.0 {
            return [1.0, 0.0];
        }
        if pi <= 0.0 {
            return [0.0, 1.0];
        }
        let lp = pi.ln() + Self::component_log_density(&self.positive, x_t, a);
        let ln = (1.0 - pi).ln() + Self::component_log_density(&self.negative, x_t, a);
        let m = lp.max(ln);
        let (ep, en) = ((lp - m).exp(), (ln - m).exp());
        let z = ep + en;
        [ep / z, en / z]
    }

    /// `log p_t(x_t | cond)`.
    pub fn log_density(&self, schedule: &NoiseSchedule, x_t: &Image, t: f64, cond: Condition) -> Result<f64, PriorError> {
        self.positive.mean.check_shape(x_t)?;
        let a = schedule.alpha_bar(t)?;
        Ok(match cond {
            Condition::Positive | Condition::Negative => Self::component_log_density(self.component(cond), x_t, a),
            Condition::Unconditional => {
                let pi = self.mix_weight;
                let mut terms = Vec::with_capacity(2);
                if pi > 0.0 {
                    terms.push(pi.ln() + Self::component_log_density(&self.positive, x_t, a));
                }
                if pi < 1.0 {
                    terms.push((1.0 - pi).ln() + Self::component_log_density(&self.negative, x_t, a));
                }
                let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + terms.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
            }
        })
    }

    /// Analytic `grad_{x_t} log p_t(x_t | cond)`.
    pub fn score(&self, schedule: &NoiseSchedule, x_t: &Image, t: f64, cond: Condition) -> Result<Image, PriorError> {
        self.positive.mean.check_shape(x_t)?;
        let a = schedule.alpha_bar(t)?;
        let data = self.score_at(x_t, a, cond);
        Ok(Image::from_vec(x_t.width(), x_t.height(), x_t.channels(), data)?)
    }

    fn score_at(&self, x_t: &Image, a: f64, cond: Condition) -> Vec<f64> {
        match cond {
            Condition::Positive | Condition::Negative => Self::component_score(self.component(cond), x_t, a),
            Condition::Unconditional => {
                let [gp, gn] = self.responsibilities_at(x_t, a);
                let sp = Self::component_score(&self.positive, x_t, a);
                let sn = Self::component_score(&self.negative, x_t, a);
                sp.iter().zip(&sn).map(|(p, n)| gp * p + gn * n).collect()
            }
        }
    }

    /// `E[x | x_t]` in closed form. For the mixture this is the
    /// responsibility-weighted blend of the component posterior means.
    pub fn posterior_mean(&self, schedule: &NoiseSchedule, x_t: &Image, t: f64, cond: Condition) -> Result<Image, PriorError> {
        self.positive.mean.check_shape(x_t)?;
        let a = schedule.alpha_bar(t)?;
        let s = a.sqrt();
        let component_mean = |c: &GaussianComponent| -> Vec<f64> {
            let gain = s * c.variance / (a * c.variance + 1.0 - a);
            x_t.data().iter().zip(c.mean.data()).map(|(x, m)| m + gain * (x - s * m)).collect()
        };
        let data = match cond {
            Condition::Unconditional => {
                let [gp, gn] = self.responsibilities_at(x_t, a);
                let (mp, mn) = (component_mean(&self.positive), component_mean(&self.negative));
                mp.iter().zip(&mn).map(|(p, n)| gp * p + gn * n).collect()
            }
            _ => component_mean(self.component(cond)),
        };
        Ok(Image::from_vec(x_t.width(), x_t.height(), x_t.channels(), data)?)
    }
}

impl NoisePredictor for AnalyticPrior {
    fn predict_noise(&self, schedule: &NoiseSchedule, x_t: &Image, t: f64, cond: Condition) -> Result<Image, PriorError> {
        self.positive.mean.check_shape(x_t)?;
        let a = schedule.alpha_bar(t)?;
        let r = (1.0 - a).sqrt();
        let data = self.score_at(x_t, a, cond).into_iter().map(|s| -r * s).collect();
        Ok(Image::from_vec(x_t.width(), x_t.height(), x_t.channels(), data)?)
    }
}

/// Denoiser implied by a noise prediction: `(x_t - sqrt(1 - a) eps_hat) / sqrt(a)`.
pub fn denoise(noisy: &Image, eps_hat: &Image, alpha_bar: f64) -> Image {
    let (s, r) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = noisy.data().iter().zip(eps_hat.data()).map(|(x, e)| (x - r * e) / s).collect();
    Image::from_vec(noisy.width(), noisy.height(), noisy.channels(), data).expect("shape")
}

/// Largest absolute gap between the analytic score and central differences of
/// `log p_t` with step `h`.
pub fn score_check(
    prior: &AnalyticPrior,
    schedule: &NoiseSchedule,
    x_t: &Image,
    t: f64,
    cond: Condition,
    h: f64,
) -> Result<f64, PriorError> {
    let analytic = prior.score(schedule, x_t, t, cond)?;
    let mut probe = x_t.clone();
    let mut worst: f64 = 0.0;
    for i in 0..probe.data().len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = prior.log_density(schedule, &probe, t, cond)?;
        probe.data_mut()[i] = orig - h;
        let fm = prior.log_density(schedule, &probe, t, cond)?;
        probe.data_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        worst = worst.max((fd - analytic.data()[i]).abs());
    }
    Ok(worst)
}
