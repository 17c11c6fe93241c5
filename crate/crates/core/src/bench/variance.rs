//! Monte Carlo variance of distillation estimators at a fixed image.
//!
//! For estimators that only touch the two Gaussian conditionals the
//! per-component prediction is affine in the noise,
//! `eps_hat_k = r s (x - mu_k) / D_k + (r^2 / D_k) eps` with `s = sqrt(a)`,
//! `r = sqrt(1 - a)` and `D_k = a v_k + 1 - a`. So `delta | t = m(t) + b(t) eps`,
//! and the variance over `(t, eps)` is `E[b^2] + E[m^2] - E[m]^2`. That closed
//! form is the oracle for the sampled numbers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{trial_seed, BenchError};
use crate::distill::{self, DistillWeights, Estimator};
use crate::image::Image;
use crate::prior::{self, AnalyticPrior, GaussianComponent, Modality, NoiseSchedule};

/// A prior, a fixed image and the timestep range draws come from.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceFixture {
    pub prior: AnalyticPrior,
    pub schedule: NoiseSchedule,
    pub x: Image,
    pub t_range: (f64, f64),
}

/// 16x16 RGB, positive mean 1, negative mean 0, both variances 0.1, equal
/// mixture, image held at 0.25, t in [0.02, 0.98].
pub fn reference_variance_fixture() -> VarianceFixture {
    let (w, h) = (16, 16);
    let comp = |m: f64| GaussianComponent { mean: Image::filled(w, h, 3, m), variance: 0.1 };
    VarianceFixture {
        prior: AnalyticPrior::new(Modality::Rgb, comp(1.0), comp(0.0), 0.5).expect("valid prior"),
        schedule: NoiseSchedule::default(),
        x: Image::filled(w, h, 3, 0.25),
        t_range: (0.02, 0.98),
    }
}

/// One estimator configuration to measure.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorSpec {
    pub label: String,
    pub estimator: Estimator,
    pub weights: DistillWeights,
}

impl EstimatorSpec {
    pub fn new(estimator: Estimator, weights: DistillWeights) -> Self {
        let label = match estimator {
            Estimator::Sds | Estimator::CfgSds => format!("{estimator}(omega={})", weights.omega),
            Estimator::CsdW3 => format!("{estimator}(omega3={})", weights.omega3),
            _ => estimator.name().to_string(),
        };
        Self { label, estimator, weights }
    }
}

/// SDS at omega 7.5, CSD, generalized CSD at omega3 = +2 and BSD, all with
/// the appearance weights.
pub fn default_variance_estimators() -> Vec<EstimatorSpec> {
    let w = DistillWeights::appearance();
    vec![
        EstimatorSpec::new(Estimator::Sds, w),
        EstimatorSpec::new(Estimator::Csd, w),
        EstimatorSpec::new(Estimator::CsdW3, DistillWeights { omega3: 2.0, ..w }),
        EstimatorSpec::new(Estimator::Bsd, w),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceRow {
    pub estimator: String,
    pub draws: usize,
    /// Average over components of the per-component sample mean of delta.
    pub mean_delta: f64,
    /// Average over components of the per-component sample variance.
    pub mean_variance: f64,
    /// `mean_variance` over the first SDS row's; empty without a usable baseline.
    pub variance_ratio_vs_sds: Option<f64>,
    /// Closed-form `mean_variance` when the estimator is affine in the noise.
    pub closed_form_variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceReport {
    pub rows: Vec<VarianceRow>,
}

impl VarianceReport {
    pub fn row(&self, label: &str) -> Option<&VarianceRow> {
        self.rows.iter().find(|r| r.estimator == label)
    }
}

/// Per-component running mean and sum of squared deviations.
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(len: usize) -> Self {
        Self { n: 0, mean: vec![0.0; len], m2: vec![0.0; len] }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    fn mean_of_means(&self) -> f64 {
        self.mean.iter().sum::<f64>() / self.mean.len() as f64
    }

    /// Unbiased variance averaged over components.
    fn mean_variance(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        self.m2.iter().sum::<f64>() / ((self.n - 1) as f64 * self.m2.len() as f64)
    }
}

/// Hold `fixture.x` fixed, draw `draws` pairs `(t, eps)` shared by every
/// estimator and report the per-component statistics of delta. Draw `i`
/// uses its own stream, so results do not depend on the estimator list.
pub fn variance_study(
    specs: &[EstimatorSpec],
    fixture: &VarianceFixture,
    draws: usize,
    seed: u64,
) -> Result<VarianceReport, BenchError> {
    if draws < 1000 {
        return Err(BenchError::Invalid(format!("variance study needs at least 1000 draws, got {draws}")));
    }
    let (w, h, c) = fixture.x.shape();
    let (t0, t1) = fixture.t_range;
    let mut stats: Vec<Welford> = specs.iter().map(|_| Welford::new(w * h * c)).collect();
    for i in 0..draws {
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(seed, i as u64));
        let t = if t1 > t0 { rng.random_range(t0..t1) } else { t0 };
        let noise = prior::standard_normal_image(&mut rng, w, h, c);
        let n = prior::add_noise(&fixture.schedule, &fixture.x, t, &noise)?;
        for (spec, st) in specs.iter().zip(&mut stats) {
            let d = distill::estimator_delta(spec.estimator, &fixture.prior, &fixture.schedule, &n, &spec.weights)?;
            st.push(d.data());
        }
    }
    let baseline = specs
        .iter()
        .position(|s| s.estimator == Estimator::Sds)
        .map(|i| stats[i].mean_variance())
        .filter(|v| *v > 0.0);
    let rows = specs
        .iter()
        .zip(&stats)
        .map(|(spec, st)| {
            let var = st.mean_variance();
            VarianceRow {
                estimator: spec.label.clone(),
                draws,
                mean_delta: st.mean_of_means(),
                mean_variance: var,
                variance_ratio_vs_sds: baseline.map(|b| var / b),
                closed_form_variance: affine_coefficients(spec.estimator, &spec.weights)
                    .map(|(cp, cn, ce)| affine_variance(fixture, cp, cn, ce)),
            }
        })
        .collect();
    Ok(VarianceReport { rows })
}

/// `(c_pos, c_neg, c_eps)` with `delta = c_pos eps_pos + c_neg eps_neg - c_eps eps`,
/// or `None` when the unconditional (mixture) prediction is involved.
pub fn affine_coefficients(estimator: Estimator, w: &DistillWeights) -> Option<(f64, f64, f64)> {
    if estimator.uses_unconditional(w) {
        return None;
    }
    Some(match estimator {
        Estimator::Sds | Estimator::CfgSds => (1.0, 0.0, 1.0),
        Estimator::Csd | Estimator::CsdW3 | Estimator::Bsd => (w.omega1, -w.omega2, 0.0),
    })
}

/// Closed-form mean per-component variance of an affine estimator, with the
/// timestep integral done by composite Simpson on 2048 panels.
pub fn affine_variance(fixture: &VarianceFixture, c_pos: f64, c_neg: f64, c_eps: f64) -> f64 {
    let p = &fixture.prior;
    let (vp, vn) = (p.positive.variance, p.negative.variance);
    let x = fixture.x.data();
    let (mp, mn) = (p.positive.mean.data(), p.negative.mean.data());
    let moments = |t: f64| -> (Vec<f64>, Vec<f64>, f64) {
        let a = fixture.schedule.alpha_bar(t).expect("t in range");
        let (s, r) = (a.sqrt(), (1.0 - a).sqrt());
        let (dp, dn) = (a * vp + 1.0 - a, a * vn + 1.0 - a);
        let b = r * r * (c_pos / dp + c_neg / dn) - c_eps;
        let m: Vec<f64> =
            x.iter().zip(mp).zip(mn).map(|((x, p), n)| r * s * (c_pos * (x - p) / dp + c_neg * (x - n) / dn)).collect();
        let m2 = m.iter().map(|v| v * v).collect();
        (m, m2, b * b)
    };
    let (t0, t1) = fixture.t_range;
    let len = x.len();
    let (mut e_m, mut e_m2, mut e_b2) = (vec![0.0; len], vec![0.0; len], 0.0);
    if t1 > t0 {
        const PANELS: usize = 2048;
        let h = (t1 - t0) / PANELS as f64;
        for i in 0..=PANELS {
            let wgt = if i == 0 || i == PANELS { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            let (m, m2, b2) = moments(t0 + i as f64 * h);
            let k = wgt * h / 3.0 / (t1 - t0);
            for j in 0..len {
                e_m[j] += k * m[j];
                e_m2[j] += k * m2[j];
            }
            e_b2 += k * b2;
        }
    } else {
        let (m, m2, b2) = moments(t0);
        (e_m, e_m2, e_b2) = (m, m2, b2);
    }
    let var_sum: f64 = e_m.iter().zip(&e_m2).map(|(m, m2)| (m2 - m * m).max(0.0)).sum();
    e_b2 + var_sum / len as f64
}
