//! Suites that train: the omega3 sweep and the estimator comparison.
//!
//! Each run owns `runs/<label>/` (step log, final checkpoint, final render of
//! the strip view). Runs execute in parallel; tables are assembled in
//! setting order afterwards, so the output does not depend on scheduling.

use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::{write_rows, BenchError};
use crate::distill::Estimator;
use crate::experiment::{build_problem, ExperimentConfig, ExperimentData};
use crate::image::{Image, Mask};
use crate::render;
use crate::trainer::{self, EvalMetrics, RunOutput, StepReport, TrainError, TrainState, TrainingProblem};

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    /// Aborted at this step; metrics describe the last finite state.
    NonFinite(u64),
    Failed(String),
}

impl RunStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, RunStatus::Completed)
    }
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunStatus::Completed => f.write_str("ok"),
            RunStatus::NonFinite(step) => write!(f, "non_finite_at_step_{step}"),
            RunStatus::Failed(m) => write!(f, "failed: {m}"),
        }
    }
}

/// Evaluation at one step of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: u64,
    pub psnr_masked: f64,
    pub psnr_unmasked: f64,
    pub mse_masked: f64,
}

impl CurvePoint {
    fn new(step: u64, m: &EvalMetrics) -> Self {
        Self { step, psnr_masked: m.psnr_masked, psnr_unmasked: m.psnr_unmasked, mse_masked: m.mse_masked }
    }
}

/// Everything one training run produced.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub label: String,
    pub seed: u64,
    /// Completed optimizer steps.
    pub iterations: u64,
    pub status: RunStatus,
    pub metrics: EvalMetrics,
    pub curve: Vec<CurvePoint>,
    pub log: Vec<StepReport>,
    /// Color render of the strip view after training.
    pub strip_render: Image,
}

/// Index of the view with the largest mask (first on ties).
pub fn strip_view(data: &ExperimentData) -> usize {
    let mut best = 0;
    for (i, v) in data.target.views.iter().enumerate() {
        if v.mask.count() > data.target.views[best].mask.count() {
            best = i;
        }
    }
    best
}

/// Train from the configured initialization and evaluate against the
/// object-free reference. `eval_every > 0` adds curve points at those steps
/// (they must be logging steps); the initial and final states are always
/// evaluated when `curve` is set.
pub fn train_and_evaluate(
    label: &str,
    data: &ExperimentData,
    problem: &TrainingProblem,
    cfg: &ExperimentConfig,
    out: Option<&Path>,
    curve: bool,
) -> Result<RunResult, BenchError> {
    let train = &cfg.train;
    let ecfg = cfg.eval.render_config();
    let mut state = TrainState::init(cfg.scene.scene.dims, cfg.scene.scene.bbox, train)?;
    let mut points = Vec::new();
    if curve {
        points.push(CurvePoint::new(0, &trainer::evaluate(&state.grid, &data.target, &ecfg)?));
    }
    let output = out.map(|dir| RunOutput { dir: dir.to_path_buf(), timing: false });
    let every = cfg.eval.every;
    let result = trainer::run(&mut state, problem, train, output.as_ref(), |st, report| {
        log::debug!("{label} seed {}: {}", train.seed, report.summary());
        if curve && every > 0 && report.step % every == 0 && report.step != train.iterations {
            points.push(CurvePoint::new(report.step, &trainer::evaluate(&st.grid, &data.target, &ecfg)?));
        }
        Ok(())
    });
    let (status, log) = match result {
        Ok(log) => (RunStatus::Completed, log),
        Err(TrainError::NonFinite(r)) => (RunStatus::NonFinite(r.step), Vec::new()),
        Err(e) => (RunStatus::Failed(e.to_string()), Vec::new()),
    };
    let metrics = trainer::evaluate(&state.grid, &data.target, &ecfg)?;
    if curve {
        points.push(CurvePoint::new(state.step(), &metrics));
    }
    let view = &data.target.views[strip_view(data)];
    let strip_render = render::render(&state.grid, &view.camera, &ecfg)?.color;
    if let Some(dir) = out {
        strip_render.write_pfm(&dir.join("final_view.pfm"))?;
        strip_render.write_png(&dir.join("final_view.png"))?;
    }
    log::info!("{label} seed {}: {status}, {metrics:?}", train.seed);
    Ok(RunResult {
        label: label.into(),
        seed: train.seed,
        iterations: state.step(),
        status,
        metrics,
        curve: points,
        log,
        strip_render,
    })
}

/// Pixel bounds `(x0, y0, x1, y1)` (exclusive ends) of the mask, grown by
/// `margin` and clipped; the whole image for an empty mask.
fn mask_bounds(mask: &Mask, margin: usize) -> (usize, usize, usize, usize) {
    let (w, h) = (mask.width(), mask.height());
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if mask.get(y * w + x) {
                (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1));
            }
        }
    }
    if x1 == 0 {
        return (0, 0, w, h);
    }
    (x0.saturating_sub(margin), y0.saturating_sub(margin), (x1 + margin).min(w), (y1 + margin).min(h))
}

fn crop(img: &Image, (x0, y0, x1, y1): (usize, usize, usize, usize)) -> Image {
    let c = img.channels();
    let mut out = Image::new(x1 - x0, y1 - y0, c);
    for y in y0..y1 {
        for x in x0..x1 {
            for k in 0..c {
                out.set(x - x0, y - y0, k, img.get(x, y, k));
            }
        }
    }
    out
}

/// Side-by-side concatenation with a `gap`-pixel white separator.
fn hconcat(tiles: &[Image], gap: usize) -> Image {
    let h = tiles.iter().map(Image::height).max().unwrap_or(0);
    let w = tiles.iter().map(Image::width).sum::<usize>() + gap * tiles.len().saturating_sub(1);
    let mut out = Image::filled(w, h, 3, 1.0);
    let mut x0 = 0;
    for t in tiles {
        for y in 0..t.height() {
            for x in 0..t.width() {
                for k in 0..3 {
                    out.set(x0 + x, y, k, t.get(x, y, k.min(t.channels() - 1)));
                }
            }
        }
        x0 += t.width() + gap;
    }
    out
}

/// Crops of the masked region: the reference first, then each render.
pub fn masked_strip(data: &ExperimentData, renders: &[&Image]) -> Image {
    let view = &data.target.views[strip_view(data)];
    let b = mask_bounds(&view.mask, 4);
    let mut tiles = vec![crop(&view.image, b)];
    tiles.extend(renders.iter().map(|r| crop(r, b)));
    hconcat(&tiles, 2)
}

fn run_dir(out: Option<&Path>, label: &str, seed: u64) -> Option<PathBuf> {
    out.map(|d| d.join("runs").join(format!("{label}_seed{seed}")))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub omega3: f64,
    pub seed: u64,
    pub iterations: u64,
    pub status: String,
    pub psnr_masked: f64,
    pub psnr_unmasked: f64,
    /// Masked-region MSE against the object-free reference, which is the
    /// prior's positive mean rendered at evaluation resolution.
    pub mse_masked: f64,
    pub hf_energy_masked: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Reference crop then one crop per value, first seed.
    pub strip: Image,
    /// High-frequency energy of the reference in the masked region.
    pub reference_hf_energy: f64,
}

impl SweepResult {
    /// Mean masked MSE over the completed runs at `omega3`.
    pub fn mean_mse(&self, omega3: f64) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.omega3 == omega3 && r.status == "ok").map(|r| r.mse_masked).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// The trend check: mean MSE at 0 is no larger than at every other value
    /// in `against`.
    pub fn zero_is_best(&self, against: &[f64]) -> bool {
        let Some(zero) = self.mean_mse(0.0) else { return false };
        against.iter().all(|&v| self.mean_mse(v).is_some_and(|m| zero <= m))
    }

    pub fn write(&self, dir: &Path) -> Result<(), BenchError> {
        write_rows(&dir.join("results.csv"), &self.rows)?;
        self.strip.write_png(&dir.join("strip.png"))?;
        Ok(())
    }
}

fn label_value(v: f64) -> String {
    format!("{v:+}").replace('.', "p")
}

/// Train generalized CSD at each `omega3` (other weights from `base`) for
/// each seed. Non-finite runs become status rows.
pub fn omega3_sweep(
    base: &ExperimentConfig,
    data: &ExperimentData,
    values: &[f64],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<SweepResult, BenchError> {
    if !values.contains(&0.0) {
        return Err(BenchError::Invalid("omega3 sweep values must include 0".into()));
    }
    if seeds.is_empty() {
        return Err(BenchError::Invalid("omega3 sweep needs at least one seed".into()));
    }
    let problem = build_problem(data, base)?;
    let settings: Vec<(f64, u64)> = values.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    let results: Vec<RunResult> = settings
        .par_iter()
        .map(|&(v, seed)| {
            let mut cfg = base.clone();
            cfg.train.estimator = Estimator::CsdW3;
            cfg.train.appearance.omega3 = v;
            if base.bench.omega3_geometry {
                cfg.train.geometry.omega3 = v;
            }
            cfg.train.seed = seed;
            let label = format!("omega3_{}", label_value(v));
            let dir = run_dir(out, &label, seed);
            train_and_evaluate(&label, data, &problem, &cfg, dir.as_deref(), false)
        })
        .collect::<Result<_, _>>()?;
    let rows = settings
        .iter()
        .zip(&results)
        .map(|(&(v, seed), r)| SweepRow {
            omega3: v,
            seed,
            iterations: r.iterations,
            status: r.status.to_string(),
            psnr_masked: r.metrics.psnr_masked,
            psnr_unmasked: r.metrics.psnr_unmasked,
            mse_masked: r.metrics.mse_masked,
            hf_energy_masked: r.metrics.hf_energy_masked,
        })
        .collect();
    let first: Vec<&Image> =
        settings.iter().zip(&results).filter(|((_, s), _)| *s == seeds[0]).map(|(_, r)| &r.strip_render).collect();
    let view = &data.target.views[strip_view(data)];
    let result = SweepResult {
        rows,
        strip: masked_strip(data, &first),
        reference_hf_energy: trainer::masked_high_frequency_energy(&view.image, &view.mask),
    };
    if let Some(dir) = out {
        result.write(dir)?;
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub estimator: String,
    pub seed: u64,
    pub iterations: u64,
    pub status: String,
    pub psnr: f64,
    pub psnr_masked: f64,
    pub psnr_unmasked: f64,
    pub mse_masked: f64,
    pub depth_rmse: f64,
    pub normal_error_deg: f64,
    pub hf_energy_masked: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub estimator: String,
    pub seed: u64,
    pub step: u64,
    pub psnr_masked: f64,
    pub psnr_unmasked: f64,
    pub mse_masked: f64,
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    pub curves: Vec<CurveRow>,
    pub strip: Image,
    /// Per-run step logs, in row order.
    pub logs: Vec<Vec<StepReport>>,
}

impl CompareReport {
    /// Mean final masked PSNR over completed runs of `estimator`.
    pub fn mean_psnr_masked(&self, estimator: Estimator) -> Option<f64> {
        let v: Vec<f64> =
            self.rows.iter().filter(|r| r.estimator == estimator.name() && r.status == "ok").map(|r| r.psnr_masked).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn write(&self, dir: &Path) -> Result<(), BenchError> {
        write_rows(&dir.join("results.csv"), &self.rows)?;
        write_rows(&dir.join("curves.csv"), &self.curves)?;
        self.strip.write_png(&dir.join("strip.png"))?;
        Ok(())
    }
}

/// Train each estimator (weights from `base`) for each seed, recording
/// evaluation curves at `base.eval.every` and final metrics.
pub fn estimator_compare(
    base: &ExperimentConfig,
    data: &ExperimentData,
    estimators: &[Estimator],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<CompareReport, BenchError> {
    if estimators.is_empty() || seeds.is_empty() {
        return Err(BenchError::Invalid("estimator comparison needs estimators and seeds".into()));
    }
    let problem = build_problem(data, base)?;
    let settings: Vec<(Estimator, u64)> = estimators.iter().flat_map(|&e| seeds.iter().map(move |&s| (e, s))).collect();
    let results: Vec<RunResult> = settings
        .par_iter()
        .map(|&(est, seed)| {
            let mut cfg = base.clone();
            cfg.train.estimator = est;
            cfg.train.seed = seed;
            let dir = run_dir(out, est.name(), seed);
            train_and_evaluate(est.name(), data, &problem, &cfg, dir.as_deref(), true)
        })
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for (&(est, seed), r) in settings.iter().zip(&results) {
        let m = &r.metrics;
        rows.push(CompareRow {
            estimator: est.name().into(),
            seed,
            iterations: r.iterations,
            status: r.status.to_string(),
            psnr: m.psnr,
            psnr_masked: m.psnr_masked,
            psnr_unmasked: m.psnr_unmasked,
            mse_masked: m.mse_masked,
            depth_rmse: m.depth_rmse,
            normal_error_deg: m.normal_error_deg,
            hf_energy_masked: m.hf_energy_masked,
        });
        curves.extend(r.curve.iter().map(|p| CurveRow {
            estimator: est.name().into(),
            seed,
            step: p.step,
            psnr_masked: p.psnr_masked,
            psnr_unmasked: p.psnr_unmasked,
            mse_masked: p.mse_masked,
        }));
    }
    let first: Vec<&Image> =
        settings.iter().zip(&results).filter(|((_, s), _)| *s == seeds[0]).map(|(_, r)| &r.strip_render).collect();
    let report =
        CompareReport { rows, curves, strip: masked_strip(data, &first), logs: results.into_iter().map(|r| r.log).collect() };
    if let Some(dir) = out {
        report.write(dir)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Aabb;

    fn smoke() -> (ExperimentConfig, ExperimentData) {
        let cfg = ExperimentConfig::smoke();
        let data = ExperimentData::generate(&cfg).unwrap();
        (cfg, data)
    }

    #[test]
    fn zero_row_matches_bsd_run() {
        let (cfg, data) = smoke();
        let sweep = omega3_sweep(&cfg, &data, &[0.0], &[4], None).unwrap();
        let problem = build_problem(&data, &cfg).unwrap();
        let mut bsd = cfg.clone();
        bsd.train.estimator = Estimator::Bsd;
        bsd.train.seed = 4;
        let r = train_and_evaluate("bsd", &data, &problem, &bsd, None, false).unwrap();
        assert_eq!(sweep.rows[0].mse_masked, r.metrics.mse_masked);
        assert_eq!(sweep.rows[0].psnr_unmasked, r.metrics.psnr_unmasked);
    }

    #[test]
    fn empty_mask_sweep_rows_coincide() {
        let (mut cfg, _) = smoke();
        cfg.scene.mask_box = Aabb::new([5.0, 5.0, 5.0], [6.0, 6.0, 6.0]);
        let data = ExperimentData::generate(&cfg).unwrap();
        let sweep = omega3_sweep(&cfg, &data, &[-2.0, 0.0, 2.0], &[1], None).unwrap();
        for r in &sweep.rows[1..] {
            assert_eq!(r.psnr_unmasked, sweep.rows[0].psnr_unmasked);
            assert_eq!(r.psnr_masked, sweep.rows[0].psnr_masked);
        }
        assert!(sweep.rows.iter().all(|r| r.status == "ok"));
    }

    #[test]
    fn sweep_requires_zero() {
        let (cfg, data) = smoke();
        assert!(matches!(omega3_sweep(&cfg, &data, &[1.0], &[1], None), Err(BenchError::Invalid(_))));
    }

    #[test]
    fn disabled_distillation_gives_identical_curves() {
        let (mut cfg, data) = smoke();
        cfg.train.loss.lambda2 = 0.0;
        cfg.train.loss.lambda3 = 0.0;
        cfg.eval.every = 2;
        let rep = estimator_compare(&cfg, &data, &[Estimator::Sds, Estimator::Csd, Estimator::Bsd], &[2], None).unwrap();
        let curve = |e: &str| rep.curves.iter().filter(|c| c.estimator == e).cloned().map(|c| (c.step, c.mse_masked)).collect::<Vec<_>>();
        assert_eq!(curve("sds"), curve("bsd"));
        assert_eq!(curve("csd"), curve("bsd"));
        // Points at 0, 2, 4 and the final step 6.
        assert_eq!(curve("bsd").iter().map(|c| c.0).collect::<Vec<_>>(), vec![0, 2, 4, 6]);
    }

    #[test]
    fn curves_have_one_log_row_per_logging_step() {
        let (cfg, data) = smoke();
        let dir = tempfile::tempdir().unwrap();
        let rep = estimator_compare(&cfg, &data, &[Estimator::Bsd, Estimator::Sds], &[1, 2], Some(dir.path())).unwrap();
        for log in &rep.logs {
            assert_eq!(log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 4, 6]);
        }
        let metrics = std::fs::read_to_string(dir.path().join("runs/bsd_seed2/metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 5);
        assert!(dir.path().join("curves.csv").is_file() && dir.path().join("strip.png").is_file());
    }

    #[test]
    fn sweep_output_is_reproducible() {
        let (cfg, data) = smoke();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        omega3_sweep(&cfg, &data, &[0.0, 1.0], &[1, 2], Some(a.path())).unwrap();
        omega3_sweep(&cfg, &data, &[0.0, 1.0], &[1, 2], Some(b.path())).unwrap();
        let read = |d: &Path| std::fs::read(d.join("results.csv")).unwrap();
        assert_eq!(read(a.path()), read(b.path()));
        let text = String::from_utf8(read(a.path())).unwrap();
        assert!(text.starts_with("omega3,seed,iterations,status,psnr_masked"), "{text}");
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn failed_runs_become_status_rows() {
        let (mut cfg, data) = smoke();
        cfg.train.learning_rate = 1e300;
        let sweep = omega3_sweep(&cfg, &data, &[0.0], &[1], None).unwrap();
        let row = &sweep.rows[0];
        assert!(row.status.starts_with("non_finite"), "{row:?}");
        assert!(row.mse_masked.is_finite() && row.psnr_masked.is_finite());
    }
}
