use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use distill_lab::bench::{self, Suite};
use distill_lab::experiment::{build_problem, distill_camera, ExperimentConfig, ExperimentData};
use distill_lab::field::VoxelGrid;
use distill_lab::render::{self, make_rays, RenderOutput, SamplingConfig};
use distill_lab::scene;
use distill_lab::trainer::{self, RunOutput, TrainError, TrainState};
use serde::Serialize;

/// Why a command stopped; each variant maps to one exit code.
#[derive(Debug)]
pub enum Failure {
    Assertion(String),
    Usage(String),
    NonFinite(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Assertion(_) => 1,
            Failure::Usage(_) => 2,
            Failure::NonFinite(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Assertion(m) | Failure::Usage(m) | Failure::NonFinite(m) => f.write_str(m),
        }
    }
}

fn usage(e: impl fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn from_train(e: TrainError) -> Failure {
    match e {
        TrainError::NonFinite(_) => Failure::NonFinite(e.to_string()),
        e => usage(e),
    }
}

fn from_bench(e: bench::BenchError) -> Failure {
    match e {
        bench::BenchError::Train(t) => from_train(t),
        e => usage(e),
    }
}

/// Load, apply the seed override and validate.
fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(path).map_err(usage)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.seeds = vec![s];
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn output_root(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.clone().unwrap_or_else(|| Path::new("reports").join(&cfg.name))
}

/// Create `dir` and write `config.json` into it.
fn start_output(dir: &Path, json: &str) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
    let path = dir.join("config.json");
    fs::write(&path, json).map_err(|e| usage(format!("{}: {e}", path.display())))
}

pub fn genscene(config: &Path, out: Option<PathBuf>, seed: Option<u64>, dry_run: bool) -> Result<(), Failure> {
    let cfg = load_config(config, seed)?;
    if dry_run {
        print!("{}", cfg.to_json());
        return Ok(());
    }
    let dir = out.or_else(|| cfg.dataset.clone()).unwrap_or_else(|| output_root(&cfg).join("dataset"));
    start_output(&dir, &cfg.to_json())?;
    let data = ExperimentData::generate(&cfg).map_err(usage)?;
    data.save(&dir).map_err(usage)?;
    for (i, v) in data.train.views.iter().enumerate() {
        let cam = distill_camera(&v.camera, cfg.train.distill_resolution);
        println!(
            "view {i:03}: {}x{} masked {} px ({:.4}), distill {}x{}",
            v.mask.width(),
            v.mask.height(),
            v.mask.count(),
            v.mask.fraction(),
            cam.width,
            cam.height
        );
    }
    println!("dataset written to {}", dir.display());
    Ok(())
}

pub struct TrainRequest {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub resume: Option<PathBuf>,
    pub iters: Option<u64>,
    pub dry_run: bool,
}

pub fn train(req: TrainRequest) -> Result<(), Failure> {
    let mut cfg = load_config(&req.config, req.seed)?;
    if let Some(n) = req.iters {
        cfg.train.iterations = n;
        cfg.validate().map_err(usage)?;
    }
    // A dataset left by `genscene` at its default location is picked up.
    if cfg.dataset.is_none() {
        let default = output_root(&cfg).join("dataset");
        if default.join("train/poses.json").is_file() {
            cfg.dataset = Some(default);
        }
    }
    if req.dry_run {
        print!("{}", cfg.to_json());
        return Ok(());
    }
    let dir = req.out.clone().unwrap_or_else(|| output_root(&cfg).join("train"));
    start_output(&dir, &cfg.to_json())?;
    let mut state = match &req.resume {
        Some(ckpt) => {
            let st = trainer::load_checkpoint(ckpt).map_err(usage)?;
            let (dims, bbox) = (cfg.scene.scene.dims, cfg.scene.scene.bbox);
            if st.grid.dims() != dims || st.grid.bbox() != bbox {
                return Err(usage(format!(
                    "{}: checkpoint grid {:?} does not match scene.scene.dims {dims:?}",
                    ckpt.display(),
                    st.grid.dims()
                )));
            }
            log::info!("resuming from {} at step {}", ckpt.display(), st.step());
            st
        }
        None => TrainState::init(cfg.scene.scene.dims, cfg.scene.scene.bbox, &cfg.train).map_err(usage)?,
    };
    match &cfg.dataset {
        Some(d) => log::info!("loading dataset {}", d.display()),
        None => log::info!("generating data in memory (run genscene to cache it)"),
    }
    let data = ExperimentData::resolve(&cfg).map_err(usage)?;
    let problem = build_problem(&data, &cfg).map_err(usage)?;
    let output = RunOutput { dir: dir.clone(), timing: true };
    let result = trainer::run(&mut state, &problem, &cfg.train, Some(&output), |_, r| {
        log::info!("{}", r.summary());
        Ok(())
    });
    if let Err(e) = result {
        if let TrainError::NonFinite(_) = e {
            // The failed step left the state as it was after the last good step.
            let ckpt = dir.join("checkpoint");
            trainer::save_checkpoint(&state, &ckpt).map_err(usage)?;
            log::error!("last good state (step {}) saved to {}", state.step(), ckpt.display());
        }
        return Err(from_train(e));
    }
    let metrics = trainer::evaluate(&state.grid, &data.target, &cfg.eval.render_config()).map_err(usage)?;
    bench::write_rows(&dir.join("eval.csv"), &[metrics]).map_err(usage)?;
    println!(
        "step {}: psnr {:.3} dB, masked {:.3} dB, unmasked {:.3} dB, mse_masked {:.6}",
        state.step(),
        metrics.psnr,
        metrics.psnr_masked,
        metrics.psnr_unmasked,
        metrics.mse_masked
    );
    Ok(())
}

pub struct RenderRequest {
    pub checkpoint: PathBuf,
    pub poses: PathBuf,
    pub views: Vec<usize>,
    pub res: Option<usize>,
    pub samples: usize,
    pub out: PathBuf,
    pub dry_run: bool,
}

/// The resolved render settings written to `config.json`.
#[derive(Debug, Serialize)]
struct RenderSettings<'a> {
    checkpoint: &'a Path,
    poses: &'a Path,
    views: &'a [usize],
    res: Option<usize>,
    sampling: SamplingConfig,
    near: f64,
    far: f64,
}

fn load_grid(path: &Path) -> Result<VoxelGrid, Failure> {
    if path.is_dir() {
        Ok(trainer::load_checkpoint(path).map_err(usage)?.grid)
    } else {
        VoxelGrid::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))
    }
}

pub fn render(req: RenderRequest) -> Result<(), Failure> {
    if req.samples < 2 {
        return Err(usage("--samples must be >= 2"));
    }
    if req.res == Some(0) {
        return Err(usage("--res must be positive"));
    }
    let (cameras, near, far) = scene::load_cameras(&req.poses).map_err(usage)?;
    let views: Vec<usize> = if req.views.is_empty() { (0..cameras.len()).collect() } else { req.views.clone() };
    if let Some(&bad) = views.iter().find(|&&v| v >= cameras.len()) {
        return Err(usage(format!(
            "view {bad} out of range: {} has {} views (0..={})",
            req.poses.display(),
            cameras.len(),
            cameras.len() - 1
        )));
    }
    let grid = load_grid(&req.checkpoint)?;
    let sampling = SamplingConfig { samples: req.samples, stratified: false, seed: 0 };
    let settings =
        RenderSettings { checkpoint: &req.checkpoint, poses: &req.poses, views: &views, res: req.res, sampling, near, far };
    let json = serde_json::to_string_pretty(&settings).expect("render settings serialize") + "\n";
    if req.dry_run {
        print!("{json}");
        return Ok(());
    }
    start_output(&req.out, &json)?;
    let rcfg = scene::reference_render_config(sampling);
    for &i in &views {
        let cam = match req.res {
            Some(r) => distill_camera(&cameras[i], r),
            None => cameras[i].clone(),
        };
        let rays = make_rays(&cam, near, far).map_err(usage)?;
        let samples = render::render_rays(&grid, &rays, &rcfg).map_err(usage)?;
        let out = RenderOutput::from_samples(cam.width, cam.height, &samples);
        let file = |kind: &str, ext: &str| req.out.join(format!("{kind}_view_{i:03}.{ext}"));
        let encoded = out.normal_encoded();
        let writes = [
            out.color.write_pfm(&file("color", "pfm")),
            out.color.write_png(&file("color", "png")),
            out.depth.write_pfm(&file("depth", "pfm")),
            out.normal.write_pfm(&file("normal", "pfm")),
            encoded.write_png(&file("normal", "png")),
        ];
        for w in writes {
            w.map_err(usage)?;
        }
        println!("view {i:03}: {}x{}", cam.width, cam.height);
    }
    Ok(())
}

pub fn bench(suite: Suite, config: &Path, out: Option<PathBuf>, seed: Option<u64>, dry_run: bool) -> Result<(), Failure> {
    let cfg = load_config(config, seed)?;
    if dry_run {
        print!("{}", cfg.to_json());
        return Ok(());
    }
    let dir = out.unwrap_or_else(|| output_root(&cfg).join(suite.name()));
    start_output(&dir, &cfg.to_json())?;
    let outcome = bench::run_suite(suite, &cfg, || ExperimentData::resolve(&cfg), &dir).map_err(from_bench)?;
    for line in &outcome.lines {
        println!("{line}");
    }
    println!("reports written to {}", dir.display());
    if outcome.passed {
        Ok(())
    } else {
        let failing: Vec<&str> = outcome.lines.iter().filter(|l| l.starts_with("FAIL")).map(String::as_str).collect();
        Err(Failure::Assertion(format!("suite {suite} failed:\n{}", failing.join("\n"))))
    }
}
