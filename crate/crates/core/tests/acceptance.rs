//! Acceptance run: one pass/fail line per criterion, exit status 1 if any fails.
//!
//! Artifacts land in `$CARGO_TARGET_TMPDIR/acceptance/`. The training
//! criteria use `configs/canonical.json` and take roughly half an hour on a
//! single core.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use distill_lab::bench::checks::{
    GRADCHECK_NORMAL_TOL, GRADCHECK_TOL, IDENTITY_TOL, DENOISER_TOL, SCORE_TOL,
};
use distill_lab::bench::runs::train_and_evaluate;
use distill_lab::bench::variance::default_variance_estimators;
use distill_lab::bench::{self, write_rows, SuiteReport};
use distill_lab::distill::Estimator;
use distill_lab::experiment::{build_problem, ExperimentConfig, ExperimentData};

const UNMASKED_PSNR_MIN: f64 = 30.0;
const MASKED_GAIN_MIN: f64 = 5.0;

struct Line {
    criterion: u8,
    title: &'static str,
    passed: bool,
    detail: String,
}

fn report(lines: &mut Vec<Line>, criterion: u8, title: &'static str, passed: bool, detail: String) {
    println!("criterion {criterion} ({title}): {} {detail}", if passed { "PASS" } else { "FAIL" });
    lines.push(Line { criterion, title, passed, detail });
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed().as_secs_f64())
}

fn cheap_suites(seed: u64, dir: &Path) -> Vec<(SuiteReport, f64)> {
    let (g, tg) = timed(|| bench::gradcheck_suite(seed, 4).unwrap());
    let (i, ti) = timed(|| bench::identity_audit(seed, 100).unwrap());
    let (p, tp) = timed(|| bench::prior_check(seed, 8).unwrap());
    let (f, tf) = timed(|| bench::render_fuzz(seed, 100_000).unwrap());
    for (r, name) in [(&g, "gradcheck"), (&i, "identities"), (&p, "priors"), (&f, "invariants")] {
        r.write(&dir.join(name)).unwrap();
    }
    vec![(g, tg), (i, ti), (p, tp), (f, tf)]
}

fn variance(seed: u64, dir: &Path) -> (bench::VarianceReport, f64) {
    let (rep, t) = timed(|| {
        bench::variance_study(&default_variance_estimators(), &bench::reference_variance_fixture(), 10_000, seed).unwrap()
    });
    write_rows(&dir.join("variance/results.csv"), &rep.rows).unwrap();
    (rep, t)
}

/// Every regular file under `dir` with its bytes, relative paths sorted.
fn csv_files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn main() {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = fs::remove_dir_all(&root);
    fs::create_dir_all(&root).unwrap();
    let seed = 1;
    let mut lines = Vec::new();

    // 1-4: numerical suites.
    let first = root.join("first");
    let suites = cheap_suites(seed, &first);
    let (g, tg) = &suites[0];
    report(
        &mut lines,
        1,
        "gradient oracle",
        g.passed() && *tg < 60.0,
        format!(
            "color {:.2e} depth {:.2e} (<= {GRADCHECK_TOL:e}), normal {:.2e} (<= {GRADCHECK_NORMAL_TOL:e}), field {:.2e}, loss {:.2e}; {tg:.1} s (< 60)",
            g.worst("render_vjp_color"),
            g.worst("render_vjp_depth"),
            g.worst("render_vjp_normal"),
            g.worst("field_vjp"),
            g.worst("reconstruction_loss"),
        ),
    );
    let (i, ti) = &suites[1];
    report(
        &mut lines,
        2,
        "estimator identities",
        i.passed() && *ti < 10.0,
        format!(
            "A {:.2e} B {:.2e} C {:.2e} (<= {IDENTITY_TOL:e}) over 100 instances; {ti:.2} s (< 10)",
            i.worst("bsd_vs"),
            i.worst("csd_vs"),
            i.worst("cfg_decomposition"),
        ),
    );
    let (p, tp) = &suites[2];
    report(
        &mut lines,
        3,
        "prior correctness",
        p.passed() && *tp < 10.0,
        format!(
            "score {:.2e} (<= {SCORE_TOL:e}), denoiser {:.2e} (<= {DENOISER_TOL:e}) at t in {{0.02, 0.5, 0.98}}; {tp:.2} s (< 10)",
            p.worst("score"),
            p.worst("denoiser"),
        ),
    );
    let (f, tf) = &suites[3];
    let violations: f64 = f.checks.iter().filter(|c| c.check.ends_with("violations") || c.check == "non_finite_outputs").map(|c| c.value).sum();
    report(
        &mut lines,
        4,
        "volume-rendering invariants",
        f.passed() && *tf < 60.0,
        format!("{violations} violations over 100000 rays; {tf:.1} s (< 60)"),
    );

    // 5-6: training on the canonical scene.
    let cfg_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/canonical.json");
    let cfg = ExperimentConfig::load(&cfg_path).unwrap();
    let (data, tdata) = timed(|| ExperimentData::generate(&cfg).unwrap());
    println!("canonical data generated in {tdata:.1} s");
    let problem = build_problem(&data, &cfg).unwrap();

    let mut bsd = cfg.clone();
    bsd.train.estimator = Estimator::Bsd;
    bsd.train.seed = 1;
    let bsd_dir = first.join("bsd_seed1");
    let (run, t5) = timed(|| train_and_evaluate("bsd", &data, &problem, &bsd, Some(&bsd_dir), true).unwrap());
    let init = run.curve[0];
    let fin = run.metrics;
    let gain = fin.psnr_masked - init.psnr_masked;
    write_rows(&bsd_dir.join("eval.csv"), &run.curve).unwrap();
    report(
        &mut lines,
        5,
        "toy inpainting convergence",
        run.status.is_ok() && fin.psnr_unmasked >= UNMASKED_PSNR_MIN && gain >= MASKED_GAIN_MIN && t5 <= 600.0,
        format!(
            "unmasked PSNR {:.2} dB (>= {UNMASKED_PSNR_MIN}), masked PSNR {:.2} -> {:.2} dB (gain {gain:.2} >= {MASKED_GAIN_MIN}) after {} BSD steps; {t5:.0} s (<= 600)",
            fin.psnr_unmasked, init.psnr_masked, fin.psnr_masked, run.iterations,
        ),
    );

    let sweep_dir = first.join("omega3");
    let seeds = [1, 2, 3];
    let (sweep, t6) = timed(|| bench::omega3_sweep(&cfg, &data, &[-2.0, 0.0, 2.0], &seeds, Some(&sweep_dir)).unwrap());
    let m = |v: f64| sweep.mean_mse(v).unwrap_or(f64::NAN);
    report(
        &mut lines,
        6,
        "omega3 sweep trend",
        sweep.rows.iter().all(|r| r.status == "ok") && sweep.zero_is_best(&[-2.0, 2.0]) && t6 <= 1800.0,
        format!(
            "mean masked MSE over seeds {{1,2,3}}: omega3=-2 {:.5}, 0 {:.5}, +2 {:.5}; {t6:.0} s (<= 1800)",
            m(-2.0),
            m(0.0),
            m(2.0)
        ),
    );

    // 7: estimator variance.
    let (var, t7) = variance(seed, &first);
    let ratio = var.row("bsd").and_then(|r| r.variance_ratio_vs_sds);
    let sds = &var.rows[0];
    let bsd_row = var.row("bsd").unwrap();
    report(
        &mut lines,
        7,
        "variance claim",
        ratio.is_some_and(|r| r < 1.0) && t7 < 60.0,
        format!(
            "M=10000: BSD mean variance {:.5} vs {} {:.5}, ratio {:.4}; {t7:.1} s (< 60)",
            bsd_row.mean_variance,
            sds.estimator,
            sds.mean_variance,
            ratio.unwrap_or(f64::NAN)
        ),
    );

    // 8: rerun and compare bytes.
    let second = root.join("second");
    cheap_suites(seed, &second);
    variance(seed, &second);
    let rerun = bench::omega3_sweep(&cfg, &data, &[0.0, 2.0], &[1], Some(&second.join("omega3"))).unwrap();
    let mut mismatches = Vec::new();
    let firsts: Vec<_> = csv_files(&first).into_iter().filter(|(p, _)| !p.starts_with("omega3") && !p.starts_with("bsd_seed1")).collect();
    let seconds: Vec<_> = csv_files(&second).into_iter().filter(|(p, _)| !p.starts_with("omega3")).collect();
    if firsts.len() != seconds.len() {
        mismatches.push(format!("{} suite CSVs on the first pass, {} on the second", firsts.len(), seconds.len()));
    }
    for ((path, a), (path_b, b)) in firsts.iter().zip(&seconds) {
        if path != path_b || a != b {
            mismatches.push(path.display().to_string());
        }
    }
    for run in ["omega3_+0_seed1", "omega3_+2_seed1"] {
        let rel = Path::new("runs").join(run).join("metrics.csv");
        if fs::read(sweep_dir.join(&rel)).ok() != fs::read(second.join("omega3").join(&rel)).ok() {
            mismatches.push(format!("omega3/{}", rel.display()));
        }
    }
    for row in &rerun.rows {
        if !sweep.rows.contains(row) {
            mismatches.push(format!("omega3 row {} seed {}", row.omega3, row.seed));
        }
    }
    // Generalized CSD at omega3 = 0 retraces BSD step for step.
    if fs::read(bsd_dir.join("metrics.csv")).ok() != fs::read(sweep_dir.join("runs/omega3_+0_seed1/metrics.csv")).ok() {
        mismatches.push("bsd vs omega3=0 step log".into());
    }
    report(
        &mut lines,
        8,
        "determinism",
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!(
                "{} suite CSVs, 2 sweep step logs and {} sweep rows byte-identical on rerun; BSD and omega3=0 step logs identical",
                seconds.len(),
                rerun.rows.len()
            )
        } else {
            format!("mismatched: {}", mismatches.join(", "))
        },
    );

    println!("\nartifacts: {}", root.display());
    let failed: Vec<String> =
        lines.iter().filter(|l| !l.passed).map(|l| format!("{} ({}): {}", l.criterion, l.title, l.detail)).collect();
    if failed.is_empty() {
        println!("all 8 criteria passed");
    } else {
        println!("{} of 8 criteria failed", failed.len());
        std::process::exit(1);
    }
}
