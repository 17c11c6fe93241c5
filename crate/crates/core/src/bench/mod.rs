//! Experiment harness: numerical checks, identity audits, the omega3 sweep,
//! estimator variance studies and end-to-end estimator comparisons.
//!
//! Every suite is a pure function of its inputs and seeds. Reports are CSV
//! files written with the shortest round-trip float formatting, so reruns
//! are byte-identical. Column layouts are documented in
//! `schema/report_columns.json`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::experiment::DataError;
use crate::image::ImageError;
use crate::prior::PriorError;
use crate::render::RenderError;
use crate::trainer::TrainError;

pub mod checks;
pub mod oracle;
pub mod runs;
pub mod variance;

pub use checks::{gradcheck_suite, identity_audit, prior_check, render_fuzz};
pub use runs::{estimator_compare, omega3_sweep, CompareReport, RunResult, RunStatus, SweepResult, SweepRow};
pub use variance::{reference_variance_fixture, variance_study, VarianceFixture, VarianceReport, VarianceRow};

/// The committed description of every report's columns.
pub const REPORT_COLUMNS: &str = include_str!("../../../../schema/report_columns.json");

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{0}")]
    Invalid(String),
}

/// Suites reachable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Suite {
    Gradcheck,
    Identities,
    Priors,
    Invariants,
    Variance,
    Omega3,
    Compare,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::Gradcheck,
        Suite::Identities,
        Suite::Priors,
        Suite::Invariants,
        Suite::Variance,
        Suite::Omega3,
        Suite::Compare,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Gradcheck => "gradcheck",
            Suite::Identities => "identities",
            Suite::Priors => "priors",
            Suite::Invariants => "invariants",
            Suite::Variance => "variance",
            Suite::Omega3 => "omega3",
            Suite::Compare => "compare",
        }
    }

    pub fn names() -> String {
        Suite::ALL.map(Suite::name).join(", ")
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown suite {s:?}; valid suites: {}", Suite::names()))
    }
}

/// One measured quantity compared against a threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub suite: String,
    pub check: String,
    pub value: f64,
    /// Inclusive upper bound on `value`.
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    /// Passes when `value <= threshold` (NaN fails).
    pub fn at_most(suite: &str, check: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self { suite: suite.into(), check: check.into(), value, threshold, passed: value <= threshold }
    }
}

/// Outcome of a pass/fail suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    /// Largest value among checks whose name starts with `prefix`.
    pub fn worst(&self, prefix: &str) -> f64 {
        self.checks.iter().filter(|c| c.check.starts_with(prefix)).fold(0.0, |m, c| m.max(c.value))
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, BenchError> {
        write_rows(&dir.join("results.csv"), &self.checks)
    }
}

/// Result of [`run_suite`]: whether every assertion held, plus one
/// human-readable line per measured quantity (failures prefixed `FAIL`).
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOutcome {
    pub suite: Suite,
    pub passed: bool,
    pub lines: Vec<String>,
}

impl SuiteOutcome {
    fn push(&mut self, ok: bool, line: String) {
        self.passed &= ok;
        self.lines.push(if ok { line } else { format!("FAIL {line}") });
    }

    fn from_checks(report: &SuiteReport) -> Self {
        let mut out = SuiteOutcome { suite: report.suite, passed: true, lines: Vec::new() };
        for c in &report.checks {
            out.push(c.passed, format!("{}: {:e} (threshold {:e})", c.check, c.value, c.threshold));
        }
        out
    }
}

/// Relative slack allowed between sampled and closed-form variances.
pub const VARIANCE_CLOSED_FORM_RTOL: f64 = 0.05;

/// Run a suite with the settings in `cfg` (first seed for the seeded
/// numerical suites, all seeds for the training suites) and write its
/// reports into `out`. `data` is only called by the training suites.
pub fn run_suite(
    suite: Suite,
    cfg: &crate::experiment::ExperimentConfig,
    data: impl FnOnce() -> Result<crate::experiment::ExperimentData, DataError>,
    out: &Path,
) -> Result<SuiteOutcome, BenchError> {
    let seed = cfg.seeds[0];
    let b = &cfg.bench;
    let report = match suite {
        Suite::Gradcheck => Some(gradcheck_suite(seed, b.gradcheck_trials)?),
        Suite::Identities => Some(identity_audit(seed, b.identity_instances)?),
        Suite::Priors => Some(prior_check(seed, 8)?),
        Suite::Invariants => Some(render_fuzz(seed, 100_000)?),
        _ => None,
    };
    if let Some(r) = report {
        r.write(out)?;
        return Ok(SuiteOutcome::from_checks(&r));
    }
    let mut outcome = SuiteOutcome { suite, passed: true, lines: Vec::new() };
    match suite {
        Suite::Variance => {
            let fixture = reference_variance_fixture();
            let rep = variance_study(&variance::default_variance_estimators(), &fixture, b.variance_draws, seed)?;
            write_rows(&out.join("results.csv"), &rep.rows)?;
            for r in &rep.rows {
                let ratio = r.variance_ratio_vs_sds.map_or("n/a".to_string(), |v| format!("{v:.4}"));
                let mut ok = true;
                if let Some(cf) = r.closed_form_variance {
                    ok = (r.mean_variance - cf).abs() <= VARIANCE_CLOSED_FORM_RTOL * cf.max(f64::MIN_POSITIVE);
                }
                if r.estimator == "bsd" {
                    ok &= r.variance_ratio_vs_sds.is_some_and(|v| v < 1.0);
                }
                outcome.push(
                    ok,
                    format!("{}: mean variance {:.6}, ratio vs sds {ratio}, closed form {:?}", r.estimator, r.mean_variance, r.closed_form_variance),
                );
            }
            let mut at_zero = fixture.clone();
            at_zero.t_range = (0.0, 0.0);
            let specs = [variance::EstimatorSpec::new(crate::distill::Estimator::Bsd, crate::distill::DistillWeights::appearance())];
            let rep = variance_study(&specs, &at_zero, 1000, seed)?;
            write_rows(&out.join("t_zero.csv"), &rep.rows)?;
            outcome.push(rep.rows[0].mean_variance == 0.0, format!("bsd at t = 0: variance {}", rep.rows[0].mean_variance));
        }
        Suite::Omega3 => {
            let data = data()?;
            let sweep = omega3_sweep(cfg, &data, &b.omega3_values, &cfg.seeds, Some(out))?;
            for r in &sweep.rows {
                outcome.push(r.status == "ok", format!("omega3 {} seed {}: mse_masked {:.6} ({})", r.omega3, r.seed, r.mse_masked, r.status));
            }
            let lo = b.omega3_values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = b.omega3_values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ends: Vec<f64> = [lo, hi].into_iter().filter(|v| *v != 0.0).collect();
            let fmt = |v: f64| sweep.mean_mse(v).map_or("n/a".into(), |m| format!("{m:.6}"));
            outcome.push(
                sweep.zero_is_best(&ends),
                format!("mean mse_masked at 0: {}; at {lo}: {}; at {hi}: {}", fmt(0.0), fmt(lo), fmt(hi)),
            );
        }
        Suite::Compare => {
            use crate::distill::Estimator;
            let data = data()?;
            let rep = estimator_compare(cfg, &data, &b.compare_estimators, &cfg.seeds, Some(out))?;
            for r in &rep.rows {
                outcome.push(r.status == "ok", format!("{} seed {}: psnr_masked {:.3} ({})", r.estimator, r.seed, r.psnr_masked, r.status));
            }
            if let (Some(bsd), Some(sds)) = (rep.mean_psnr_masked(Estimator::Bsd), rep.mean_psnr_masked(Estimator::Sds)) {
                outcome.push(bsd >= sds, format!("mean psnr_masked bsd {bsd:.3} vs sds {sds:.3}"));
            }
        }
        _ => unreachable!("check suites handled above"),
    }
    Ok(outcome)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io { path: path.to_path_buf(), source }
}

/// Serialize `rows` to a CSV file (header from the row type), creating parent
/// directories. Returns the path written.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<PathBuf, BenchError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let csv_err = |source| BenchError::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(path.to_path_buf())
}

/// Write `text` to `dir/name`, creating `dir`.
pub fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf, BenchError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

/// Mix a suite seed with a trial index into an independent stream seed.
pub(crate) fn trial_seed(seed: u64, trial: u64) -> u64 {
    crate::trainer::derive_seed(seed, trial, 0xbe7c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        let err = "nope".parse::<Suite>().unwrap_err();
        assert!(err.contains("gradcheck") && err.contains("compare"), "{err}");
    }

    #[test]
    fn nan_checks_fail() {
        assert!(!Check::at_most("x", "y", f64::NAN, 1.0).passed);
        assert!(Check::at_most("x", "y", 1.0, 1.0).passed);
    }

    #[test]
    fn report_columns_schema_is_valid_json() {
        let v: serde_json::Value = serde_json::from_str(REPORT_COLUMNS).unwrap();
        assert!(v["files"].is_object());
    }
}
