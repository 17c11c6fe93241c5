use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use distill_lab::experiment::ExperimentConfig;
use distill_lab::image::Image;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_distill-lab"));
    c.env_remove("DISTILL_LAB_THREADS").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

/// A smoke config and a dataset generated from it.
fn smoke_dataset(tmp: &Path) -> (PathBuf, PathBuf) {
    let cfg = write_config(tmp, "smoke.json", &ExperimentConfig::smoke());
    let data = tmp.join("data");
    let o = run(&["genscene", "--config", p(&cfg), "--out", p(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut with_data = ExperimentConfig::smoke();
    with_data.dataset = Some(data.clone());
    (write_config(tmp, "smoke_data.json", &with_data), data)
}

#[test]
fn missing_scene_exits_2_naming_the_field() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("empty.json");
    fs::write(&cfg, "{\"name\": \"x\"}").unwrap();
    let o = run(&["genscene", "--config", p(&cfg), "--out", p(&tmp.path().join("out"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("scene"), "{}", stderr(&o));
}

#[test]
fn unknown_keys_report_their_path() {
    let tmp = TempDir::new().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::smoke().to_json()).unwrap();
    v["train"]["learning_rat"] = 0.1.into();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, v.to_string()).unwrap();
    let o = run(&["train", "--config", p(&cfg), "--dry-run"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train") && stderr(&o).contains("learning_rat"), "{}", stderr(&o));
}

#[test]
fn dry_run_prints_the_resolved_config_and_writes_nothing() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &ExperimentConfig::smoke());
    let out = tmp.path().join("out");
    for sub in ["genscene", "train", "bench"] {
        let mut args = vec![sub];
        if sub == "bench" {
            args.push("identities");
        }
        args.extend(["--config", p(&cfg), "--out", p(&out), "--dry-run", "--seed", "9"]);
        let o = run(&args);
        assert_eq!(code(&o), 0, "{sub}: {}", stderr(&o));
        let printed = ExperimentConfig::from_json(&stdout(&o)).unwrap();
        assert_eq!(printed.seeds, vec![9]);
        assert_eq!(printed.train.seed, 9);
        assert!(!out.exists(), "{sub} wrote output on a dry run");
    }
}

#[test]
fn genscene_writes_config_dataset_and_one_line_per_view() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &ExperimentConfig::smoke());
    let out = tmp.path().join("d");
    let o = run(&["genscene", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("view ")).count(), 4);
    let written = ExperimentConfig::from_json(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(written, ExperimentConfig::smoke());
    for f in ["train/poses.json", "target/images/view_003.pfm", "priors/rgb_view_000.pfm", "full.vxg", "target.vxg"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
}

fn files_equal(a: &Path, b: &Path, names: &[&str]) {
    for n in names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n} differs");
    }
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    let (cfg, _) = smoke_dataset(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let o = run(&["train", "--config", p(&cfg), "--out", p(&a)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["config.json", "metrics.csv", "timing.csv", "eval.csv", "checkpoint/grid.vxg"] {
        assert!(a.join(f).is_file(), "missing {f}");
    }

    let o = run(&["train", "--config", p(&cfg), "--out", p(&b), "--iters", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = b.join("checkpoint");
    let o = run(&["train", "--config", p(&cfg), "--out", p(&b), "--resume", p(&ckpt)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    files_equal(&a, &b, &["metrics.csv", "eval.csv"]);
    files_equal(&a.join("checkpoint"), &b.join("checkpoint"), &["grid.vxg", "moments.bin", "checkpoint.json"]);
}

#[test]
fn non_finite_training_exits_3_and_keeps_a_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let (_, data) = smoke_dataset(tmp.path());
    let mut cfg = ExperimentConfig::smoke();
    cfg.dataset = Some(data);
    cfg.train.learning_rate = 1e300;
    let cfg = write_config(tmp.path(), "blowup.json", &cfg);
    let out = tmp.path().join("t");
    let o = run(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("checkpoint/checkpoint.json")).unwrap()).unwrap();
    assert!(meta["step"].as_u64().unwrap() >= 1);
    assert!(!out.join("eval.csv").exists());
}

#[test]
fn rendering_the_ground_truth_grid_reproduces_the_dataset() {
    let tmp = TempDir::new().unwrap();
    let (_, data) = smoke_dataset(tmp.path());
    let out = tmp.path().join("r");
    let o = run(&[
        "render",
        "--checkpoint",
        p(&data.join("full.vxg")),
        "--poses",
        p(&data.join("train")),
        "--view",
        "0,2",
        "--samples",
        "16",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("config.json").is_file());
    for i in [0, 2] {
        for (ours, theirs) in [("color", "images"), ("depth", "depth"), ("normal", "normals")] {
            let a = Image::read_pfm(&out.join(format!("{ours}_view_{i:03}.pfm"))).unwrap();
            let b = Image::read_pfm(&data.join(format!("train/{theirs}/view_{i:03}.pfm"))).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-6, "{ours} view {i}: {}", a.max_abs_diff(&b));
        }
        assert!(out.join(format!("color_view_{i:03}.png")).is_file());
    }
    assert!(!out.join("color_view_001.pfm").exists());
}

#[test]
fn render_checks_views_resolution_and_checkpoint_version() {
    let tmp = TempDir::new().unwrap();
    let (cfg, data) = smoke_dataset(tmp.path());
    let poses = data.join("train/poses.json");
    let grid = data.join("full.vxg");

    let o = run(&["render", "--checkpoint", p(&grid), "--poses", p(&poses), "--view", "4", "--out", p(&tmp.path().join("x"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("view 4 out of range"), "{}", stderr(&o));

    let out = tmp.path().join("small");
    let o = run(&["render", "--checkpoint", p(&grid), "--poses", p(&poses), "--view", "1", "--res", "6", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let img = Image::read_pfm(&out.join("depth_view_001.pfm")).unwrap();
    assert_eq!(img.shape(), (6, 6, 1));

    let train_out = tmp.path().join("t");
    let o = run(&["train", "--config", p(&cfg), "--out", p(&train_out), "--iters", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = train_out.join("checkpoint");
    let o = run(&["render", "--checkpoint", p(&ckpt), "--poses", p(&poses), "--out", p(&tmp.path().join("c"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let meta = ckpt.join("checkpoint.json");
    let text = fs::read_to_string(&meta).unwrap().replace("\"version\": 1", "\"version\": 99");
    fs::write(&meta, text).unwrap();
    let o = run(&["render", "--checkpoint", p(&ckpt), "--poses", p(&poses), "--out", p(&tmp.path().join("c2"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("version 99"), "{}", stderr(&o));
}

#[test]
fn wide_views_keep_their_aspect_when_downsampled() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = ExperimentConfig::smoke();
    cfg.scene.cameras.width = 16;
    cfg.scene.cameras.height = 8;
    let cfg = write_config(tmp.path(), "wide.json", &cfg);
    let data = tmp.path().join("d");
    assert_eq!(code(&run(&["genscene", "--config", p(&cfg), "--out", p(&data)])), 0);
    let out = tmp.path().join("r");
    let o = run(&[
        "render",
        "--checkpoint",
        p(&data.join("full.vxg")),
        "--poses",
        p(&data.join("train")),
        "--view",
        "0",
        "--res",
        "8",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(Image::read_pfm(&out.join("color_view_000.pfm")).unwrap().shape(), (8, 4, 3));
}

#[test]
fn bench_suites_pass_and_reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &ExperimentConfig::smoke());
    for suite in ["identities", "gradcheck"] {
        let mut reports = Vec::new();
        for k in 0..2 {
            let out = tmp.path().join(format!("{suite}{k}"));
            let o = run(&["bench", suite, "--config", p(&cfg), "--out", p(&out)]);
            assert_eq!(code(&o), 0, "{suite}: {}{}", stdout(&o), stderr(&o));
            assert!(out.join("config.json").is_file());
            reports.push(fs::read(out.join("results.csv")).unwrap());
        }
        assert_eq!(reports[0], reports[1], "{suite}");
    }
}

#[test]
fn failing_bench_exits_1_and_echoes_the_row() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = ExperimentConfig::smoke();
    cfg.bench.identity_instances = 10;
    let cfg = write_config(tmp.path(), "c.json", &cfg);
    let o = run(&["bench", "identities", "--config", p(&cfg), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("FAIL instances_short_by"), "{}", stderr(&o));
}

#[test]
fn unknown_suite_exits_2_listing_valid_suites() {
    let o = run(&["bench", "nope", "--config", "x.json"]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("valid suites") && err.contains("gradcheck") && err.contains("omega3"), "{err}");
}

#[test]
fn thread_override_is_validated() {
    let o = bin().env("DISTILL_LAB_THREADS", "zero").args(["bench", "identities", "--config", "x.json"]).output().unwrap();
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("DISTILL_LAB_THREADS"));
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &ExperimentConfig::smoke());
    let o = bin()
        .env("DISTILL_LAB_THREADS", "1")
        .args(["bench", "identities", "--config", p(&cfg), "--jobs", "4", "--out", p(&tmp.path().join("o"))])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn canonical_genscene_matches_the_committed_checksums() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let manifest = fs::read_to_string(root.join("tests/fixtures/canonical_dataset.sha256")).unwrap();
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("canonical");
    let o = run(&["genscene", "--config", p(&root.join("../../configs/canonical.json")), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("view ")).count(), 20);
    let mut expected = 0;
    for line in manifest.lines() {
        let (hash, name) = line.split_once("  ").expect("sha256sum format");
        let bytes = fs::read(out.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(sha256_hex(&bytes), hash, "{name}");
        expected += 1;
    }
    let mut written = 0;
    let mut stack = vec![out.clone()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                written += 1;
            }
        }
    }
    assert_eq!(written, expected, "unexpected extra files");
}
