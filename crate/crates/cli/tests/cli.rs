use std::path::Path;
use std::process::{Command, Output};

use dcsau_core::data::netpbm;
use tempfile::TempDir;

fn dcsau(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcsau"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn total_params(out: &Output) -> u64 {
    let text = stdout(out);
    let line = text.lines().find(|l| l.starts_with("total")).expect("totals line");
    line.split_whitespace().nth(1).unwrap().parse().unwrap()
}

/// Small synthetic run in `dir/name`; returns that directory as a string.
fn small_run(dir: &TempDir, name: &str, extra: &[&str]) -> String {
    let out = dir.path().join(name);
    let out = out.to_str().unwrap();
    let mut args = vec![
        "train", "--synthetic", "4", "--size", "32", "--widths", "8,16", "--batch-size", "2", "--out", out,
    ];
    args.extend_from_slice(extra);
    let run = dcsau(&args);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    out.to_owned()
}

#[test]
fn summary_reports_calibrated_totals() {
    let out = dcsau(&["summary", "--variant", "dcsau", "--input", "3x256x256"]);
    assert_eq!(code(&out), 0);
    let params = total_params(&out);
    assert!((params as f64 / 2.60e6 - 1.0).abs() <= 0.08, "{params}");
    let last = stdout(&out).lines().last().unwrap().to_owned();
    assert!(last.starts_with("params 2.6") && last.contains("GMacs"), "{last}");

    let wide = dcsau(&["summary", "--variant", "dcsau", "--pfc-kernel", "9", "--input", "3x256x256"]);
    assert!(total_params(&wide) > params);
}

#[test]
fn summary_is_deterministic_and_writes_json() {
    let dir = TempDir::new().unwrap();
    let json = dir.path().join("cost.json");
    let a = dcsau(&["summary", "--json", json.to_str().unwrap()]);
    let b = dcsau(&["summary"]);
    assert_eq!(a.stdout, b.stdout);
    let parsed: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(parsed["total_params"].as_u64(), Some(total_params(&a)));
}

#[test]
fn config_errors_exit_2() {
    let odd = dcsau(&["summary", "--input", "3x100x100"]);
    assert_eq!(code(&odd), 2);
    assert!(stderr(&odd).contains("divisible by 16"), "{}", stderr(&odd));

    let field = dcsau(&["summary", "--set", "depth=3"]);
    assert_eq!(code(&field), 2);
    assert!(stderr(&field).contains("depth"));

    let even = dcsau(&["summary", "--pfc-kernel", "4"]);
    assert_eq!(code(&even), 2);
    assert_eq!(code(&dcsau(&["summary", "--no-such-flag"])), 2);
    assert_eq!(code(&dcsau(&["summary", "--variant", "resnet"])), 2);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("model.json");
    std::fs::write(&path, r#"{"variant": "unet", "stage_widths": [8, 16, 32]}"#).unwrap();
    let path = path.to_str().unwrap();
    let base = dcsau(&["summary", "--config", path, "--input", "3x32x32"]);
    assert_eq!(code(&base), 0);
    assert!(stdout(&base).starts_with("variant unet  widths [8,16,32]"));
    let wider = dcsau(&["summary", "--config", path, "--widths", "8,16,48", "--input", "3x32x32"]);
    assert!(total_params(&wider) > total_params(&base));
}

#[test]
fn zero_epochs_leave_an_empty_log() {
    let dir = TempDir::new().unwrap();
    let out = small_run(&dir, "run", &["--epochs", "0"]);
    let out = Path::new(&out);
    assert_eq!(std::fs::read(out.join("log.jsonl")).unwrap().len(), 0);
    for f in ["best.ckpt", "final.ckpt", "config.json", "synthetic/manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read(out.join("best.ckpt")).unwrap(), std::fs::read(out.join("final.ckpt")).unwrap());
}

#[test]
fn training_and_eval_are_reproducible() {
    let dir = TempDir::new().unwrap();
    let a = small_run(&dir, "a", &["--epochs", "2", "--augment"]);
    let b = small_run(&dir, "b", &["--epochs", "2", "--augment"]);
    for f in ["best.ckpt", "final.ckpt"] {
        let read = |d: &str| std::fs::read(Path::new(d).join(f)).unwrap();
        assert_eq!(read(&a), read(&b), "{f}");
    }
    let log = std::fs::read_to_string(Path::new(&a).join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let ckpt = format!("{a}/final.ckpt");
    let manifest = format!("{a}/synthetic/manifest.json");
    let first = dcsau(&["eval", "--checkpoint", &ckpt, "--manifest", &manifest]);
    let report = std::fs::read(Path::new(&a).join("eval.json")).unwrap();
    let second = dcsau(&["eval", "--checkpoint", &ckpt, "--manifest", &manifest]);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(report, std::fs::read(Path::new(&a).join("eval.json")).unwrap());
    assert!(stdout(&first).contains('±'));
}

#[test]
fn eval_errors_map_to_exit_codes() {
    let dir = TempDir::new().unwrap();
    let run = small_run(&dir, "run", &["--epochs", "0"]);
    let ckpt = format!("{run}/best.ckpt");
    let manifest = format!("{run}/synthetic/manifest.json");

    let empty = dir.path().join("empty.json");
    std::fs::write(&empty, r#"{"samples": []}"#).unwrap();
    let out = dcsau(&["eval", "--checkpoint", &ckpt, "--manifest", empty.to_str().unwrap()]);
    assert_eq!(code(&out), 3);

    let missing = dcsau(&["eval", "--checkpoint", &ckpt, "--manifest", "/definitely/not/here.json"]);
    assert_eq!(code(&missing), 3);

    let mismatch = dcsau(&["eval", "--checkpoint", &ckpt, "--manifest", &manifest, "--widths", "8,24"]);
    assert_eq!(code(&mismatch), 2);
    assert!(stderr(&mismatch).contains("encoder.stage1"), "{}", stderr(&mismatch));
}

#[test]
fn predict_writes_masks_and_reports_bad_files() {
    let dir = TempDir::new().unwrap();
    let run = small_run(&dir, "run", &["--epochs", "1"]);
    let ckpt = format!("{run}/final.ckpt");
    let image = format!("{run}/synthetic/images/synth_0001.ppm");
    let bad = dir.path().join("bad.ppm");
    std::fs::write(&bad, b"P6\n4 4\n255\nxx").unwrap();
    let out_dir = dir.path().join("masks");
    let out = out_dir.to_str().unwrap();

    let first = dcsau(&["predict", "--checkpoint", &ckpt, "--out", out, "--size", "48", &image, bad.to_str().unwrap()]);
    assert_eq!(code(&first), 3);
    assert!(stderr(&first).contains("bad.ppm"));
    let mask_path = out_dir.join("synth_0001.pgm");
    let mask = netpbm::load_pgm(&mask_path).unwrap();
    assert_eq!((mask.shape().h, mask.shape().w), (48, 48));
    assert!(mask.data().iter().all(|&v| v == 0 || v == 255));

    let bytes = std::fs::read(&mask_path).unwrap();
    let again = dcsau(&["predict", "--checkpoint", &ckpt, "--out", out, "--size", "48", &image]);
    assert_eq!(code(&again), 0);
    assert_eq!(bytes, std::fs::read(&mask_path).unwrap());
}

#[test]
fn multiclass_masks_hold_class_indices() {
    let dir = TempDir::new().unwrap();
    let run = small_run(&dir, "run", &["--epochs", "1", "--classes", "3"]);
    let out_dir = dir.path().join("masks");
    let out = dcsau(&[
        "predict",
        "--checkpoint",
        &format!("{run}/final.ckpt"),
        "--out",
        out_dir.to_str().unwrap(),
        &format!("{run}/synthetic/images/synth_0000.ppm"),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mask = netpbm::load_pgm(&out_dir.join("synth_0000.pgm")).unwrap();
    assert!(mask.data().iter().all(|&v| v < 3));
}

#[test]
fn manifest_training_writes_splits() {
    let dir = TempDir::new().unwrap();
    let data = small_run(&dir, "data", &["--epochs", "0"]);
    let out = dir.path().join("run");
    let run = dcsau(&[
        "train",
        "--manifest",
        &format!("{data}/synthetic/manifest.json"),
        "--size",
        "32",
        "--widths",
        "8,16",
        "--batch-size",
        "2",
        "--epochs",
        "0",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let count = |f: &str| std::fs::read_to_string(out.join("split").join(f)).unwrap().lines().count();
    assert_eq!(count("train.txt") + count("valid.txt") + count("test.txt"), 4);
}

#[test]
fn unreadable_dataset_exits_3() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let run = dcsau(&["train", "--manifest", "/no/manifest.json", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&run), 3);
}

#[test]
fn selftest_flags_the_injected_fault() {
    let out = dcsau(&["selftest", "--seeds", "1", "--inject-fault", "conv-sign"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("conv2d oracle"), "{}", stderr(&out));
}

#[test]
fn selftest_passes() {
    let out = dcsau(&["selftest", "--seeds", "1"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
}

#[test]
fn help_documents_every_flag() {
    for sub in ["summary", "train", "eval", "predict", "selftest"] {
        let help = stdout(&dcsau(&[sub, "-h"]));
        for line in help.lines().filter(|l| l.trim_start().starts_with("--")) {
            let doc = line.trim_start().split_once("  ").map(|x| x.1).unwrap_or("").trim();
            assert!(!doc.is_empty(), "{sub}: {line}");
        }
    }
}

#[test]
fn divergence_exits_4() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let run = dcsau(&[
        "train", "--synthetic", "4", "--size", "32", "--widths", "8,16", "--batch-size", "2", "--epochs", "3", "--lr",
        "1e30", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 4);
    assert!(stderr(&run).contains("diverged"), "{}", stderr(&run));
}
