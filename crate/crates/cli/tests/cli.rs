use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn matdiff(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_matdiff"))
        .args(args)
        .current_dir(dir)
        .env("MATDIFF_WORKERS", "2")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

const SMALL_DENOISER: &str = r#"{"denoiser": {"dims":"2d","in_channels":3,"stem_channels":8,
  "block_channels":[8,16],"layers_per_block":1,"mid_channels":16,"groups":4,"norm_eps":1e-5,
  "fourier_features":4,"fourier_scale":2e-3,"time_embed_dim":8,"attention":false,"attention_heads":4}}"#;

fn pipeline(dir: &Path) {
    let run = |args: &[&str]| assert_eq!(code(&matdiff(dir, args)), 0, "{args:?}");
    fs::write(dir.join("train.json"), SMALL_DENOISER).unwrap();
    run(&["gen-catalog", "--seed", "3", "--out", "cat"]);
    run(&["gen-dataset", "--catalog", "cat/catalog.csv", "--samples", "12", "--side", "16", "--seed", "5", "--out", "ds"]);
    run(&["train", "--config", "train.json", "--dataset", "ds", "--steps", "6", "--batch", "4", "--warmup", "2", "--seed", "1", "--out", "tr"]);
    run(&[
        "sample", "--weights", "tr/weights.bin", "--target-k", "120", "--steps", "4", "--count", "2", "--side", "16", "--seed", "9",
        "--out", "s",
    ]);
    run(&["evaluate", "--samples", "s", "--catalog", "cat/catalog.csv", "--target-k", "120", "--repeats", "2", "--out", "ev"]);
}

#[test]
fn pipeline_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    for f in ["cat/catalog.csv", "ds/grids.f32", "ds/manifest.json", "tr/weights.bin", "s/grids.f32", "ev/eval.csv", "ev/summary.json"] {
        let (x, y) = (fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        assert!(!x.is_empty(), "{f} is empty");
        assert_eq!(x, y, "{f} differs between runs");
    }
    let csv = fs::read_to_string(a.path().join("ev/eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    // replaying the resolved config reproduces the samples
    let d = a.path();
    assert_eq!(code(&matdiff(d, &["sample", "--config", "s/config.json", "--out", "s2"])), 0);
    assert_eq!(fs::read(d.join("s/grids.f32")).unwrap(), fs::read(d.join("s2/grids.f32")).unwrap());

    assert_eq!(code(&matdiff(d, &["backproject", "--samples", "s", "--catalog", "cat/catalog.csv", "--out", "bp"])), 0);
    let bp: serde_json::Value = serde_json::from_slice(&fs::read(d.join("bp/backprojection.json")).unwrap()).unwrap();
    assert_eq!(bp.as_array().unwrap().len(), 2);

    assert_eq!(code(&matdiff(d, &["targets", "--dataset", "ds", "--out", "tg"])), 0);
    let t: serde_json::Value = serde_json::from_slice(&fs::read(d.join("tg/targets.json")).unwrap()).unwrap();
    assert_eq!(t["targets"].as_array().unwrap().len(), 5);
}

#[test]
fn gradcheck_reports_agreement() {
    let dir = tempfile::tempdir().unwrap();
    for dims in ["2", "3"] {
        let out = matdiff(dir.path(), &["gradcheck", "--dims", dims, "--shape", "4", "--out", dims]);
        assert_eq!(code(&out), 0);
        let r: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join(dims).join("gradcheck.json")).unwrap()).unwrap();
        assert_eq!(r["passed"], true);
        assert!(r["max_relative_error"].as_f64().unwrap() <= 1e-4);
        assert!(dir.path().join(dims).join("config.json").exists());
    }
}

#[test]
fn usage_and_validation_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&matdiff(d, &["sample", "--count", "0", "--target-k", "50", "--weights", "w", "--out", "o"])), 1);
    assert_eq!(code(&matdiff(d, &["frobnicate"])), 1);
    assert_eq!(code(&matdiff(d, &["gradcheck", "--no-such-flag", "--out", "o"])), 1);
    assert_eq!(code(&matdiff(d, &["gen-dataset", "--out", "o"])), 1);
    assert_eq!(code(&matdiff(d, &["gradcheck", "--dims", "4", "--out", "o"])), 1);
    assert_eq!(code(&matdiff(d, &["--help"])), 0);

    fs::write(d.join("bad.json"), r#"{"seed": 1, "colour": "red"}"#).unwrap();
    assert_eq!(code(&matdiff(d, &["gen-catalog", "--config", "bad.json", "--out", "o"])), 2);
    assert_eq!(code(&matdiff(d, &["gen-dataset", "--catalog", "missing.csv", "--out", "o"])), 2);
}

#[test]
fn flags_override_config_values() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.json"), r#"{"seed": 11, "count": 40}"#).unwrap();
    assert_eq!(code(&matdiff(d, &["gen-catalog", "--config", "c.json", "--count", "30", "--out", "o"])), 0);
    let cfg: serde_json::Value = serde_json::from_slice(&fs::read(d.join("o/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 11);
    assert_eq!(cfg["count"], 30);
    let rows = fs::read_to_string(d.join("o/catalog.csv")).unwrap().lines().count();
    assert_eq!(rows, 31);
}

#[test]
fn bounds_check_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = matdiff(dir.path(), &["bounds-check", "--dims", "2", "--side", "16", "--samples", "10", "--out", "b"]);
    assert!(matches!(code(&out), 0 | 3));
    let r: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("b/bounds.json")).unwrap()).unwrap();
    assert_eq!(r["samples"], 10);
}
