use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_circuitdup");

const TINY_MODEL: &str = r#"{"num_layers": 3, "hidden_dim": 16, "num_heads": 2, "mlp_hidden_dim": 32,
  "patch_size": 8, "image_side": 16, "num_register_tokens": 1}"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_config_field_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"pca_out_dimm": 4}"#).unwrap();
    let o = run(&["run", "--config", s(&cfg)]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bad_circuit_flag_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["run", "--dataset", s(dir.path()), "--circuits", "5-2"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_dataset_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["run", "--dataset", s(&dir.path().join("nope")), "--output", s(&dir.path().join("out"))]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn parity_pass_is_0_and_mismatch_is_4() {
    let dir = tempfile::tempdir().unwrap();
    let mc = dir.path().join("model.json");
    fs::write(&mc, TINY_MODEL).unwrap();
    let (m0, b0, m1) = (dir.path().join("m0.st"), dir.path().join("b0.st"), dir.path().join("m1.st"));
    for (seed, model, bundle) in [("0", &m0, Some(&b0)), ("1", &m1, None)] {
        let mut args = vec!["synth-model", "--out", s(model), "--model-config", s(&mc), "--seed", seed];
        if let Some(b) = bundle {
            args.extend(["--bundle", s(b)]);
        }
        let o = run(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(code(&run(&["verify-weights", s(&m0), s(&b0), "--model-config", s(&mc)])), 0);
    assert_eq!(code(&run(&["verify-weights", s(&m1), s(&b0), "--model-config", s(&mc)])), 4);
    // Corrupt container is a data error, not a parity failure.
    fs::write(&m1, b"not a container").unwrap();
    assert_eq!(code(&run(&["verify-weights", s(&m1), s(&b0), "--model-config", s(&mc)])), 3);
}

#[test]
fn synth_then_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = run(&["synth", s(&data), "--classes", "3", "--train", "5", "--test", "2", "--side", "16"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mc = dir.path().join("model.json");
    fs::write(&mc, TINY_MODEL).unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"preprocess": {"resize_side": 16}, "pca_out_dim": 4}"#).unwrap();
    let out = dir.path().join("out");
    let o = run(&[
        "run", "-c", s(&cfg), "--manifest", s(&data.join("manifest.csv")), "--dataset", s(&data),
        "--model-config", s(&mc), "--output", s(&out), "--circuits", "0-1,1-2", "--budgets", "1,50%",
        "--repeats", "0",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in circuitdup_core::evalsel::ARTIFACT_FILES {
        assert!(out.join(f).is_file(), "{f} missing");
    }
}
