use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_roadseg"))
}

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

#[test]
fn missing_config_exits_with_2() {
    let out = bin().args(["pretrain", "--config", "/nonexistent/run.toml"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let out = bin().arg("bench").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn finetune_without_checkpoint_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bench = dir.path().join("bench");
    let status = bin()
        .arg("bench")
        .arg("--config")
        .arg(smoke_config())
        .arg("--out")
        .arg(&bench)
        .status()
        .unwrap();
    assert!(status.success());
    let out = bin()
        .arg("finetune")
        .arg("--config")
        .arg(smoke_config())
        .arg("--out")
        .arg(dir.path())
        .arg("--set")
        .arg(format!("registry=\"{}\"", bench.join("registry.toml").display()))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn full_pipeline_on_the_smoke_config() {
    let dir = tempfile::tempdir().unwrap();
    let bench = dir.path().join("bench");
    let common = |cmd: &str| {
        let mut c = bin();
        c.arg(cmd)
            .arg("--config")
            .arg(smoke_config())
            .arg("--out")
            .arg(dir.path())
            .arg("--set")
            .arg(format!("registry=\"{}\"", bench.join("registry.toml").display()));
        c
    };
    assert!(bin()
        .arg("bench")
        .arg("--config")
        .arg(smoke_config())
        .arg("--out")
        .arg(&bench)
        .status()
        .unwrap()
        .success());
    for cmd in ["pretrain", "finetune", "eval"] {
        let out = common(cmd).output().unwrap();
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["pretrain.ckpt", "finetune.ckpt", "pretrain_history.csv", "eval.csv", "eval.txt"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let eval = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert!(eval.starts_with("dataset,split,"));
    assert!(eval.lines().nth(1).unwrap().starts_with("pseudo_target,val,"));

    let conv = dir.path().join("converted");
    let out = common("convert").arg("--out").output();
    // --out is already set; a second one is a usage error
    assert_eq!(out.unwrap().status.code(), Some(2));
    let out = bin()
        .arg("convert")
        .arg("--config")
        .arg(smoke_config())
        .arg("--out")
        .arg(&conv)
        .arg("--set")
        .arg(format!("registry=\"{}\"", bench.join("registry.toml").display()))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(conv.join("registry.toml").exists());
}

#[test]
fn dataset_table_has_seven_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .arg("ablate")
        .arg("--config")
        .arg(smoke_config())
        .arg("--out")
        .arg(dir.path())
        .args(["--set", "ablate.tables=[\"dataset\"]", "--set", "pretrain.steps=10", "--set", "finetune.steps=10"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("table_dataset.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "Pre-training Dataset,Fine-Tuned,mIoU (%),Acc (%)");
    assert_eq!(lines.len(), 8);
    assert!(lines[1].starts_with("Target Only,no,"));
    assert!(lines[7].starts_with("Combined,yes,"));
    assert!(lines[7].contains('('), "delta against the first row");
}
