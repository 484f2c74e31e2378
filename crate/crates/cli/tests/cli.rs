use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
    "steps": 3, "warmup_steps": 1, "checkpoint_every": 0,
    "hierarchy": {"level_shape": [[24,24,24],[12,12,12],[8,8,8]], "grid": [6,4,4], "token_resize": [4,4,4]},
    "network": {"base_channels": 4, "embed_dim": 16, "depth": 1, "heads": 2, "decoder_dim": 8,
                "decoder_depth": 1, "decoder_heads": 2, "recon_dim": 64, "proj_dim": 8,
                "token_resize": [4,4,4]}
}"#;

fn mim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Temp dir holding a tiny config and four 24³ volumes.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    let data = dir.path().join("data");
    let o = mim(&["gen-data", "--out", s(&data), "--count", "4", "--size", "24", "--seed", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir
}

#[test]
fn gen_data_writes_headers_payloads_and_labels() {
    let dir = workspace();
    let data = dir.path().join("data");
    for i in 0..4 {
        for ext in ["json", "raw", "labels.raw"] {
            assert!(data.join(format!("vol_{i:04}.{ext}")).exists());
        }
    }
    let raw = fs::metadata(data.join("vol_0000.raw")).unwrap().len();
    assert_eq!(raw, 24 * 24 * 24 * 4);
}

#[test]
fn plan_dump_is_deterministic() {
    let dir = workspace();
    let cfg = dir.path().join("tiny.json");
    let vol = dir.path().join("data/vol_0000");
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for out in [&a, &b] {
        let o = mim(&["plan", "--config", s(&cfg), "--volume", s(&vol), "--dump", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let plan: serde_json::Value = serde_json::from_slice(&fs::read(&a).unwrap()).unwrap();
    assert_eq!(plan["entries"].as_array().unwrap().len(), 7);
}

#[test]
fn pretrain_echoes_a_reproducible_config() {
    let dir = workspace();
    let data = dir.path().join("data");
    let cfg = dir.path().join("tiny.json");
    let a = dir.path().join("a");
    let o = mim(&["pretrain", "--config", s(&cfg), "--data", s(&data), "--out", s(&a)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    assert!(a.join("final.ckpt").exists());
    assert!(a.join("level_weights.csv").exists());

    let effective = a.join("effective_config.json");
    let b = dir.path().join("b");
    let o = mim(&["pretrain", "--config", s(&effective), "--data", s(&data), "--out", s(&b)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(metrics, fs::read_to_string(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(&effective).unwrap(), fs::read(b.join("effective_config.json")).unwrap());
}

#[test]
fn pretrain_resume_takes_the_checkpoint_config() {
    let dir = workspace();
    let data = dir.path().join("data");
    let cfg = dir.path().join("tiny.json");
    let a = dir.path().join("a");
    assert!(mim(&["pretrain", "--config", s(&cfg), "--data", s(&data), "--out", s(&a)]).status.success());
    let ck = a.join("final.ckpt");
    let b = dir.path().join("b");
    let o = mim(&["pretrain", "--data", s(&data), "--out", s(&b), "--resume", s(&ck)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(b.join("metrics.csv")).unwrap().lines().count(), 1);
}

#[test]
fn missing_data_dir_is_a_runtime_failure_naming_the_path() {
    let dir = workspace();
    let cfg = dir.path().join("tiny.json");
    let missing = dir.path().join("nowhere");
    let o = mim(&["pretrain", "--config", s(&cfg), "--data", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains(s(&missing)), "{err}");
    assert_eq!(err.trim().lines().count(), 1);
}

#[test]
fn usage_and_config_errors_exit_two() {
    let dir = workspace();
    assert_eq!(mim(&["--bogus"]).status.code(), Some(2));
    assert_eq!(mim(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(mim(&["grad-check", "--bogus"]).status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"stepz": 3}"#).unwrap();
    let data = dir.path().join("data");
    let o = mim(&["pretrain", "--config", s(&bad), "--data", s(&data), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    fs::write(&bad, "{not json").unwrap();
    let o = mim(&["pretrain", "--config", s(&bad), "--data", s(&data), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_mim"))
        .args(["grad-check"])
        .env("MIM_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn grad_check_passes_every_op() {
    let o = Command::new(env!("CARGO_BIN_EXE_mim"))
        .args(["grad-check", "--tol", "1e-3"])
        .env("MIM_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.lines().count() > 20);
    assert!(out.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn probe_and_recon_write_their_artifacts() {
    let dir = workspace();
    let data = dir.path().join("data");
    let cfg = dir.path().join("tiny.json");
    let a = dir.path().join("a");
    assert!(mim(&["pretrain", "--config", s(&cfg), "--data", s(&data), "--out", s(&a)]).status.success());
    let ck = a.join("final.ckpt");

    let o = mim(&["probe", "--ckpt", s(&ck), "--data", s(&data), "--seeds", "3,4", "--steps", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(a.join("probe.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "seed,init,dsc");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("3,pretrained,"));
    assert!(lines[2].starts_with("3,random,"));

    let out = dir.path().join("recon");
    let vol = data.join("vol_0001");
    let o = mim(&["recon", "--ckpt", s(&ck), "--volume", s(&vol), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["orig.pgm", "masked.pgm", "recon.pgm"] {
        assert!(fs::read(out.join(f)).unwrap().starts_with(b"P5\n24 24\n255\n"));
    }
}
