use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_disentangle"))
        .args(args)
        .output()
        .expect("spawn disentangle")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_data(dir: &Path) {
    let out = run(&[
        "gen-data", "--seed", "5", "--identities", "12", "--images-per-id", "8",
        "--eval-identities", "40", "--pairs-per-fold", "10", "--out", s(dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(
        &path,
        "[schedule]\nsteps = 12\nn_critic = 1\nbatch_size = 16\nprobe_every = 0\n",
    )
    .unwrap();
    path
}

#[test]
fn gen_data_is_deterministic() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    tiny_data(a.path());
    tiny_data(b.path());
    for f in ["train.bin", "eval.bin", "folds.jsonl"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(a.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "ok");
}

#[test]
fn usage_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("x");
    assert_eq!(code(&run(&["gen-data", "--identities", "1", "--out", s(&out)])), 2);
    assert_eq!(code(&run(&["no-such-command"])), 2);
    assert_eq!(code(&run(&["print-config", "--preset", "huge"])), 2);
    tiny_data(dir.path());
    let ab = run(&["ablate", "--data", s(dir.path()), "--grid", "0,abc", "--out", s(&out)]);
    assert_eq!(code(&ab), 2);
    let tr = run(&["train", "--data", s(dir.path()), "--mode", "pretrained", "--out", s(&out)]);
    assert_eq!(code(&tr), 2);
    assert!(String::from_utf8_lossy(&tr.stderr).contains("pretrained"));
}

#[test]
fn divergent_run_exits_one_and_records_failure() {
    let dir = TempDir::new().unwrap();
    tiny_data(dir.path());
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[optim]\nlr_encoder = 1e12\n[schedule]\nsteps = 200\nn_critic = 1\nbatch_size = 16\nprobe_every = 0\n").unwrap();
    let out = dir.path().join("run");
    let r = run(&["train", "--config", s(&cfg), "--data", s(dir.path()), "--out", s(&out), "--quiet"]);
    assert_eq!(code(&r), 1, "{}", String::from_utf8_lossy(&r.stderr));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "failed");
    assert!(manifest["error"].as_str().unwrap().contains("non-finite"));
}

#[test]
fn train_eval_ablate_pipeline() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    tiny_data(d);
    let cfg = tiny_config(d);
    let run_dir = d.join("run");
    let r = run(&["train", "--config", s(&cfg), "--data", s(d), "--out", s(&run_dir), "--quiet"]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let metrics = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 13);

    let ev_dir = d.join("eval");
    let ck = run_dir.join("checkpoint.json");
    let e = run(&["eval", "--ckpt", s(&ck), "--folds", s(&d.join("folds.jsonl")), "--out", s(&ev_dir)]);
    assert_eq!(code(&e), 0, "{}", String::from_utf8_lossy(&e.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(ev_dir.join("verify_report.json")).unwrap()).unwrap();
    let acc = report["mean_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let leak: serde_json::Value =
        serde_json::from_slice(&fs::read(ev_dir.join("age_leakage.json")).unwrap()).unwrap();
    assert!(leak["age_r2"].as_f64().unwrap() <= 1.0);

    // A file that is not a checkpoint is refused.
    let wrong = d.join("wrong.toml");
    fs::write(&wrong, "[optim]\nlr_encoder = 1.0\n").unwrap();
    let e2 = run(&["eval", "--ckpt", s(&wrong), "--folds", s(&d.join("folds.jsonl")), "--out", s(&ev_dir)]);
    assert_ne!(code(&e2), 0);

    let ab_dir = d.join("ablate");
    let a = run(&["ablate", "--config", s(&cfg), "--data", s(d), "--grid", "0", "--out", s(&ab_dir)]);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    let table = fs::read_to_string(ab_dir.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);
    assert!(ab_dir.join("metrics_lw0.csv").exists());
    // No probe rows were logged, so there is no curve to draw.
    assert!(!ab_dir.join("jsd_curve.svg").exists());
}
