//! End-to-end runs of the `pha` binary and its exit-code contract.

use std::path::Path;
use std::process::{Command, Output};

use pha::config::RunConfig;
use serde_json::Value;

fn pha(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pha"))
        .args(args)
        .env("PHA_THREADS", "1")
        .output()
        .expect("spawn pha")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_cfg(dir: &Path, name: &str, cfg: &RunConfig) -> String {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p.to_str().unwrap().to_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn init_config_and_param_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ref.json");
    assert_eq!(code(&pha(&["init-config", "--out", s(&out)])), 0);
    let cfg = RunConfig::load(&out).unwrap();
    assert_eq!(cfg, RunConfig::reference());
    let o = pha(&["param-count", "--config", s(&out)]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let want = pha::pha::count_parameters(&cfg.model, cfg.pha.retrieval_dim, cfg.pha.hyper_dim, cfg.tasks.len());
    assert_eq!(v["total"].as_u64().unwrap() as usize, want.total);
}

#[test]
fn verify_tiny_passes_all_three_checks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "tiny.json", &RunConfig::tiny());
    let t = std::time::Instant::now();
    let o = pha(&["verify", "--config", &cfg]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let text = stdout(&o);
    for check in ["gradients", "census", "zero-init"] {
        assert!(text.contains(&format!("PASS {check}")), "{text}");
    }
    assert!(t.elapsed().as_secs() < 60);
}

#[test]
fn verify_with_sequential_adapters() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = RunConfig::tiny();
    c.train.ablations.literal_eq8 = true;
    let cfg = write_cfg(dir.path(), "eq8.json", &c);
    let o = pha(&["verify", "--config", &cfg]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("PASS gradients"));
}

#[test]
fn corrupted_checkpoint_fails_the_census() {
    let dir = tempfile::tempdir().unwrap();
    let c = RunConfig::tiny();
    let cfg = write_cfg(dir.path(), "tiny.json", &c);
    let m = pha::model::PhaModel::new(c.model.clone(), c.pha.clone(), Default::default(), &c.task_names(), 0).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    pha::checkpoint::save_file(&ckpt, &m, None, 0, Some(&c)).unwrap();
    let o = pha(&["verify", "--config", &cfg, "--checkpoint", s(&ckpt)]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));

    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes.truncate(bytes.len() - 100);
    std::fs::write(&ckpt, bytes).unwrap();
    let o = pha(&["verify", "--config", &cfg, "--checkpoint", s(&ckpt)]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL census"), "{}", stdout(&o));
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = RunConfig::tiny();
    c.train.warmup_steps = c.train.total_steps;
    let bad = write_cfg(dir.path(), "bad.json", &c);
    assert_eq!(code(&pha(&["verify", "--config", &bad])), 2);
    assert_eq!(code(&pha(&["train", "--config", &bad, "--out", s(&dir.path().join("o"))])), 2);

    let mut v: Value = serde_json::to_value(RunConfig::tiny()).unwrap();
    v["train"]["learning_rate"] = Value::from(0.1);
    let unknown = dir.path().join("unknown.json");
    std::fs::write(&unknown, v.to_string()).unwrap();
    assert_eq!(code(&pha(&["param-count", "--config", s(&unknown)])), 2);

    let missing = dir.path().join("nope.ckpt");
    let csv = dir.path().join("sim.csv");
    assert_eq!(code(&pha(&["export-similarity", "--checkpoint", s(&missing), "--out", s(&csv)])), 2);
    assert_eq!(code(&pha(&["adapt", "--checkpoint", s(&missing), "--task", "copy"])), 2);
}

/// Train the tiny preset, then adapt and export from its checkpoint.
#[test]
fn tiny_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "tiny.json", &RunConfig::tiny());
    let run = dir.path().join("run");
    let o = pha(&["train", "--config", &cfg, "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.json", "backbone.ckpt", "final.ckpt", "metrics.jsonl", "summary.json", "checkpoints/step_20.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let lines = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let steps = lines
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|v| v.get("l_plm").is_some())
        .count();
    assert_eq!(steps, 20);

    let ckpt = run.join("final.ckpt");
    let adapt_dir = dir.path().join("adapt");
    std::fs::create_dir(&adapt_dir).unwrap();
    let o = pha(&[
        "adapt", "--checkpoint", s(&ckpt), "--task", "cipher_heldout", "--shots", "4", "--out", s(&adapt_dir),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_str(&std::fs::read_to_string(adapt_dir.join("adapt_result.json")).unwrap()).unwrap();
    assert_eq!(r["scores"].as_array().unwrap().len(), 6);
    for k in ["retrieved_task", "accuracy_before", "accuracy_after"] {
        assert!(r.get(k).is_some(), "{k}");
    }
    assert_eq!(code(&pha(&["adapt", "--checkpoint", s(&ckpt), "--task", "no_such_task"])), 2);

    let csv = dir.path().join("sim.csv");
    let emb = dir.path().join("emb.csv");
    let o = pha(&["export-similarity", "--checkpoint", s(&ckpt), "--out", s(&csv), "--examples", "10", "--embeddings", s(&emb)]);
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 7);
    assert!(rows.iter().all(|r| r.split(',').count() == 7), "{text}");
    assert_eq!(std::fs::read_to_string(&emb).unwrap().lines().count(), 61);

    // Reusing the backbone skips pre-training and reproduces the run exactly.
    let again = dir.path().join("again");
    let o = pha(&["train", "--config", &cfg, "--out", s(&again), "--backbone", s(&run.join("backbone.ckpt"))]);
    assert_eq!(code(&o), 0);
    for f in ["metrics.jsonl", "final.ckpt", "checkpoints/step_10.ckpt"] {
        assert_eq!(std::fs::read(run.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap(), "{f}");
    }
}
