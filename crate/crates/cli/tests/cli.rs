use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aikd::models::Checkpoint;

const SMALL: &str = r#"
[model]
architecture = "tiny_cnn"

[train]
epochs = 2
batch_size = 16
lr_milestones = [1]

[data.synthetic]
num_classes = 4
samples_per_class = 12
val_per_class = 6
resolution = 16

[metrics]
n_bins = 10
"#;

fn aikd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aikd")).args(args).env_remove("AIKD_DATA_ROOT").output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn divergence_demo_prints_report() {
    let o = aikd(&["divergence-demo", "--theta", "0.5"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["tv"].as_f64(), Some(1.0));
    assert_eq!(v["kl"].as_str(), Some("inf"));
    assert_eq!(v["wasserstein"].as_f64(), Some(0.5));
    assert!(v["js"].as_f64().unwrap() > 0.0);
}

#[test]
fn invalid_milestones_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nlr_milestones = [225, 150]\n");
    let o = aikd(&["--config", s(&cfg), "--out", s(dir.path()), "pretrain"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.lr_milestones"), "{}", stderr(&o));
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[weights]\nalpha_q = 0.2\n");
    let o = aikd(&["--config", s(&cfg), "--out", s(dir.path()), "pretrain"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("alpha_q"), "{}", stderr(&o));
}

#[test]
fn pretrain_is_reproducible_and_eval_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = aikd(&["--config", s(&cfg), "--out", s(out), "--seed", "7", "pretrain"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let ckpt = a.join("phase1/ckpt_epoch_2");
    assert!(ckpt.is_file());
    let read = |p: PathBuf| std::fs::read(p).unwrap();
    assert_eq!(read(a.join("phase1/metrics.json")), read(b.join("phase1/metrics.json")));
    let snapshot = String::from_utf8(read(a.join("phase1/config.snapshot"))).unwrap();
    for key in ["gp_lambda", "seed = 7", "cutout_size", "resolved_manifest", "num_classes = 4"] {
        assert!(snapshot.contains(key), "snapshot lacks {key}:\n{snapshot}");
    }

    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    for out in [&e1, &e2] {
        let o = aikd(&["--config", s(&cfg), "--out", s(out), "eval", "--ckpt", s(&ckpt)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(read(e1.join("metrics.json")), read(e2.join("metrics.json")));
    assert_eq!(read(e1.join("reliability.csv")), read(e2.join("reliability.csv")));
    let csv = String::from_utf8(read(e1.join("reliability.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 1 + 10);

    // An over-confident copy of the model is improved by calibration.
    let mut model = Checkpoint::load(&ckpt).unwrap().to_classifier().unwrap();
    model.scale_logits(5.0).unwrap();
    let hot = dir.path().join("hot.ckpt");
    Checkpoint::from_classifier(&model, "", 2).save(&hot).unwrap();
    let e3 = dir.path().join("e3");
    let o = aikd(&["--config", s(&cfg), "--out", s(&e3), "eval", "--ckpt", s(&hot), "--calibrate"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_slice(&read(e3.join("metrics.json"))).unwrap();
    assert!(m["ece_after_ts"].as_f64().unwrap() < m["ece"].as_f64().unwrap(), "{m}");
    assert!(m["calibration_temperature"].as_f64().unwrap() > 1.0);

    // A checkpoint that does not match the configured model is refused.
    let other = dir.path().join("other.toml");
    std::fs::write(&other, SMALL.replace("num_classes = 4", "num_classes = 5")).unwrap();
    let o = aikd(&["--config", s(&other), "--out", s(&e3), "eval", "--ckpt", s(&ckpt)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    // Distillation against the phase-1 model logs every loss component.
    let o = aikd(&["--config", s(&cfg), "--out", s(&a), "distill", "--ablation", "full", "--superior", s(&ckpt)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = String::from_utf8(read(a.join("phase2/log.jsonl"))).unwrap();
    assert_eq!(log.lines().count(), 2 * 3);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["step", "epoch", "ce", "lg", "lp", "la", "ld", "lr", "total"] {
            assert!(v[key].is_number(), "missing {key} in {line}");
        }
    }
}

#[test]
fn presets_without_superior() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = aikd(&["--config", s(&cfg), "--out", s(dir.path()), "distill", "--ablation", "baseline"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("phase2/ckpt_epoch_2").is_file());

    let o = aikd(&["--config", s(&cfg), "--out", s(dir.path()), "distill", "--ablation", "full"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("phase-1"), "{}", stderr(&o));

    let o = aikd(&["--config", s(&cfg), "--out", s(dir.path()), "distill", "--ablation", "most"]);
    assert_eq!(o.status.code(), Some(2));
}

fn fake_run(dir: &Path, name: &str, dataset: &str, top1: f64) -> PathBuf {
    let run = dir.join(name);
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(run.join("config.snapshot"), format!("[train]\nseed = {}\n\n[resolved_manifest]\nname = \"{dataset}\"\n", top1 as u64)).unwrap();
    let metrics = serde_json::json!({
        "top1_error": top1, "top5_error": 1.0, "macro_f1": 0.5, "ece": 3.0,
        "ece_after_ts": null, "calibration_temperature": null, "n_samples": 100, "n_bins": 15
    });
    std::fs::write(run.join("metrics.json"), metrics.to_string()).unwrap();
    run
}

#[test]
fn aggregate_uses_sample_std() {
    let dir = tempfile::tempdir().unwrap();
    let runs: Vec<PathBuf> = [20.0, 21.0, 22.0].iter().enumerate().map(|(i, &t)| fake_run(dir.path(), &format!("r{i}"), "cifar100", t)).collect();
    let out = dir.path().join("agg");
    let mut args = vec!["--out", s(&out), "aggregate"];
    args.extend(runs.iter().map(|r| s(r)));
    let o = aikd(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(v["metrics"]["top1_error"]["mean"].as_f64(), Some(21.0));
    assert_eq!(v["metrics"]["top1_error"]["std"].as_f64(), Some(1.0));
    assert_eq!(v["metrics"]["ece"]["std"].as_f64(), Some(0.0));
    assert!(v["metrics"].get("ece_after_ts").is_none());
    assert_eq!(v["std_convention"], "sample (n-1)");

    let odd = fake_run(dir.path(), "odd", "cifar10", 20.0);
    let o = aikd(&["--out", s(&out), "aggregate", s(&runs[0]), s(&odd)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
