//! End-to-end runs of the `twinmae` binary on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[train]
batch_size = 2
epochs = 2
warmup_epochs = 1
seed = 3

[model]
input_size = 16
patch = 4
mlp_ratio = 2
encoder = { depth = 1, width = 16, heads = 2 }
decoder = { depth = 1, width = 8, heads = 2 }

[data]
clips = 4
max_gap = 4
augment = false

[data.scene]
canvas = 16
patch = 4
sprites = 1
sprite_size = 8
clip_length = 12

[probe.scene]
canvas = 16
patch = 4
sprites = 1
sprite_size = 8
clip_length = 12
"#;

fn twinmae(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twinmae"))
        .args(args)
        .env("TWINMAE_OUTPUT_ROOT", root.join("default-root"))
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path
}

fn pretrain(dir: &Path, out: &Path, extra: &[&str]) -> Output {
    let cfg = tiny_config(dir);
    let mut args = vec!["pretrain", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    twinmae(&args, dir)
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&twinmae(&[], tmp.path())), 1);
    assert_eq!(code(&twinmae(&["pretrain", "--mode", "sideways"], tmp.path())), 1);
    assert_eq!(code(&twinmae(&["--help"], tmp.path())), 0);

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[model]\nmask_ratio = 1.5\n").unwrap();
    let out = twinmae(&["pretrain", "--config", bad.to_str().unwrap(), "--out", "x"], tmp.path());
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));

    fs::write(&bad, "[train]\nbatchsize = 2\n").unwrap();
    assert_eq!(code(&twinmae(&["pretrain", "--config", bad.to_str().unwrap()], tmp.path())), 1);
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.ckpt");
    assert_eq!(code(&twinmae(&["stats", "--checkpoint", missing.to_str().unwrap()], tmp.path())), 2);
    let garbage = tmp.path().join("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(code(&twinmae(&["probe", "--checkpoint", garbage.to_str().unwrap()], tmp.path())), 2);
}

#[test]
fn pretrain_is_deterministic_and_guards_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let first = pretrain(tmp.path(), &a, &[]);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    assert_eq!(code(&pretrain(tmp.path(), &b, &["--workers", "2"])), 0);
    let metrics = fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics, fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(String::from_utf8_lossy(&metrics).lines().count(), 5, "header plus four steps");
    assert!(a.join("final.ckpt").exists());

    let resolved: serde_json::Value = serde_json::from_slice(&fs::read(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["batch_size"], 2);
    assert_eq!(resolved["model"]["drop_mode"], "asad");
    let hash = resolved["config_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    let resolved_b: serde_json::Value = serde_json::from_slice(&fs::read(b.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved_b["config_hash"], hash, "worker count is not part of the trajectory");

    assert_eq!(code(&pretrain(tmp.path(), &a, &[])), 1, "non-empty output needs --force");
    assert_eq!(code(&pretrain(tmp.path(), &a, &["--force"])), 0);
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), metrics);
}

#[test]
fn resume_continues_the_same_trajectory() {
    let tmp = tempfile::tempdir().unwrap();
    let full = tmp.path().join("full");
    let part = tmp.path().join("part");
    assert_eq!(code(&pretrain(tmp.path(), &full, &[])), 0);
    assert_eq!(code(&pretrain(tmp.path(), &part, &["--stop-at", "2"])), 0);
    let ckpt = part.join("step-000002.ckpt");
    assert!(ckpt.exists());
    let out = pretrain(tmp.path(), &part, &["--resume", ckpt.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(full.join("metrics.csv")).unwrap(), fs::read(part.join("metrics.csv")).unwrap());

    let other = pretrain(tmp.path(), &tmp.path().join("other"), &["--seed", "4", "--resume", ckpt.to_str().unwrap()]);
    assert_eq!(code(&other), 1, "a different trajectory must not resume from this checkpoint");
}

#[test]
fn analysis_commands_write_their_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    assert_eq!(code(&pretrain(tmp.path(), &run, &["--mode", "none"])), 0);
    let ckpt = run.join("final.ckpt");
    let ck = ckpt.to_str().unwrap();

    let stats = tmp.path().join("stats.csv");
    assert_eq!(code(&twinmae(&["stats", "--checkpoint", ck, "--samples", "3", "--out", stats.to_str().unwrap()], tmp.path())), 0);
    let text = fs::read_to_string(&stats).unwrap();
    assert!(text.starts_with("layer,within_mass,between_mass\n"));
    assert_eq!(text.lines().count(), 2);
    assert_eq!(code(&twinmae(&["stats", "--checkpoint", ck, "--out", stats.to_str().unwrap()], tmp.path())), 1);

    let probe = tmp.path().join("probe.json");
    let out = twinmae(&["probe", "--checkpoint", ck, "--pairs", "4", "--out", probe.to_str().unwrap()], tmp.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(&probe).unwrap()).unwrap();
    let accuracy = report["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&accuracy));
    assert_eq!(report["n_pairs"], 4);

    let heat = tmp.path().join("heat");
    assert_eq!(code(&twinmae(&["heatmap", "--checkpoint", ck, "--out", heat.to_str().unwrap()], tmp.path())), 0);
    assert!(heat.join("ftem_layer0_frame_a.png").exists());

    let rec = tmp.path().join("rec");
    let out = twinmae(&["reconstruct", "--checkpoint", ck, "--out", rec.to_str().unwrap()], tmp.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["frame_a_original.png", "frame_b_masked.png", "frame_b_reconstruction.png"] {
        assert!(rec.join(name).exists(), "{name}");
    }
}

#[test]
fn generated_clips_train_through_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    let out = twinmae(&["gen-data", "--config", cfg.to_str().unwrap(), "--clips", "3", "--out", data.to_str().unwrap()], tmp.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = data.join("manifest.txt");
    assert_eq!(fs::read_to_string(&manifest).unwrap().lines().filter(|l| !l.starts_with('#')).count(), 3);

    let run = tmp.path().join("run");
    let out = pretrain(tmp.path(), &run, &["--manifest", manifest.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("final.ckpt").exists());
}

#[test]
fn default_output_goes_under_the_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = twinmae(&["pretrain", "--config", cfg.to_str().unwrap(), "--epochs", "2", "--stop-at", "1"], tmp.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("default-root/pretrain/step-000001.ckpt").exists());
}
