use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use portrait_field::config::RunConfig;
use portrait_field::dataset;
use portrait_field::model::PortraitModel;
use portrait_field::train::{windowed_means, LossReport};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_portrait-field"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_scene(dir: &Path) -> PathBuf {
    let spec = dir.join("scene.json");
    std::fs::write(
        &spec,
        r#"{"num_frames": 24, "width": 16, "height": 16, "focal": 27.5, "test_fraction": 0.25, "samples": 64}"#,
    )
    .unwrap();
    let out = dir.join("data");
    let o = run(&["synth-data", "--config", p(&spec), "--seed", "5", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn tiny_config(dir: &Path, steps: u64) -> PathBuf {
    let path = dir.join("run.json");
    let cfg = serde_json::json!({
        "desk": true,
        "head_steps": steps,
        "warmup_steps": steps / 2,
        "lips_steps": 10,
        "torso_steps": 20,
        "rays_per_step": 256,
        "torso_pixels_per_step": 256,
        "lips_patch": 8,
        "log_interval": 1,
        "grid_levels": 6,
        "grid_max_resolution": 128,
        "grid_log2_table_size": 12,
        "hidden": 32,
        "geo_feat": 16,
        "occupancy_resolution": 16,
        "recompute_conditions": 2,
    });
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn reports(path: &Path) -> Vec<LossReport> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&["eval", "--audio-dim", "4"]).status.code(), Some(2));
    assert_eq!(run(&["eval", "--max-samples", "0"]).status.code(), Some(2));
    assert_eq!(run(&["bench", "--seed", "minus-one"]).status.code(), Some(2));
}

#[test]
fn missing_or_bad_inputs_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["eval", "--checkpoint", "x.ckpt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--dataset"));
    let missing = dir.path().join("nowhere");
    let ckpt = dir.path().join("m.ckpt");
    let o = run(&["train-head", "--dataset", p(&missing), "--checkpoint", p(&ckpt)]);
    assert_eq!(o.status.code(), Some(1));
    let garbage = dir.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let o = run(&["eval", "--dataset", p(&missing), "--checkpoint", p(&garbage)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn torso_stage_refuses_an_untrained_head() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_scene(dir.path());
    let d = dataset::load(&data).unwrap();
    let cfg = RunConfig::resolve(Some(&tiny_config(dir.path(), 8)), Default::default()).unwrap();
    let ckpt = dir.path().join("fresh.ckpt");
    PortraitModel::new(cfg, d.logits.logit_dim, d.train_frames().len()).save(&ckpt).unwrap();
    let o = run(&["train-torso", "--dataset", p(&data), "--checkpoint", p(&ckpt)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train-head"));
    let o = run(&["finetune-lips", "--dataset", p(&data), "--checkpoint", p(&ckpt)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn lock_file_blocks_a_second_trainer() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_scene(dir.path());
    let ckpt = dir.path().join("m.ckpt");
    std::fs::write(dir.path().join("m.ckpt.lock"), "1").unwrap();
    let cfg = tiny_config(dir.path(), 8);
    let o = run(&["train-head", "--dataset", p(&data), "--checkpoint", p(&ckpt), "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lock"));
}

#[test]
fn short_pipeline_trains_renders_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_scene(dir.path());
    let cfg = tiny_config(dir.path(), 600);
    let ckpt = dir.path().join("m.ckpt");
    let log = dir.path().join("head.log");
    let o = run(&["train-head", "--dataset", p(&data), "--checkpoint", p(&ckpt), "--config", p(&cfg), "--seed", "3", "--out", p(&log)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("config {"));
    assert!(!dir.path().join("m.ckpt.lock").exists());
    let head = reports(&log);
    assert_eq!(head.len(), 600);
    let (first, last) = windowed_means(&head, 50).unwrap();
    assert!(last < first, "loss did not fall: {first} -> {last}");

    let lips_log = dir.path().join("lips.log");
    let o = run(&["finetune-lips", "--dataset", p(&data), "--checkpoint", p(&ckpt), "--out", p(&lips_log)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(reports(&lips_log).iter().all(|r| r.structural > 0.0 && r.total.is_finite()));
    let o = run(&["train-torso", "--dataset", p(&data), "--checkpoint", p(&ckpt), "--out", p(&dir.path().join("torso.log"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let m = PortraitModel::load(&ckpt).unwrap();
    assert_eq!(m.to_bytes().unwrap(), std::fs::read(&ckpt).unwrap());

    let eval = |name: &str| -> serde_json::Value {
        let out = dir.path().join(name);
        let o = run(&["eval", "--dataset", p(&data), "--checkpoint", p(&ckpt), "--out", p(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap()
    };
    let a = eval("a.json");
    let b = eval("b.json");
    assert_eq!(a["mean_psnr"], b["mean_psnr"]);
    assert!(a["mean_psnr"].as_f64().unwrap() > 10.0);
    assert_eq!(a["eye_sweep"].as_array().unwrap().len(), 11);

    let frames = dir.path().join("render");
    let o = run(&["render", "--dataset", p(&data), "--checkpoint", p(&ckpt), "--out", p(&frames), "--eye-ratio", "0.002"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(frames.join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["frames"].as_array().unwrap().len(), 24);
    assert!(frames.join("frames/00023.png").exists());

    let o = run(&["train-torso", "--dataset", p(&data), "--checkpoint", p(&ckpt), "--audio-dim", "3"]);
    assert_eq!(o.status.code(), Some(1), "architecture change on resume must be refused");
}
