//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! The desk-scale criteria train the full three-stage pipeline through the
//! CLI once and cache the checkpoint under `target/acceptance/`, keyed by the
//! scene seed and the resolved run config. Set `ACCEPTANCE_STRICT=1` to make
//! any FAIL a non-zero exit.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use portrait_field::audio::momentum_smooth;
use portrait_field::autograd::{AdamConfig, Ema, ParamGroup, ParamStore, Tape};
use portrait_field::bench;
use portrait_field::config::RunConfig;
use portrait_field::dataset::synthetic::{SceneSpec, SyntheticScene};
use portrait_field::dataset::{self, Dataset, Split};
use portrait_field::eval::{self, render_frame, sequence_codes, RenderOptions};
use portrait_field::gradcheck;
use portrait_field::head::HeadCond;
use portrait_field::losses;
use portrait_field::metrics;
use portrait_field::model::PortraitModel;
use portrait_field::render::{all_pixels, generate_rays, sample_rays, volume_render, Sampling};

const SEED: u64 = 42;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gradient_integrity() -> Outcome {
    let r = gradcheck::run(SEED, gradcheck::DEFAULT_CASES).expect("gradcheck");
    let worst = r.ops.iter().map(|o| o.max_rel_error).fold(0.0, f64::max);
    let fewest = r.ops.iter().map(|o| o.cases).min().unwrap_or(0);
    outcome(
        r.passed && r.seconds < 120.0 && fewest >= 100,
        format!("{} ops, >= {fewest} cases each, max rel {worst:.2e}, {:.1} s", r.ops.len(), r.seconds),
    )
}

fn renderer_oracle() -> Outcome {
    let t0 = Instant::now();
    let scene = SyntheticScene::new(SceneSpec::default(), SEED);
    let cam = scene.camera.clone();
    let store = ParamStore::<f64>::new();
    let mut worst: f64 = 0.0;
    for &i in &[0usize, 137, 421] {
        let state = &scene.states[i];
        let (want_rgb, want_op) = scene.spec.head_layer(state, 256);
        let rays = generate_rays(&cam, &state.pose, &all_pixels(&cam));
        let batch = sample_rays(&rays, Sampling::Dense { candidates: 256 }, None, &vec![0.5; rays.len()]);
        let s = batch.num_samples();
        let (mut sigma, mut color) = (Vec::with_capacity(s), Vec::with_capacity(3 * s));
        for p in batch.positions.chunks(3) {
            let p = [p[0], p[1], p[2]];
            sigma.push(scene.spec.density(p, state.mouth));
            color.extend(scene.spec.color(p, state));
        }
        let mut tape = Tape::inference(&store);
        let sg = tape.constant(sigma, s, 1).unwrap();
        let cl = tape.constant(color, s, 3).unwrap();
        let xa = tape.constant(vec![0.5; s], s, 1).unwrap();
        let out = volume_render(&mut tape, sg, cl, xa, &batch).unwrap();
        let got_rgb = tape.value(out.color);
        let got_op = tape.value(out.opacity);
        for (a, b) in got_rgb.iter().zip(&want_rgb).chain(got_op.iter().zip(&want_op)) {
            worst = worst.max((a - b).abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(worst < 1e-5 && secs < 60.0, format!("max abs error {worst:.2e} over 3 frames, {secs:.1} s"))
}

fn decomposition_cost() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for (d, want) in [(1usize, 10u64), (2, 12), (3, 16)] {
        let cfg = RunConfig { audio_dim: d, ..RunConfig::desk() };
        let m = PortraitModel::new(cfg, 29, 4);
        let n = 37;
        let mut tape = Tape::inference(&m.params);
        let xs: Vec<f32> = (0..3 * n).map(|i| ((i * 7919) % 1000) as f32 / 1000.0).collect();
        let x = tape.constant(xs, n, 3).unwrap();
        let a = tape.constant(vec![0.1; m.audio.config.code_dim], 1, m.audio.config.code_dim).unwrap();
        m.head.query(&mut tape, x, &HeadCond { audio: a, eye: 0.002, embedding: 0 }).unwrap();
        let levels = m.head.config.grid.levels as u64;
        let per = tape.stats().corner_fetches as f64 / (n as u64 * levels) as f64;
        pass &= per == want as f64;
        details.push(format!("D={d}: {per}"));
    }
    outcome(pass, format!("fetches per sample per level {}", details.join(", ")))
}

fn schedules() -> Outcome {
    let c = AdamConfig::default();
    let mut bad = Vec::new();
    for (group, init) in [(ParamGroup::Network, c.lr_net), (ParamGroup::Grid, c.lr_grid)] {
        for total in [1000u64, 5000, 20000] {
            if (c.learning_rate(group, total, total) - 0.1 * init).abs() > 1e-9 {
                bad.push(format!("lr {group:?} {total}"));
            }
        }
    }
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::inference(&store);
    let a = tape.constant(vec![0.5], 1, 1).unwrap();
    let e = losses::entropy(&mut tape, a).unwrap();
    if (tape.scalar(e) - std::f64::consts::LN_2).abs() > 1e-6 {
        bad.push("entropy".into());
    }

    let mut s = ParamStore::<f64>::new();
    let id = s.add("p", 1, 1, ParamGroup::Network, vec![1.0]);
    let decay = 0.95;
    let mut ema = Ema::new(decay, &s, vec![id]);
    let seq = [0.0, 2.0, -1.0, 0.5, 3.0, 3.0, -2.5];
    for (k, &v) in seq.iter().enumerate() {
        s.value_mut(id)[0] = v;
        ema.update(&s);
        // Closed form: decay^(k+1)·init + (1 − decay)·Σ_j decay^(k−j)·v_j
        let n = k as i32 + 1;
        let mut want = decay.powi(n);
        for (j, &vj) in seq.iter().enumerate().take(k + 1) {
            want += (1.0 - decay) * decay.powi(k as i32 - j as i32) * vj;
        }
        if (ema.shadow(id).unwrap()[0] - want).abs() > 1e-7 {
            bad.push(format!("ema step {k}"));
        }
    }

    let codes = vec![vec![1.0f32, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![0.0, 0.0]];
    let want = [[1.0, 0.0], [0.5, 0.5], [0.75, 0.75], [0.375, 0.375]];
    let got = momentum_smooth(&codes, 0.5);
    for (g, w) in got.iter().zip(&want) {
        if g.iter().zip(w).any(|(a, b)| (*a as f64 - b).abs() > 1e-7) {
            bad.push("momentum".into());
        }
    }
    let pass = bad.is_empty();
    outcome(pass, if pass { "lr, entropy, EMA and momentum exact".into() } else { bad.join(", ") })
}

fn root() -> PathBuf {
    let target = std::env::var_os("CARGO_TARGET_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target"));
    target.join("acceptance")
}

fn cli(args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_portrait-field")).args(args).output().map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)))
    }
}

/// Dataset and trained desk model, from the cache when present.
fn desk_run() -> Result<(Dataset, PortraitModel, f64), String> {
    let cfg = RunConfig::resolve(None, [("desk".to_string(), true.into()), ("seed".into(), SEED.into())].into_iter().collect())
        .map_err(|e| e.to_string())?;
    let key_text = format!("{}|{}", serde_json::to_string(&SceneSpec::default()).unwrap(), serde_json::to_string(&cfg).unwrap());
    let mut h = DefaultHasher::new();
    key_text.hash(&mut h);
    let dir = root().join(format!("desk-{:016x}", h.finish()));
    let data_dir = dir.join("data");
    let ckpt = dir.join("model.ckpt");
    let done = dir.join("trained");
    let p = |x: &Path| x.to_str().unwrap().to_string();
    if !done.exists() {
        eprintln!("training the desk model into {} (cached afterwards)", dir.display());
        let t0 = Instant::now();
        std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        cli(&["synth-data", "--seed", &SEED.to_string(), "--out", &p(&data_dir)])?;
        let _ = std::fs::remove_file(dir.join("model.ckpt.lock"));
        let common = ["--dataset".to_string(), p(&data_dir), "--checkpoint".into(), p(&ckpt)];
        let stage = |cmd: &str, log: &str, extra: &[&str]| -> Result<(), String> {
            let mut args: Vec<String> = vec![cmd.into()];
            args.extend(common.iter().cloned());
            args.extend(["--out".into(), p(&dir.join(log))]);
            args.extend(extra.iter().map(|s| s.to_string()));
            cli(&args.iter().map(String::as_str).collect::<Vec<_>>())
        };
        stage("train-head", "head.log", &["--desk", "--seed", &SEED.to_string()])?;
        stage("finetune-lips", "lips.log", &[])?;
        stage("train-torso", "torso.log", &[])?;
        std::fs::write(&done, format!("{:.1}\n", t0.elapsed().as_secs_f64())).map_err(|e| e.to_string())?;
    }
    let minutes = std::fs::read_to_string(&done).ok().and_then(|s| s.trim().parse::<f64>().ok()).unwrap_or(f64::NAN) / 60.0;
    let data = dataset::load(&data_dir).map_err(|e| e.to_string())?;
    let model = PortraitModel::load(&ckpt).map_err(|e| e.to_string())?;
    Ok((data, model, minutes))
}

fn pruning(model: &PortraitModel, data: &Dataset) -> Outcome {
    let pruned = RenderOptions::for_model(model, data, None);
    let dense = RenderOptions { sampling: Sampling::Dense { candidates: model.config.candidates }, ..pruned.clone() };
    let params = model.eval_params();
    let codes = sequence_codes(model, &params, data, model.config.beta).unwrap();
    // Same occupancy skipping with the sample cap lifted; isolates the cap from the grid.
    let mut uncapped_model = model.clone();
    uncapped_model.config.max_samples = model.config.candidates;
    let uncapped = RenderOptions::for_model(&uncapped_model, data, None);
    let (mut worst, mut worst_uncapped) = (f64::INFINITY, f64::INFINITY);
    for &i in data.test_frames().iter().take(10) {
        let code = &codes[data.frames[i].audio_index];
        let a = render_frame(model, &params, data, i, code, &pruned).unwrap();
        let b = render_frame(model, &params, data, i, code, &dense).unwrap();
        let c = render_frame(&uncapped_model, &params, data, i, code, &uncapped).unwrap();
        worst = worst.min(metrics::psnr(&a.image, &b.image));
        worst_uncapped = worst_uncapped.min(metrics::psnr(&c.image, &b.image));
    }
    let bp = bench::bench(model, data, &pruned, 2, 15).unwrap();
    let bd = bench::bench(model, data, &dense, 2, 15).unwrap();
    let speedup = bp.rays_per_sec / bd.rays_per_sec;
    outcome(
        worst >= 40.0 && speedup >= 1.5,
        format!(
            "min PSNR {worst:.2} dB over 10 frames ({worst_uncapped:.2} dB with the {}-sample cap lifted); {:.0} vs {:.0} rays/s ({speedup:.2}x, {:.1} vs {:.1} samples/ray)",
            model.config.max_samples, bp.rays_per_sec, bd.rays_per_sec, bp.samples_per_ray, bd.samples_per_ray
        ),
    )
}

fn persistence(model: &PortraitModel, data: &Dataset, before: f64) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let reloaded = PortraitModel::load(&path).unwrap();
    reloaded.save(&path).unwrap();
    let identical = first == std::fs::read(&path).unwrap();
    let opts = RenderOptions::for_model(&reloaded, data, None);
    let after = eval::evaluate(&reloaded, data, Split::Test, &opts).unwrap().mean_psnr;
    let diff = (after - before).abs();
    outcome(identical && diff <= 1e-6, format!("bytes identical: {identical}; PSNR {before:.6} -> {after:.6} dB"))
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    results.push((1, "gradient integrity", gradient_integrity()));
    results.push((2, "renderer oracle", renderer_oracle()));
    match desk_run() {
        Ok((data, model, minutes)) => {
            let opts = RenderOptions::for_model(&model, &data, None);
            let t0 = Instant::now();
            let r = eval::evaluate(&model, &data, Split::Test, &opts).unwrap();
            eprintln!("desk eval took {:.1} s", t0.elapsed().as_secs_f64());
            results.push((3, "desk training quality", outcome(
                r.mean_psnr >= 28.0,
                format!("held-out PSNR {:.2} dB, SSIM {:.4}, training {minutes:.1} min", r.mean_psnr, r.mean_ssim),
            )));
            results.push((4, "audio-driven mouth", outcome(
                r.mouth_correlation >= 0.9,
                format!("Pearson r {:.3} over {} frames", r.mouth_correlation, r.frames.len()),
            )));
            let rho = r.eye_spearman.unwrap_or(f64::NAN);
            let areas: Vec<usize> = r.eye_sweep.iter().map(|s| s.1).collect();
            results.push((5, "eye control", outcome(rho >= 0.9, format!("Spearman {rho:.3}, areas {areas:?}"))));
            let dy = &r.dynamic;
            results.push((6, "dynamic regularization", outcome(
                dy.ratio <= 0.2,
                format!(
                    "non-face {:.4} / face {:.4} = {:.3} ({} / {} opaque rays)",
                    dy.non_face_mean, dy.face_mean, dy.ratio, dy.non_face_rays, dy.face_rays
                ),
            )));
            results.push((7, "pruning soundness and speedup", pruning(&model, &data)));
            results.push((8, "decomposition cost", decomposition_cost()));
            let at = |n: usize| {
                let mut m = model.clone();
                m.config.max_samples = n;
                let o = RenderOptions::for_model(&m, &data, None);
                eval::evaluate(&m, &data, Split::Test, &o).unwrap().mean_psnr
            };
            let (p8, p32) = (at(8), at(32));
            results.push((9, "sample-count trend", outcome(p32 >= p8, format!("PSNR {p8:.3} dB at 8, {p32:.3} dB at 32"))));
            results.push((10, "schedules and math", schedules()));
            results.push((11, "persistence", persistence(&model, &data, r.mean_psnr)));
        }
        Err(e) => {
            for (n, name) in [(3, "desk training quality"), (4, "audio-driven mouth"), (5, "eye control"), (6, "dynamic regularization"), (7, "pruning soundness and speedup")] {
                results.push((n, name, outcome(false, format!("desk run failed: {e}"))));
            }
            results.push((8, "decomposition cost", decomposition_cost()));
            results.push((9, "sample-count trend", outcome(false, "desk run failed".into())));
            results.push((10, "schedules and math", schedules()));
            results.push((11, "persistence", outcome(false, "desk run failed".into())));
        }
    }
    let mut failed = 0;
    for (n, name, o) in &results {
        println!("criterion {n:>2} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria pass", results.len() - failed, results.len());
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
        std::process::exit(1);
    }
}
