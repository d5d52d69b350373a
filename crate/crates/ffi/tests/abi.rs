use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use portrait_field::config::RunConfig;
use portrait_field::dataset::synthetic::{generate_synthetic, SceneSpec};
use portrait_field::dataset::{self, Split};
use portrait_field::eval::{render_frame, sequence_codes, RenderOptions};
use portrait_field::model::PortraitModel;
use portrait_field_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = pf_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

struct Fixture {
    _dir: tempfile::TempDir,
    data: std::path::PathBuf,
    ckpt: std::path::PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec { num_frames: 8, width: 12, height: 12, focal: 20.0, test_fraction: 0.25, samples: 32, ..SceneSpec::default() };
    let data = dir.path().join("data");
    generate_synthetic(&spec, 1, &data).unwrap();
    let d = dataset::load(&data).unwrap();
    let cfg = RunConfig { grid_levels: 4, grid_max_resolution: 64, grid_log2_table_size: 10, hidden: 16, geo_feat: 8, ..RunConfig::desk() };
    let ckpt = dir.path().join("m.ckpt");
    PortraitModel::new(cfg, d.logits.logit_dim, d.train_frames().len()).save(&ckpt).unwrap();
    Fixture { _dir: dir, data, ckpt }
}

unsafe fn open(f: &Fixture) -> (*mut PfModel, *mut PfDataset) {
    let mut m = ptr::null_mut();
    let mut d = ptr::null_mut();
    assert_eq!(pf_model_open(cstr(&f.ckpt).as_ptr(), &mut m), PfStatus::Ok);
    assert_eq!(pf_dataset_open(cstr(&f.data).as_ptr(), &mut d), PfStatus::Ok);
    (m, d)
}

#[test]
fn info_and_version() {
    let f = fixture();
    unsafe {
        let (m, d) = open(&f);
        let mut di = PfDatasetInfo::default();
        assert_eq!(pf_dataset_info(d, &mut di), PfStatus::Ok);
        assert_eq!((di.width, di.height, di.frames, di.test_frames), (12, 12, 8, 2));
        let mut mi = PfModelInfo::default();
        assert_eq!(pf_model_info(m, &mut mi), PfStatus::Ok);
        assert_eq!((mi.audio_dim, mi.code_dim, mi.logit_dim), (2, 64, di.logit_dim));
        assert!(mi.prune && !mi.head_trained && !mi.torso_trained);
        assert!(!CStr::from_ptr(pf_version()).to_bytes().is_empty());
        pf_model_free(m);
        pf_dataset_free(d);
    }
}

#[test]
fn render_matches_the_library() {
    let f = fixture();
    let data = dataset::load(&f.data).unwrap();
    let model = PortraitModel::load(&f.ckpt).unwrap();
    let params = model.eval_params();
    let codes = sequence_codes(&model, &params, &data, model.config.beta).unwrap();
    let frame = data.frames_in(Split::Test)[0];
    let want = render_frame(&model, &params, &data, frame, &codes[data.frames[frame].audio_index], &RenderOptions::for_model(&model, &data, None))
        .unwrap()
        .image;
    unsafe {
        let (m, d) = open(&f);
        let mut out = vec![0f32; 12 * 12 * 3];
        assert_eq!(pf_render_frame(m, d, frame, ptr::null(), f32::NAN, out.as_mut_ptr(), out.len()), PfStatus::Ok);
        assert_eq!(out, want);

        let n = data.logits.num_frames;
        let mut enc = vec![0f32; n * 64];
        let st = pf_audio_encode(m, data.logits.values.as_ptr(), n, data.logits.logit_dim, -1.0, enc.as_mut_ptr(), enc.len());
        assert_eq!(st, PfStatus::Ok);
        assert_eq!(enc, codes.concat());
        let a = data.frames[frame].audio_index;
        let mut out2 = vec![0f32; out.len()];
        let code = enc[a * 64..(a + 1) * 64].as_ptr();
        assert_eq!(pf_render_frame(m, d, frame, code, f32::NAN, out2.as_mut_ptr(), out2.len()), PfStatus::Ok);
        assert_eq!(out2, want);

        let mut s = PfEvalSummary::default();
        assert_eq!(pf_evaluate(m, d, &mut s), PfStatus::Ok);
        assert_eq!(s.frames, 2);
        assert!(s.mean_psnr.is_finite());
        pf_model_free(m);
        pf_dataset_free(d);
    }
}

#[test]
fn failures_report_status_and_message() {
    let f = fixture();
    unsafe {
        let mut m = ptr::null_mut();
        let missing = f.data.join("nope.ckpt");
        assert_eq!(pf_model_open(cstr(&missing).as_ptr(), &mut m), PfStatus::Io);
        assert!(last_error().contains("nope.ckpt"));
        assert!(m.is_null());
        assert_eq!(pf_model_open(ptr::null(), &mut m), PfStatus::NullPointer);
        let manifest = f.data.join("manifest.json");
        assert_eq!(pf_model_open(cstr(&manifest).as_ptr(), &mut m), PfStatus::Format);

        let (m, d) = open(&f);
        let mut small = vec![0f32; 10];
        assert_eq!(pf_render_frame(m, d, 0, ptr::null(), 0.0, small.as_mut_ptr(), small.len()), PfStatus::BufferTooSmall);
        assert!(last_error().contains("432"));
        let mut out = vec![0f32; 432];
        assert_eq!(pf_render_frame(m, d, 99, ptr::null(), 0.0, out.as_mut_ptr(), out.len()), PfStatus::InvalidArgument);
        let bad = [0f32; 4];
        assert_eq!(pf_audio_encode(m, bad.as_ptr(), 2, 2, 0.5, out.as_mut_ptr(), out.len()), PfStatus::InvalidArgument);
        assert_eq!(pf_evaluate(ptr::null(), d, &mut PfEvalSummary::default()), PfStatus::NullPointer);
        assert!(!CStr::from_ptr(pf_status_name(PfStatus::Format)).to_bytes().is_empty());
        pf_model_free(m);
        pf_dataset_free(d);
        pf_model_free(ptr::null_mut());
    }
}

#[test]
fn header_compiles_and_links_from_c() {
    let Some(cc) = ["cc", "gcc", "clang"].into_iter().find(|c| std::process::Command::new(c).arg("--version").output().is_ok()) else {
        eprintln!("no C compiler, skipping");
        return;
    };
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    std::fs::write(
        &src,
        r#"#include "portrait_field.h"
#include <stdio.h>
#include <string.h>
int main(void) {
    PfModel *m = NULL;
    if (pf_model_open("/nonexistent/model.ckpt", &m) != PF_STATUS_IO) return 1;
    if (m != NULL || pf_last_error() == NULL) return 2;
    if (strlen(pf_version()) == 0) return 3;
    PfEvalSummary s;
    if (pf_evaluate(NULL, NULL, &s) != PF_STATUS_NULL_POINTER) return 4;
    pf_model_free(NULL);
    puts("ok");
    return 0;
}
"#,
    )
    .unwrap();
    let status = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(root.join("include"))
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success(), "header does not compile as C99");

    // Link against the staticlib when cargo has built it next to this test.
    let deps = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = deps.join("libportrait_field_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built, skipping link", lib.display());
        return;
    }
    let exe = dir.path().join("t");
    let status = std::process::Command::new(cc)
        .arg("-I")
        .arg(root.join("include"))
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "link failed");
    let out = std::process::Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
