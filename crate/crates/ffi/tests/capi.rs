use std::ffi::{CStr, CString};
use std::ptr;

use hqm_core::harness::{train, RunConfig};
use hqm_core::scenes::Dataset;
use hqm_ffi::*;

fn last_error() -> String {
    let p = hqm_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn bx(cx: f64, cy: f64, w: f64, h: f64) -> HqmBox {
    HqmBox { cx, cy, w, h }
}

#[test]
fn iou_and_giou() {
    let a = bx(0.5, 0.5, 0.2, 0.2);
    let b = bx(0.6, 0.5, 0.2, 0.2);
    let mut v = 0.0;
    assert_eq!(unsafe { hqm_box_iou(&a, &b, &mut v) }, HqmStatus::Ok);
    assert!((v - 1.0 / 3.0).abs() < 1e-12);
    let far = bx(0.1, 0.1, 0.1, 0.1);
    assert_eq!(unsafe { hqm_box_giou(&a, &far, &mut v) }, HqmStatus::Ok);
    assert!(v < 0.0);
    assert_eq!(unsafe { hqm_box_iou(ptr::null(), &b, &mut v) }, HqmStatus::NullPointer);
    assert!(last_error().contains("null"));
}

#[test]
fn shift_box_respects_bounds_and_reports_bad_config() {
    let gt = bx(0.5, 0.5, 0.3, 0.4);
    let mut out = bx(0.0, 0.0, 0.0, 0.0);
    let mut v = 0.0;
    for seed in 0..50 {
        assert_eq!(unsafe { hqm_shift_box(&gt, 0.4, 0.6, 64, seed, &mut out) }, HqmStatus::Ok);
        unsafe { hqm_box_iou(&gt, &out, &mut v) };
        assert!((0.4..=0.6).contains(&v), "{v}");
    }
    assert_eq!(unsafe { hqm_shift_box(&gt, 0.7, 0.6, 64, 0, &mut out) }, HqmStatus::Config);
    assert!(!last_error().is_empty());
}

#[test]
fn hungarian_picks_the_cheap_diagonal() {
    // 3 queries x 2 targets
    let cost = [5.0, 1.0, 1.0, 5.0, 9.0, 9.0];
    let mut q = [usize::MAX; 2];
    let mut total = 0.0;
    let status = unsafe { hqm_hungarian(cost.as_ptr(), 3, 2, q.as_mut_ptr(), &mut total) };
    assert_eq!(status, HqmStatus::Ok);
    assert_eq!(q, [1, 0]);
    assert_eq!(total, 2.0);
    let wide = [1.0, 2.0];
    assert_eq!(
        unsafe { hqm_hungarian(wide.as_ptr(), 1, 2, q.as_mut_ptr(), ptr::null_mut()) },
        HqmStatus::Contract
    );
    let nan = [f64::NAN];
    assert_eq!(
        unsafe { hqm_hungarian(nan.as_ptr(), 1, 1, q.as_mut_ptr(), ptr::null_mut()) },
        HqmStatus::InvalidArgument
    );
}

#[test]
fn amm_mask_touches_only_top_k() {
    let attention: Vec<f64> = (0..16).map(|i| (i as f64 + 1.0) / 136.0).collect();
    let mut out = vec![0.0; 16];
    let status = unsafe { hqm_amm_mask(attention.as_ptr(), attention.as_ptr(), 16, 4, 1.0, 3, out.as_mut_ptr()) };
    assert_eq!(status, HqmStatus::Ok);
    assert_eq!(&out[..12], &attention[..12]);
    assert!(out[12..].iter().all(|&v| v == 0.0));
    let status = unsafe { hqm_amm_mask(attention.as_ptr(), attention.as_ptr(), 16, 17, 0.4, 3, out.as_mut_ptr()) };
    assert_eq!(status, HqmStatus::Config);
}

#[test]
fn model_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::tiny();
    cfg.optim.epochs = 1;
    cfg.out_dir = dir.path().join("run");
    let summary = train(&cfg).unwrap();
    let data = Dataset::generate(&cfg.data.scene, 99, "val", 3).unwrap();
    let data_path = dir.path().join("val.json");
    std::fs::write(&data_path, data.to_json().unwrap()).unwrap();

    let path = CString::new(summary.checkpoint_path.to_str().unwrap()).unwrap();
    let mut model: *mut HqmModel = ptr::null_mut();
    assert_eq!(unsafe { hqm_model_load(path.as_ptr(), &mut model) }, HqmStatus::Ok);
    assert!(!model.is_null());

    let dp = CString::new(data_path.to_str().unwrap()).unwrap();
    let mut map = -1.0;
    assert_eq!(unsafe { hqm_model_evaluate(model, dp.as_ptr(), &mut map) }, HqmStatus::Ok);
    assert!((0.0..=1.0).contains(&map));

    let scene = CString::new(serde_json::to_string(&data.scenes[0]).unwrap()).unwrap();
    let mut json = ptr::null_mut();
    assert_eq!(unsafe { hqm_model_predict_json(model, scene.as_ptr(), &mut json) }, HqmStatus::Ok);
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
    unsafe { hqm_string_free(json) };
    let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(parsed.is_array());

    let bad = CString::new("{not json").unwrap();
    let mut json = ptr::null_mut();
    assert_eq!(unsafe { hqm_model_predict_json(model, bad.as_ptr(), &mut json) }, HqmStatus::Format);
    assert!(json.is_null());
    unsafe { hqm_model_free(model) };

    let missing = CString::new(dir.path().join("nope.json").to_str().unwrap()).unwrap();
    let mut model: *mut HqmModel = ptr::null_mut();
    assert_eq!(unsafe { hqm_model_load(missing.as_ptr(), &mut model) }, HqmStatus::Io);
    assert!(model.is_null());
    unsafe { hqm_model_free(ptr::null_mut()) };
}

#[test]
fn errors_are_per_thread() {
    let mut v = 0.0;
    unsafe { hqm_box_iou(ptr::null(), ptr::null(), &mut v) };
    let here = last_error();
    std::thread::spawn(|| assert!(hqm_last_error_message().is_null()))
        .join()
        .unwrap();
    assert_eq!(last_error(), here);
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(hqm_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/hqm.h");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{header}\"\nint main(void) {{ HqmBox b = {{0.5, 0.5, 0.1, 0.1}}; double v; \
             return hqm_box_iou(&b, &b, &v) == HQM_STATUS_OK ? 0 : 1; }}\n"
        ),
    )
    .unwrap();
    let Ok(out) = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"])
        .arg(&src)
        .output()
    else {
        eprintln!("no C compiler on PATH; skipping");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
