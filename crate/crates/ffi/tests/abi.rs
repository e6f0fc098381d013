use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use mvfuse_ffi::*;

fn last_error() -> String {
    let p = mvf_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn synth_optimize_and_read_back() {
    unsafe {
        let mut scene = ptr::null_mut();
        assert_eq!(mvf_scene_synth(4, 3, true, &mut scene), MvfStatus::Ok);
        assert_eq!(mvf_scene_n_views(scene), 3);

        let config = mvf_config_default();
        assert_eq!(mvf_config_set_steps(config, 20), MvfStatus::Ok);
        let mut result = ptr::null_mut();
        assert_eq!(mvf_optimize(scene, config, &mut result), MvfStatus::Ok);
        assert_eq!(mvf_result_n_records(result), 21);

        let (mut first, mut last) = (MvfMetrics::default(), MvfMetrics::default());
        assert_eq!(mvf_result_metrics(result, 0, &mut first), MvfStatus::Ok);
        assert_eq!(mvf_result_metrics(result, 20, &mut last), MvfStatus::Ok);
        assert!(last.mpjpe < first.mpjpe, "{} vs {}", last.mpjpe, first.mpjpe);
        let mut loss = 0.0;
        assert_eq!(mvf_result_loss(result, 20, &mut loss), MvfStatus::Ok);
        assert!(loss.is_finite());
        assert_eq!(mvf_result_loss(result, 21, &mut loss), MvfStatus::InvalidArgument);
        assert!(last_error().contains("out of range"));

        mvf_result_free(result);
        mvf_config_free(config);
        mvf_scene_free(scene);
    }
}

#[test]
fn scene_file_round_trip_and_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("a.scene").to_str().unwrap()).unwrap();
    unsafe {
        let mut scene = ptr::null_mut();
        assert_eq!(mvf_scene_synth(1, 2, false, &mut scene), MvfStatus::Ok);
        assert_eq!(mvf_scene_save(scene, path.as_ptr()), MvfStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(mvf_scene_load(path.as_ptr(), &mut back), MvfStatus::Ok);
        assert_eq!(mvf_scene_n_views(back), 2);
        mvf_scene_free(back);
        mvf_scene_free(scene);

        let missing = CString::new(dir.path().join("none.scene").to_str().unwrap()).unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(mvf_scene_load(missing.as_ptr(), &mut out), MvfStatus::Io);
        assert!(out.is_null());
        assert!(last_error().contains("none.scene"));
    }
}

#[test]
fn null_and_invalid_arguments_are_rejected() {
    unsafe {
        assert_eq!(mvf_scene_synth(0, 2, true, ptr::null_mut()), MvfStatus::NullPointer);
        assert_eq!(mvf_scene_load(ptr::null(), ptr::null_mut()), MvfStatus::NullPointer);
        assert_eq!(mvf_scene_n_views(ptr::null()), 0);
        mvf_scene_free(ptr::null_mut());
        mvf_config_free(ptr::null_mut());
        mvf_result_free(ptr::null_mut());

        let mut scene = ptr::null_mut();
        assert_eq!(mvf_scene_synth(0, 0, true, &mut scene), MvfStatus::InvalidArgument);

        let config = mvf_config_default();
        assert_eq!(mvf_config_set_learning_rates(config, -1.0, 1e-2), MvfStatus::InvalidArgument);
        assert_eq!(mvf_config_set_learning_rates(config, 1e-3, 1e-2), MvfStatus::Ok);
        mvf_config_free(config);

        let bad = CString::new("[tta]\nsteps = 5\nwarmup_steps = 9\n").unwrap();
        let mut cfg = ptr::null_mut();
        assert_eq!(mvf_config_from_toml(bad.as_ptr(), &mut cfg), MvfStatus::InvalidArgument);
        let good = CString::new("[tta]\nsteps = 5\nwarmup_steps = 2\n").unwrap();
        assert_eq!(mvf_config_from_toml(good.as_ptr(), &mut cfg), MvfStatus::Ok);
        mvf_config_free(cfg);
    }
}

#[test]
fn zero_steps_report_initial_metrics() {
    unsafe {
        let mut scene = ptr::null_mut();
        assert_eq!(mvf_scene_synth(2, 2, false, &mut scene), MvfStatus::Ok);
        let config = mvf_config_default();
        mvf_config_set_steps(config, 0);
        let mut result = ptr::null_mut();
        assert_eq!(mvf_optimize(scene, config, &mut result), MvfStatus::Ok);
        let mut m = MvfMetrics::default();
        assert_eq!(mvf_result_metrics(result, 0, &mut m), MvfStatus::Ok);
        assert!(m.mpjpe > 0.0);
        mvf_result_free(result);
        mvf_config_free(config);
        mvf_scene_free(scene);
    }
}

#[test]
fn header_declares_the_abi_and_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/mvfuse.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "mvf_last_error",
        "mvf_scene_synth",
        "mvf_scene_load",
        "mvf_scene_save",
        "mvf_scene_free",
        "mvf_config_default",
        "mvf_config_from_toml",
        "mvf_optimize",
        "mvf_result_metrics",
        "mvf_result_free",
        "MVF_STATUS_NUMERIC_ABORT = 2",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"mvfuse.h\"\nint main(void) { MvfScene *s = 0; MvfStatus st = mvf_scene_synth(0, 2, true, &s); mvf_scene_free(s); return (int)st; }\n",
    )
    .unwrap();
    let Ok(out) = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
    else {
        eprintln!("no C compiler; skipping syntax check");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
