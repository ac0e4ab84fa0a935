use std::ffi::{c_char, CString};
use std::path::Path;
use std::ptr;

use aima_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { aima_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

#[test]
fn ground_save_load_round_trip() {
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(aima_model_new(3, &mut model), AimaStatus::Ok);
        let mut scene = ptr::null_mut();
        assert_eq!(aima_scene_generate(5, AimaDifficulty::Easy, &mut scene), AimaStatus::Ok);
        let mut a = AimaClick::default();
        assert_eq!(aima_ground(model, scene, AimaStrategy::Sink, &mut a), AimaStatus::Ok);
        assert_eq!(a.hit, a.min_relax == 0);

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
        assert_eq!(aima_model_save(model, path.as_ptr()), AimaStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(aima_model_load(path.as_ptr(), &mut loaded), AimaStatus::Ok);
        let mut b = AimaClick::default();
        assert_eq!(aima_ground(loaded, scene, AimaStrategy::Sink, &mut b), AimaStatus::Ok);
        assert_eq!(a, b);

        let mut bbox = [0.0; 4];
        assert_eq!(aima_scene_target(scene, bbox.as_mut_ptr()), AimaStatus::Ok);
        assert!(bbox[2] > bbox[0] && bbox[3] > bbox[1]);

        aima_model_free(model);
        aima_model_free(loaded);
        aima_scene_free(scene);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let mut model = ptr::null_mut();
        let missing = CString::new("/nonexistent/dir/x.ckpt").unwrap();
        assert_eq!(aima_model_load(missing.as_ptr(), &mut model), AimaStatus::Io);
        assert!(model.is_null());
        assert!(last_error().contains("x.ckpt"));

        assert_eq!(aima_model_new(0, ptr::null_mut()), AimaStatus::NullPointer);
        let mut c = AimaClick::default();
        assert_eq!(aima_ground(ptr::null(), ptr::null(), AimaStrategy::Anchor, &mut c), AimaStatus::NullPointer);

        aima_model_free(ptr::null_mut());
        aima_scene_free(ptr::null_mut());
    }
}

#[test]
fn patch_labels_through_the_abi() {
    let bbox = [16.0, 16.0, 32.0, 32.0];
    let mut out = [0.0; 16];
    let mut written = 0usize;
    let st = unsafe { aima_patch_labels(64, 64, 16, bbox.as_ptr(), 0.8, out.as_mut_ptr(), out.len(), &mut written) };
    assert_eq!(st, AimaStatus::Ok);
    assert_eq!(written, 16);
    assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(out[5], 1.0);

    let st = unsafe { aima_patch_labels(64, 64, 16, bbox.as_ptr(), 0.8, out.as_mut_ptr(), 4, &mut written) };
    assert_eq!(st, AimaStatus::BufferTooSmall);
    assert_eq!(written, 16);

    let st = unsafe { aima_patch_labels(64, 64, 0, bbox.as_ptr(), 0.8, out.as_mut_ptr(), 16, &mut written) };
    assert_ne!(st, AimaStatus::Ok);
}

#[test]
fn header_declares_the_api_and_compiles() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = dir.join("include/aima.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "aima_last_error",
        "aima_model_new",
        "aima_model_load",
        "aima_ground",
        "aima_patch_labels",
        "AIMA_STATUS_OK",
        "typedef struct AimaModel AimaModel",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"aima.h\"\nint f(void) { AimaModel *m = 0; return aima_model_new(1, &m) == AIMA_STATUS_OK; }\n",
    )
    .unwrap();
    let status = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(dir.join("include"))
        .arg(&src)
        .status()
        .expect("a C compiler on PATH");
    assert!(status.success());
}
