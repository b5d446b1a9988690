use std::ffi::{CStr, CString};
use std::ptr;

use videdit_ffi::*;

const TINY: &str = include_str!("../../core/tests/data/tiny.toml");

fn last_error() -> String {
    let p = videdit_last_error();
    assert!(!p.is_null(), "a failing call must set the error message");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn session() -> *mut VideditSession {
    let cfg = CString::new(TINY).unwrap();
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { videdit_session_new(cfg.as_ptr(), &mut s) }, VideditStatus::Ok);
    assert_eq!(unsafe { videdit_session_init_model(s) }, VideditStatus::Ok);
    s
}

fn data(v: *const VideditVideo) -> ([usize; 4], Vec<f64>) {
    let mut shape = [0usize; 4];
    unsafe {
        assert_eq!(videdit_video_shape(v, shape.as_mut_ptr()), VideditStatus::Ok);
        let mut buf = vec![0.0; shape.iter().product()];
        assert_eq!(videdit_video_copy_data(v, buf.as_mut_ptr(), buf.len()), VideditStatus::Ok);
        (shape, buf)
    }
}

#[test]
fn status_codes_and_messages() {
    let bad = CString::new("nonsense_key = 1").unwrap();
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { videdit_session_new(bad.as_ptr(), &mut s) }, VideditStatus::Config);
    assert!(s.is_null());
    assert!(last_error().contains("nonsense_key"));

    assert_eq!(unsafe { videdit_session_new(ptr::null(), ptr::null_mut()) }, VideditStatus::InvalidArgument);
    assert_eq!(unsafe { videdit_video_shape(ptr::null(), ptr::null_mut()) }, VideditStatus::InvalidArgument);

    let name = unsafe { CStr::from_ptr(videdit_status_name(VideditStatus::MissingArtifact)) };
    assert_eq!(name.to_str().unwrap(), "missing artifact");
    let version = unsafe { CStr::from_ptr(videdit_version()) };
    assert_eq!(version.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn success_clears_the_error() {
    let mut s = ptr::null_mut();
    assert_ne!(unsafe { videdit_session_new(ptr::null(), ptr::null_mut()) }, VideditStatus::Ok);
    assert_eq!(unsafe { videdit_session_new(ptr::null(), &mut s) }, VideditStatus::Ok);
    assert!(videdit_last_error().is_null());
    unsafe { videdit_session_free(s) };
}

#[test]
fn missing_model_and_checkpoint() {
    let cfg = CString::new(TINY).unwrap();
    let mut s = ptr::null_mut();
    let mut v = ptr::null_mut();
    let mut r = ptr::null_mut();
    unsafe {
        assert_eq!(videdit_session_new(cfg.as_ptr(), &mut s), VideditStatus::Ok);
        assert_eq!(videdit_render(s, &mut v), VideditStatus::Ok);
        assert_eq!(videdit_invert(s, v, ptr::null(), &mut r), VideditStatus::MissingArtifact);
        let nowhere = CString::new("/nonexistent/model.bin").unwrap();
        assert_eq!(videdit_session_load_model(s, nowhere.as_ptr()), VideditStatus::MissingArtifact);
        videdit_video_free(v);
        videdit_session_free(s);
    }
}

#[test]
fn video_buffers_round_trip() {
    let values: Vec<f64> = (0..2 * 3 * 2 * 2).map(|i| i as f64 / 24.0).collect();
    let mut v = ptr::null_mut();
    unsafe {
        assert_eq!(videdit_video_new(2, 3, 2, 2, values.as_ptr(), values.len(), &mut v), VideditStatus::Ok);
        let (shape, back) = data(v);
        assert_eq!(shape, [2, 3, 2, 2]);
        assert_eq!(back, values);
        let mut small = [0.0; 3];
        assert_eq!(videdit_video_copy_data(v, small.as_mut_ptr(), 3), VideditStatus::InvalidArgument);
        videdit_video_free(v);

        let mut w = ptr::null_mut();
        assert_eq!(videdit_video_new(2, 3, 2, 2, values.as_ptr(), 5, &mut w), VideditStatus::InvalidInput);
        assert!(w.is_null());
    }
}

#[test]
fn invert_edit_and_persist() {
    let s = session();
    let dir = tempfile::tempdir().unwrap();
    let rec_dir = CString::new(dir.path().join("rec").to_str().unwrap()).unwrap();
    let frames_dir = CString::new(dir.path().join("frames").to_str().unwrap()).unwrap();
    unsafe {
        let mut v = ptr::null_mut();
        assert_eq!(videdit_render(s, &mut v), VideditStatus::Ok);
        let (shape, _) = data(v);
        assert_eq!(shape, [3, 3, 8, 8]);

        let mut r = ptr::null_mut();
        assert_eq!(videdit_invert(s, v, ptr::null(), &mut r), VideditStatus::Ok);
        assert_eq!(videdit_record_num_steps(r), videdit_session_num_steps(s));
        assert_eq!(videdit_record_save(r, rec_dir.as_ptr()), VideditStatus::Ok);

        let mut r2 = ptr::null_mut();
        assert_eq!(videdit_record_load(rec_dir.as_ptr(), &mut r2), VideditStatus::Ok);

        let mut a = ptr::null_mut();
        let mut b = ptr::null_mut();
        assert_eq!(videdit_edit(s, r, ptr::null(), &mut a), VideditStatus::Ok);
        assert_eq!(videdit_edit(s, r2, ptr::null(), &mut b), VideditStatus::Ok);
        assert_eq!(data(a), data(b), "a reloaded record must edit identically");

        let mut rec = ptr::null_mut();
        assert_eq!(videdit_reconstruct(s, r, &mut rec), VideditStatus::Ok);
        assert_eq!(data(rec).0, shape);

        assert_eq!(videdit_video_write(a, frames_dir.as_ptr()), VideditStatus::Ok);
        let mut read = ptr::null_mut();
        assert_eq!(videdit_video_read(frames_dir.as_ptr(), &mut read), VideditStatus::Ok);
        assert_eq!(data(read).0, shape);

        for p in [v, a, b, rec, read] {
            videdit_video_free(p);
        }
        videdit_record_free(r);
        videdit_record_free(r2);
        videdit_session_free(s);
    }
}

#[test]
fn record_from_another_model_is_rejected() {
    let s = session();
    let other = CString::new(TINY.replace("groups = 4", "groups = 4\nseed = 9")).unwrap();
    let mut s2 = ptr::null_mut();
    unsafe {
        assert_eq!(videdit_session_new(other.as_ptr(), &mut s2), VideditStatus::Ok);
        assert_eq!(videdit_session_init_model(s2), VideditStatus::Ok);
        let mut v = ptr::null_mut();
        let mut r = ptr::null_mut();
        let mut out = ptr::null_mut();
        assert_eq!(videdit_render(s, &mut v), VideditStatus::Ok);
        assert_eq!(videdit_invert(s, v, ptr::null(), &mut r), VideditStatus::Ok);
        assert_eq!(videdit_reconstruct(s2, r, &mut out), VideditStatus::InvalidInput);
        assert!(last_error().contains("different denoiser"));
        videdit_video_free(v);
        videdit_record_free(r);
        videdit_session_free(s);
        videdit_session_free(s2);
    }
}

#[test]
fn freeing_null_is_a_no_op() {
    unsafe {
        videdit_session_free(ptr::null_mut());
        videdit_video_free(ptr::null_mut());
        videdit_record_free(ptr::null_mut());
        assert_eq!(videdit_session_num_steps(ptr::null()), 0);
    }
}

/// The generated header must be valid C and declare every exported symbol.
#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/videdit.h");
    let text = std::fs::read_to_string(header).unwrap();
    for sym in ["videdit_session_new", "videdit_invert", "videdit_edit", "videdit_last_error", "VIDEDIT_STATUS_IO = 7"] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
    let Some(cc) = ["cc", "gcc", "clang"].into_iter().find(|c| std::process::Command::new(c).arg("--version").output().is_ok())
    else {
        eprintln!("no C compiler found; skipping compile check");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{header}\"\nint main(void) {{ VideditSession *s = 0; \
             VideditStatus st = videdit_session_new(0, &s); videdit_session_free(s); return (int)st; }}\n"
        ),
    )
    .unwrap();
    let out = std::process::Command::new(cc).args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"]).arg(&src).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
