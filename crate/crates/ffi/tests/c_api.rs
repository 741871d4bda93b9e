use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use stec_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(stec_last_error()) }.to_string_lossy().into_owned()
}

fn cpath(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn dataset_round_trip_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let path = cpath(&dir.path().join("ds"));
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(stec_dataset_generate(20, 4, 8, 3, &mut ds), StecStatus::Ok);
        assert_eq!(stec_dataset_len(ds), 20);
        assert_eq!(stec_dataset_save(ds, path.as_ptr()), StecStatus::Ok);

        let mut back = ptr::null_mut();
        assert_eq!(stec_dataset_load(path.as_ptr(), &mut back), StecStatus::Ok);
        let mut labels = vec![0u32; 20];
        let mut written = 0;
        assert_eq!(stec_dataset_labels(back, labels.as_mut_ptr(), 20, &mut written), StecStatus::Ok);
        assert_eq!(written, 20);
        assert_eq!(labels[..5], [0, 1, 2, 3, 0]);

        let mut small = [0u32; 3];
        assert_eq!(stec_dataset_labels(back, small.as_mut_ptr(), 3, &mut written), StecStatus::BufferTooSmall);
        assert_eq!(written, 20);
        stec_dataset_free(ds);
        stec_dataset_free(back);
        stec_dataset_free(ptr::null_mut());
    }
}

#[test]
fn errors_carry_status_and_message() {
    let missing = CString::new("/nonexistent/stec/ds").unwrap();
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(stec_dataset_load(missing.as_ptr(), &mut ds), StecStatus::Io);
        assert!(last_error().contains("/nonexistent/stec/ds"));
        assert_eq!(stec_dataset_load(ptr::null(), &mut ds), StecStatus::NullPointer);
        assert_eq!(stec_dataset_generate(10, 1, 8, 0, &mut ds), StecStatus::InvalidArgument);
        assert!(ds.is_null());
        assert_eq!(stec_dataset_len(ptr::null()), 0);
    }
}

#[test]
fn train_then_encode_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(
        &cfg,
        "method = \"stec\"\nsynthetic_n = 16\nsynthetic_classes = 4\nresolution = 8\nepochs = 1\nbatch_size = 8\n\
         encoder_widths = [16]\nfeature_dim = 8\nproj_hidden = 16\nproj_dim = 8\nmanip_hidden = 16\nwarmup_epochs = 0\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    unsafe {
        assert_eq!(stec_train(cpath(&cfg).as_ptr(), cpath(&out).as_ptr()), StecStatus::Ok, "{}", last_error());
        let mut ckpt = ptr::null_mut();
        assert_eq!(stec_checkpoint_load(cpath(&out.join("checkpoint")).as_ptr(), &mut ckpt), StecStatus::Ok);
        assert_eq!(stec_checkpoint_step(ckpt), 2);
        assert_eq!(stec_checkpoint_feature_dim(ckpt), 8);

        let mut ds = ptr::null_mut();
        assert_eq!(stec_dataset_generate(16, 4, 8, 0, &mut ds), StecStatus::Ok);
        let mut feats = vec![0.0; 16 * 8];
        let mut written = 0;
        assert_eq!(stec_encode(ckpt, ds, feats.as_mut_ptr(), feats.len(), &mut written), StecStatus::Ok);
        assert_eq!(written, 128);
        assert!(feats.iter().all(|v| v.is_finite()) && feats.iter().any(|v| *v != 0.0));

        let mut wrong = ptr::null_mut();
        assert_eq!(stec_dataset_generate(4, 2, 16, 0, &mut wrong), StecStatus::Ok);
        let mut buf = vec![0.0; 4 * 8];
        assert_eq!(stec_encode(ckpt, wrong, buf.as_mut_ptr(), buf.len(), &mut written), StecStatus::InvalidArgument);
        stec_dataset_free(wrong);
        stec_dataset_free(ds);
        stec_checkpoint_free(ckpt);
    }
}

#[test]
fn missing_config_is_config_error() {
    let p = CString::new("/nonexistent/missing.toml").unwrap();
    assert_eq!(unsafe { stec_train(p.as_ptr(), ptr::null()) }, StecStatus::Config);
}

#[test]
fn ego_action_of_identical_views_is_identity() {
    let full = StecCrop {
        source_width: 32,
        source_height: 32,
        left: 0,
        top: 0,
        width: 32,
        height: 32,
        mirrored: false,
    };
    let half = StecCrop { width: 16, ..full };
    let mut action = [0.0; 6];
    let mut labels = [0usize; 6];
    unsafe {
        assert_eq!(stec_ego_action(&full, &full, 6, action.as_mut_ptr(), labels.as_mut_ptr()), StecStatus::Ok);
        assert_eq!(action, [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(labels, [4, 3, 3, 3, 4, 3]);
        assert_eq!(stec_ego_action(&full, &half, 6, action.as_mut_ptr(), labels.as_mut_ptr()), StecStatus::Ok);
        assert_eq!(action, [0.5, 0.0, -0.5, 0.0, 1.0, 0.0]);
        let empty = StecCrop { width: 0, ..full };
        assert_eq!(
            stec_ego_action(&full, &empty, 6, action.as_mut_ptr(), labels.as_mut_ptr()),
            StecStatus::InvalidArgument
        );
        assert_eq!(stec_ego_action(&full, &full, 1, action.as_mut_ptr(), labels.as_mut_ptr()), StecStatus::Config);
    }
}

#[test]
fn verify_suite_through_c_api() {
    assert_eq!(stec_verify(StecSuite::Decomposition, 50, 0), StecStatus::Ok);
    assert_eq!(stec_verify(StecSuite::Affine, 50, 0), StecStatus::Ok);
}

#[test]
fn version_is_nul_terminated() {
    let v = unsafe { CStr::from_ptr(stec_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/stec.h");
    let text = std::fs::read_to_string(header).unwrap();
    for name in ["stec_dataset_generate", "stec_encode", "stec_last_error", "STEC_STATUS_OK", "StecCheckpoint"] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let Ok(out) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header])
        .output()
    else {
        eprintln!("no C compiler found; syntax check skipped");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
