use std::ffi::{CStr, CString};
use std::ptr;

use crossscale_ffi::*;

fn last_error() -> String {
    let p = csn_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

const CONFIG: &str = r#"{"lookback":16,"horizon":4,"n_features":2,"n_scales":2,"patch_len":4,
    "decomp_kernel":3,"hidden_dim":8,"variant":"cross_dual_key","instance_norm":true}"#;

fn new_model(seed: u64) -> *mut CsnModel {
    let json = CString::new(CONFIG).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(
        unsafe { csn_model_new(json.as_ptr(), seed, &mut model) },
        CsnStatus::Ok
    );
    assert!(!model.is_null());
    model
}

#[test]
fn forward_save_load_round_trip() {
    let model = new_model(3);
    let (mut t, mut h, mut d) = (0, 0, 0);
    assert_eq!(
        unsafe { csn_model_dims(model, &mut t, &mut h, &mut d) },
        CsnStatus::Ok
    );
    assert_eq!((t, h, d), (16, 4, 2));

    let input: Vec<f64> = (0..2 * 16 * 2).map(|i| (i as f64 * 0.3).sin()).collect();
    let mut out = vec![0.0; 2 * 4 * 2];
    let status = unsafe {
        csn_model_forward(
            model,
            input.as_ptr(),
            input.len(),
            2,
            out.as_mut_ptr(),
            out.len(),
        )
    };
    assert_eq!(status, CsnStatus::Ok);
    assert!(out.iter().all(|v| v.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { csn_model_save(model, path.as_ptr()) },
        CsnStatus::Ok
    );
    let mut loaded = ptr::null_mut();
    assert_eq!(
        unsafe { csn_model_load(path.as_ptr(), &mut loaded) },
        CsnStatus::Ok
    );
    let mut again = vec![0.0; out.len()];
    let status = unsafe {
        csn_model_forward(
            loaded,
            input.as_ptr(),
            input.len(),
            2,
            again.as_mut_ptr(),
            again.len(),
        )
    };
    assert_eq!(status, CsnStatus::Ok);
    assert_eq!(out, again);

    let mut saliency = vec![0.0; 16];
    let status = unsafe {
        csn_model_saliency(
            model,
            input.as_ptr(),
            input.len(),
            2,
            saliency.as_mut_ptr(),
            16,
        )
    };
    assert_eq!(status, CsnStatus::Ok);
    assert!(saliency.iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(saliency.iter().copied().fold(0.0, f64::max), 1.0);

    unsafe {
        csn_model_free(model);
        csn_model_free(loaded);
    }
}

#[test]
fn argument_errors_map_to_status_codes() {
    let model = new_model(1);
    let input = vec![0.0; 16 * 2];
    let mut out = vec![0.0; 8];
    unsafe {
        assert_eq!(
            csn_model_forward(
                model,
                input.as_ptr(),
                input.len() - 1,
                1,
                out.as_mut_ptr(),
                8
            ),
            CsnStatus::Shape
        );
        assert!(last_error().contains("expected"));
        assert_eq!(
            csn_model_forward(model, input.as_ptr(), input.len(), 1, out.as_mut_ptr(), 7),
            CsnStatus::BufferTooSmall
        );
        assert_eq!(
            csn_model_forward(
                ptr::null(),
                input.as_ptr(),
                input.len(),
                1,
                out.as_mut_ptr(),
                8
            ),
            CsnStatus::NullPointer
        );
        assert_eq!(
            csn_model_forward(model, ptr::null(), 0, 1, out.as_mut_ptr(), 8),
            CsnStatus::NullPointer
        );

        let bad = CString::new(
            r#"{"lookback":16,"horizon":4,"n_features":2,"n_scales":2,"patch_len":32,
            "decomp_kernel":3,"hidden_dim":8,"variant":"cross_dual_key","instance_norm":true}"#,
        )
        .unwrap();
        let mut m = ptr::null_mut();
        assert_eq!(
            csn_model_new(bad.as_ptr(), 0, &mut m),
            CsnStatus::InvalidArgument
        );
        assert!(m.is_null());
        let junk = CString::new("{").unwrap();
        assert_eq!(
            csn_model_new(junk.as_ptr(), 0, &mut m),
            CsnStatus::Checkpoint
        );
        assert_eq!(
            csn_model_new(ptr::null(), 0, &mut m),
            CsnStatus::NullPointer
        );

        let missing = CString::new("/nonexistent/model.ckpt").unwrap();
        assert_eq!(csn_model_load(missing.as_ptr(), &mut m), CsnStatus::Io);
        csn_model_free(model);
        csn_model_free(ptr::null_mut());
    }
}

#[test]
fn synthetic_dataset_through_handles() {
    let name = CString::new("SYN1").unwrap();
    let mut data = ptr::null_mut();
    unsafe {
        assert_eq!(
            csn_synth_generate(name.as_ptr(), 200, 42, &mut data),
            CsnStatus::Ok
        );
        let (mut rows, mut cols) = (0, 0);
        assert_eq!(csn_dataset_shape(data, &mut rows, &mut cols), CsnStatus::Ok);
        assert_eq!((rows, cols), (185, 7));
        let mut values = vec![0.0; rows * cols];
        assert_eq!(
            csn_dataset_values(data, values.as_mut_ptr(), values.len()),
            CsnStatus::Ok
        );
        assert!(values.iter().all(|v| v.is_finite()));
        assert_eq!(
            csn_dataset_values(data, values.as_mut_ptr(), 3),
            CsnStatus::BufferTooSmall
        );

        let mut mask = vec![0u8; 96 * 6];
        assert_eq!(
            csn_dataset_mask(data, 96, mask.as_mut_ptr(), mask.len()),
            CsnStatus::Ok
        );
        assert_eq!(mask.iter().filter(|&&b| b == 1).count(), 15 * 2);
        assert_eq!(mask[95 * 6], 1);
        assert_eq!(
            csn_dataset_mask(data, 10, mask.as_mut_ptr(), mask.len()),
            CsnStatus::InvalidArgument
        );
        csn_dataset_free(data);

        let unknown = CString::new("SYN0").unwrap();
        assert_eq!(
            csn_synth_generate(unknown.as_ptr(), 200, 42, &mut data),
            CsnStatus::InvalidArgument
        );
        assert!(last_error().contains("SYN0"));
    }
}

#[test]
fn header_declares_the_interface() {
    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/crossscale.h"))
            .unwrap();
    for name in [
        "csn_model_new",
        "csn_model_load",
        "csn_model_forward",
        "csn_model_saliency",
        "csn_synth_generate",
        "csn_last_error",
        "CSN_STATUS_BUFFER_TOO_SMALL",
        "typedef struct CsnModel CsnModel",
    ] {
        assert!(header.contains(name), "{name}");
    }
}
