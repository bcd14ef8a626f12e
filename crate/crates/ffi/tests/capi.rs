use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use sgwsod_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = sgwsod_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn generate_save_load_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = ptr::null_mut();
    unsafe {
        assert_eq!(
            sgwsod_dataset_generate(5, 3, 8, 11, &mut ds),
            SgwsodStatus::Ok
        );
        assert_eq!(sgwsod_dataset_len(ds), 5);
        let path = cstr(dir.path());
        assert_eq!(sgwsod_dataset_save(ds, path.as_ptr()), SgwsodStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(
            sgwsod_dataset_load(path.as_ptr(), &mut back),
            SgwsodStatus::Ok
        );
        assert_eq!(sgwsod_dataset_len(back), 5);
        sgwsod_dataset_free(back);
        sgwsod_dataset_free(ds);
    }
}

#[test]
fn null_and_missing_inputs() {
    let mut ds = ptr::null_mut();
    unsafe {
        assert_eq!(
            sgwsod_dataset_load(ptr::null(), &mut ds),
            SgwsodStatus::NullArgument
        );
        assert!(last_error().contains("path"));
        let missing = CString::new("/definitely/not/here").unwrap();
        assert_eq!(
            sgwsod_dataset_load(missing.as_ptr(), &mut ds),
            SgwsodStatus::Validation
        );
        assert!(ds.is_null());
        assert_eq!(sgwsod_dataset_len(ptr::null()), 0);
        sgwsod_dataset_free(ptr::null_mut());
        sgwsod_model_free(ptr::null_mut());
        // infeasible generator config
        assert_eq!(
            sgwsod_dataset_generate(2, 0, 8, 0, &mut ds),
            SgwsodStatus::Validation
        );
    }
}

#[test]
fn train_forward_evaluate_save() {
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(
            sgwsod_dataset_generate(6, 2, 4, 3, &mut ds),
            SgwsodStatus::Ok
        );
        let mut cfg = sgwsod_train_config_default();
        assert_eq!(cfg.epochs, 20);
        assert_eq!(cfg.lr_phase1, 1e-5);
        cfg.epochs = 2;
        let widths = [8u32];
        let mut model = ptr::null_mut();
        assert_eq!(
            sgwsod_train(ds, &cfg, widths.as_ptr(), 1, 4, &mut model),
            SgwsodStatus::Ok
        );
        assert_eq!(sgwsod_model_num_classes(model), 2);

        let features = [0.5f64; 3 * 4];
        let mut phi = [0.0f64; 2 * 3];
        let mut tau = [0.0f64; 2];
        assert_eq!(
            sgwsod_forward(
                model,
                features.as_ptr(),
                3,
                4,
                phi.as_mut_ptr(),
                tau.as_mut_ptr()
            ),
            SgwsodStatus::Ok
        );
        for c in 0..2 {
            let row: f64 = phi[c * 3..(c + 1) * 3].iter().sum();
            assert!((row - tau[c]).abs() < 1e-12);
        }
        assert_eq!(
            sgwsod_forward(
                model,
                features.as_ptr(),
                3,
                5,
                phi.as_mut_ptr(),
                ptr::null_mut()
            ),
            SgwsodStatus::InvalidArgument
        );

        let mut summary = SgwsodEvalSummary::default();
        assert_eq!(
            sgwsod_evaluate(model, ds, ptr::null(), 0.5, 0.4, false, &mut summary),
            SgwsodStatus::Ok
        );
        assert!((0.0..=1.0).contains(&summary.mean_corloc));
        assert_eq!(
            sgwsod_evaluate(model, ds, ptr::null(), 1.5, 0.4, false, &mut summary),
            SgwsodStatus::Validation
        );

        let mut seeds = [0i64; 2];
        assert_eq!(
            sgwsod_select_seeds(ds, 0, 1e3, seeds.as_mut_ptr()),
            SgwsodStatus::Ok
        );
        assert!(seeds.iter().any(|&s| s >= 0));
        assert_eq!(
            sgwsod_select_seeds(ds, 99, 1e3, seeds.as_mut_ptr()),
            SgwsodStatus::InvalidArgument
        );

        let path = cstr(&dir.path().join("m.ckpt"));
        assert_eq!(sgwsod_model_save(model, path.as_ptr()), SgwsodStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(
            sgwsod_model_load(path.as_ptr(), &mut loaded),
            SgwsodStatus::Ok
        );
        assert_eq!(sgwsod_model_num_classes(loaded), 2);
        sgwsod_model_free(loaded);
        sgwsod_model_free(model);
        sgwsod_dataset_free(ds);
    }
}

#[test]
fn iou_through_c_boxes() {
    let a = SgwsodBox {
        x0: 0,
        y0: 0,
        x1: 2,
        y1: 2,
    };
    let b = SgwsodBox {
        x0: 1,
        y0: 0,
        x1: 3,
        y1: 2,
    };
    assert!((sgwsod_iou(a, b) - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(sgwsod_iou(a, a), 1.0);
    assert_eq!(
        sgwsod_iou(
            a,
            SgwsodBox {
                x0: 1,
                y0: 1,
                x1: 1,
                y1: 2
            }
        ),
        -1.0
    );
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/sgwsod.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for symbol in [
        "sgwsod_dataset_load",
        "sgwsod_train",
        "sgwsod_evaluate",
        "SGWSOD_STATUS_PANIC",
    ] {
        assert!(text.contains(symbol), "{symbol} missing from header");
    }
    let Ok(status) = Command::new("cc")
        .args(["-fsyntax-only", "-xc", "-Wall", "-Werror"])
        .arg(&header)
        .status()
    else {
        eprintln!("no C compiler found; syntax check skipped");
        return;
    };
    assert!(status.success());
}
