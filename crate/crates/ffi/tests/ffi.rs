use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use strumpl_ffi::*;

const CONFIG: &str = r#"
[world]
patch_size = 6
n_gedi = 16
n_plot = 8
[model]
d = 4
encoder_blocks = 1
[train]
batch_size = 4
max_epochs = 1
warmup_steps = 1
val_every_steps = 2
"#;

fn last_error() -> String {
    let p = strumpl_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn generate_train_predict_round_trip() {
    let cfg = CString::new(CONFIG).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = CString::new(tmp.path().join("run").to_str().unwrap()).unwrap();
    let data_dir = CString::new(tmp.path().join("data").to_str().unwrap()).unwrap();
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(strumpl_dataset_generate(cfg.as_ptr(), &mut ds), StrumplStatus::Ok);
        assert!(strumpl_last_error().is_null());
        let mut n = 0usize;
        assert_eq!(strumpl_dataset_len(ds, StrumplSplit::Test, &mut n), StrumplStatus::Ok);
        assert!(n > 0);
        assert_eq!(strumpl_dataset_save(ds, data_dir.as_ptr()), StrumplStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(strumpl_dataset_load(data_dir.as_ptr(), &mut loaded), StrumplStatus::Ok);

        let mut m = ptr::null_mut();
        assert_eq!(strumpl_train(loaded, cfg.as_ptr(), run_dir.as_ptr(), &mut m), StrumplStatus::Ok);
        let (mut c_in, mut k) = (0usize, 0usize);
        assert_eq!(strumpl_model_shape(m, &mut c_in, &mut k), StrumplStatus::Ok);
        assert_eq!((c_in, k), (8, 5));

        let x = vec![0.1; c_in * 6 * 6];
        let mut y = vec![f64::NAN; k * 36];
        assert_eq!(
            strumpl_model_predict(m, x.as_ptr(), c_in, 6, 6, y.as_mut_ptr(), y.len()),
            StrumplStatus::Ok
        );
        assert!(y.iter().all(|v| v.is_finite()));

        let mut reloaded = ptr::null_mut();
        assert_eq!(strumpl_model_load(run_dir.as_ptr(), &mut reloaded), StrumplStatus::Ok);
        let mut y2 = vec![0.0; k * 36];
        assert_eq!(
            strumpl_model_predict(reloaded, x.as_ptr(), c_in, 6, 6, y2.as_mut_ptr(), y2.len()),
            StrumplStatus::Ok
        );
        assert_eq!(y, y2);

        let (mut rmse, mut bias) = (vec![0.0; k], vec![0.0; k]);
        assert_eq!(strumpl_evaluate(m, ds, rmse.as_mut_ptr(), bias.as_mut_ptr(), k), StrumplStatus::Ok);
        assert!(rmse.iter().all(|r| r.is_finite() && *r >= 0.0));

        strumpl_model_free(reloaded);
        strumpl_model_free(m);
        strumpl_dataset_free(loaded);
        strumpl_dataset_free(ds);
    }
}

#[test]
fn errors_set_codes_and_messages() {
    unsafe {
        let mut ds = ptr::null_mut();
        let bad = CString::new("seeds = []").unwrap();
        assert_eq!(strumpl_dataset_generate(bad.as_ptr(), &mut ds), StrumplStatus::Config);
        assert!(last_error().contains("seed"));

        let missing = CString::new("/nonexistent/strumpl/data").unwrap();
        assert_eq!(strumpl_dataset_load(missing.as_ptr(), &mut ds), StrumplStatus::Missing);
        assert_eq!(strumpl_dataset_load(ptr::null(), &mut ds), StrumplStatus::NullPointer);
        assert_eq!(strumpl_dataset_generate(ptr::null(), ptr::null_mut()), StrumplStatus::NullPointer);
        let mut n = 0usize;
        assert_eq!(strumpl_dataset_len(ptr::null(), StrumplSplit::Train, &mut n), StrumplStatus::NullPointer);

        strumpl_dataset_free(ptr::null_mut());
        strumpl_model_free(ptr::null_mut());
    }
}

#[test]
fn predict_rejects_bad_shapes() {
    let cfg = CString::new(CONFIG).unwrap();
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(strumpl_dataset_generate(cfg.as_ptr(), &mut ds), StrumplStatus::Ok);
        let mut m = ptr::null_mut();
        assert_eq!(strumpl_train(ds, cfg.as_ptr(), ptr::null(), &mut m), StrumplStatus::Ok);
        let x = vec![0.0; 3 * 4 * 4];
        let mut y = vec![0.0; 5 * 16];
        assert_eq!(
            strumpl_model_predict(m, x.as_ptr(), 3, 4, 4, y.as_mut_ptr(), y.len()),
            StrumplStatus::Incompatible
        );
        let x = vec![0.0; 8 * 16];
        assert_eq!(
            strumpl_model_predict(m, x.as_ptr(), 8, 4, 4, y.as_mut_ptr(), 7),
            StrumplStatus::InvalidArgument
        );
        let mut r = vec![0.0; 2];
        let mut b = vec![0.0; 2];
        assert_eq!(strumpl_evaluate(m, ds, r.as_mut_ptr(), b.as_mut_ptr(), 2), StrumplStatus::InvalidArgument);
        strumpl_model_free(m);
        strumpl_dataset_free(ds);
    }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(strumpl_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/strumpl.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "strumpl_last_error",
        "strumpl_dataset_generate",
        "strumpl_dataset_free",
        "strumpl_train",
        "strumpl_model_predict",
        "strumpl_model_free",
        "STRUMPL_STATUS_INCOMPATIBLE = 4",
        "typedef struct StrumplModel StrumplModel",
    ] {
        assert!(text.contains(name), "{name}");
    }
    // Only when a C compiler is around.
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"strumpl.h\"\nint main(void) { StrumplModel *m = NULL; strumpl_model_free(m); return strumpl_last_error() != NULL; }\n",
    )
    .unwrap();
    if let Ok(status) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .status()
    {
        assert!(status.success());
    }
}
