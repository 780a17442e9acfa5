use std::ffi::{CStr, CString};
use std::ptr;

use clusterharm_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(ch_last_error()) }.to_string_lossy().into_owned()
}

/// Six sites of four rows, two features, one covariate; sites 0-2 and 3-5
/// carry different offsets.
fn dataset() -> *mut ChDataset {
    let (n, g) = (24, 2);
    let mut feats = Vec::new();
    let mut covs = Vec::new();
    for i in 0..n {
        let site = i / 4;
        let shift = if site < 3 { 0.0 } else { 10.0 };
        let x = (i % 4) as f64;
        covs.push(x);
        feats.push(1.0 + 0.5 * x + shift + ((i * 7) % 5) as f64 * 0.3);
        feats.push(-2.0 + x - shift + ((i * 3) % 4) as f64 * 0.2);
    }
    let ids: Vec<CString> = (0..n).map(|i| CString::new(format!("s{}", i / 4)).unwrap()).collect();
    let ptrs: Vec<*const std::ffi::c_char> = ids.iter().map(|s| s.as_ptr()).collect();
    let mut ds = ptr::null_mut();
    let st = unsafe { ch_dataset_new(feats.as_ptr(), n, g, covs.as_ptr(), 1, ptrs.as_ptr(), &mut ds) };
    assert_eq!(st, ChStatus::Ok, "{}", last_error());
    ds
}

#[test]
fn fit_harmonize_and_round_trip() {
    let ds = dataset();
    let (mut n, mut g, mut p, mut m) = (0, 0, 0, 0);
    unsafe {
        assert_eq!(ch_dataset_shape(ds, &mut n, &mut g, &mut p, &mut m), ChStatus::Ok);
        assert_eq!((n, g, p, m), (24, 2, 1, 6));

        let mut opts = ch_fit_options_default();
        opts.algorithm = ChAlgorithm::ClusterCombat as i32;
        opts.n_clusters = 2;
        let mut model = ptr::null_mut();
        assert_eq!(ch_model_fit(ds, &opts, &mut model), ChStatus::Ok, "{}", last_error());

        let mut out = vec![0.0; n * g];
        assert_eq!(ch_model_harmonize(model, ds, out.as_mut_ptr(), out.len()), ChStatus::Ok);
        assert!(out.iter().all(|v| v.is_finite()));

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("m.json").to_str().unwrap()).unwrap();
        assert_eq!(ch_model_save(model, path.as_ptr()), ChStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(ch_model_load(path.as_ptr(), &mut loaded), ChStatus::Ok);
        let mut again = vec![0.0; n * g];
        assert_eq!(ch_model_onboard(loaded, ds, again.as_mut_ptr(), again.len()), ChStatus::Ok);
        assert_eq!(out, again);

        let mut json = ptr::null_mut();
        assert_eq!(ch_model_to_json(loaded, &mut json), ChStatus::Ok);
        assert!(CStr::from_ptr(json).to_str().unwrap().contains("\"cluster-combat\""));
        ch_string_free(json);

        ch_model_free(model);
        ch_model_free(loaded);
        ch_dataset_free(ds);
    }
}

#[test]
fn errors_are_reported() {
    let ds = dataset();
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(ch_model_fit(ds, ptr::null(), &mut model), ChStatus::NullPointer);
        assert!(last_error().contains("opts"));

        let mut opts = ch_fit_options_default();
        opts.algorithm = 42;
        assert_eq!(ch_model_fit(ds, &opts, &mut model), ChStatus::InvalidArgument);

        opts.algorithm = ChAlgorithm::Combat as i32;
        assert_eq!(ch_model_fit(ds, &opts, &mut model), ChStatus::Ok);
        assert_eq!(last_error(), "");
        let mut small = [0.0; 3];
        assert_eq!(ch_model_harmonize(model, ds, small.as_mut_ptr(), 3), ChStatus::BufferTooSmall);
        let mut out = vec![0.0; 48];
        assert_eq!(ch_model_onboard(model, ds, out.as_mut_ptr(), 48), ChStatus::ModelMismatch);

        let missing = CString::new("/nonexistent/model.json").unwrap();
        let mut m2 = ptr::null_mut();
        assert_eq!(ch_model_load(missing.as_ptr(), &mut m2), ChStatus::Io);
        assert!(m2.is_null());

        ch_model_free(model);
        ch_dataset_free(ds);
        ch_dataset_free(ptr::null_mut());
    }
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(ch_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
