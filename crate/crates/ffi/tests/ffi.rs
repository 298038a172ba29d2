use std::ffi::{CStr, CString};
use std::ptr;

use gjeval_ffi::*;

fn last_error() -> String {
    let p = gj_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

const CSV: &str = "image_id,patient_id,true_label,p_aegja,p_eegja,p_control\n\
i1,p1,A-EGJA,0.7,0.2,0.1\n\
i2,p1,A-EGJA,0.2,0.7,0.1\n\
i3,p2,E-EGJA,0.1,0.8,0.1\n\
i4,p3,control,0.1,0.1,0.8\n";

#[test]
fn scalar_functions() {
    assert!((gj_chi2_sf(3.0, 2) - (-1.5f64).exp()).abs() < 1e-12);
    assert!((gj_normal_cdf(0.0) - 0.5).abs() < 1e-15);
    let (mut lo, mut hi) = (0.0, 0.0);
    assert_eq!(unsafe { gj_wald_ci(0.9256, 914.0, &mut lo, &mut hi) }, GjStatus::Ok);
    assert_eq!(format!("{lo:.4} {hi:.4}"), "0.9086 0.9426");
}

#[test]
fn wald_rejects_bad_input_with_message() {
    let (mut lo, mut hi) = (0.0, 0.0);
    assert_eq!(unsafe { gj_wald_ci(1.5, 10.0, &mut lo, &mut hi) }, GjStatus::InvalidArgument);
    assert!(last_error().contains("p=1.5"));
    assert_eq!(unsafe { gj_wald_ci(0.5, 10.0, ptr::null_mut(), &mut hi) }, GjStatus::NullPointer);
    // success clears the message
    assert_eq!(unsafe { gj_wald_ci(0.5, 10.0, &mut lo, &mut hi) }, GjStatus::Ok);
    assert!(gj_last_error().is_null());
}

#[test]
fn kappa_and_bowker() {
    let diag = [5.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 5.0];
    let mut k = 0.0;
    assert_eq!(unsafe { gj_kappa(diag.as_ptr(), &mut k) }, GjStatus::Ok);
    assert_eq!(k, 1.0);

    let t = [0.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let mut r = GjTest::default();
    assert_eq!(unsafe { gj_bowker(t.as_ptr(), &mut r) }, GjStatus::Ok);
    assert_eq!((r.statistic, r.df), (4.0, 1));
    assert!((r.p - 0.0455).abs() < 1e-3);

    let zero = [0.0; 9];
    assert_eq!(unsafe { gj_kappa(zero.as_ptr(), &mut k) }, GjStatus::Degenerate);
    let neg = [-1.0; 9];
    assert_eq!(unsafe { gj_bowker(neg.as_ptr(), &mut r) }, GjStatus::InvalidArgument);
}

#[test]
fn delong_identical_scores_is_degenerate() {
    let s = [0.1, 0.4, 0.35, 0.8];
    let y = [0u8, 0, 1, 1];
    let mut out = GjDeLong::default();
    assert_eq!(unsafe { gj_delong(s.as_ptr(), s.as_ptr(), y.as_ptr(), 4, &mut out) }, GjStatus::Ok);
    assert_eq!(out.auc_a, 0.75);
    assert_eq!(out.test.p, 1.0);
    assert_eq!(out.test.degenerate, 1);
    let all_pos = [1u8; 4];
    assert_eq!(
        unsafe { gj_delong(s.as_ptr(), s.as_ptr(), all_pos.as_ptr(), 4, &mut out) },
        GjStatus::InvalidArgument
    );
}

#[test]
fn dataset_report_round_trip() {
    let csv = CString::new(CSV).unwrap();
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { gj_dataset_from_csv(csv.as_ptr(), 1, &mut ds) }, GjStatus::Ok);
    assert_eq!(unsafe { gj_dataset_len(ds) }, 4);

    let mut rep = ptr::null_mut();
    assert_eq!(unsafe { gj_evaluate(ds, GjLevel::Patient, &mut rep) }, GjStatus::Ok);
    let (mut v, mut lo, mut hi) = (0.0, 0.0, 0.0);
    assert_eq!(unsafe { gj_report_accuracy(rep, &mut v, &mut lo, &mut hi) }, GjStatus::Ok);
    // p1 averages to (0.45, 0.45, 0.1): the tie goes to A-EGJA
    assert_eq!(v, 1.0);

    let mut json = ptr::null_mut();
    assert_eq!(unsafe { gj_report_json(rep, &mut json) }, GjStatus::Ok);
    let parsed: serde_json::Value = serde_json::from_str(unsafe { CStr::from_ptr(json) }.to_str().unwrap()).unwrap();
    assert_eq!(parsed["level"], "patient");
    assert_eq!(parsed["n"], 3.0);
    unsafe {
        gj_string_free(json);
        gj_report_free(rep);
        gj_dataset_free(ds);
    }
}

#[test]
fn parse_errors_leave_null_handle() {
    let csv = CString::new("image_id,patient_id\nx,y\n").unwrap();
    let mut ds = ptr::dangling_mut::<GjDataset>();
    assert_eq!(unsafe { gj_dataset_from_csv(csv.as_ptr(), 0, &mut ds) }, GjStatus::Parse);
    assert!(ds.is_null());
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { gj_dataset_from_csv(ptr::null(), 0, &mut ds) }, GjStatus::NullPointer);
    let mut rep = ptr::null_mut();
    assert_eq!(unsafe { gj_evaluate(ptr::null(), GjLevel::Image, &mut rep) }, GjStatus::NullPointer);
}

#[test]
fn head_json_and_predict() {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { gj_head_init(4, 3, 2, 0.1, 7, &mut h) }, GjStatus::Ok);
    let mut json = ptr::null_mut();
    assert_eq!(unsafe { gj_head_to_json(h, &mut json) }, GjStatus::Ok);
    let mut h2 = ptr::null_mut();
    assert_eq!(unsafe { gj_head_from_json(json, &mut h2) }, GjStatus::Ok);

    let dino = [0.5, -1.0, 0.25, 2.0];
    let res = [1.0, 0.0, -0.5];
    let (mut p1, mut p2) = ([0.0; 3], [0.0; 3]);
    assert_eq!(unsafe { gj_head_predict(h, dino.as_ptr(), 4, res.as_ptr(), 3, p1.as_mut_ptr()) }, GjStatus::Ok);
    assert_eq!(unsafe { gj_head_predict(h2, dino.as_ptr(), 4, res.as_ptr(), 3, p2.as_mut_ptr()) }, GjStatus::Ok);
    assert_eq!(p1, p2);
    assert!((p1.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    assert_eq!(
        unsafe { gj_head_predict(h, dino.as_ptr(), 3, res.as_ptr(), 3, p1.as_mut_ptr()) },
        GjStatus::InvalidArgument
    );
    let bad = CString::new("{}").unwrap();
    let mut h3 = ptr::null_mut();
    assert_eq!(unsafe { gj_head_from_json(bad.as_ptr(), &mut h3) }, GjStatus::Parse);
    assert_eq!(unsafe { gj_head_init(0, 3, 2, 0.1, 7, &mut h3) }, GjStatus::InvalidArgument);
    unsafe {
        gj_string_free(json);
        gj_head_free(h);
        gj_head_free(h2);
        gj_head_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/gjeval.h");
    let src = include_str!("../src/lib.rs");
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/gjeval.h");
    let status = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header])
        .status();
    match status {
        Ok(s) => assert!(s.success()),
        Err(e) => eprintln!("skipping: no C compiler ({e})"),
    }
}
