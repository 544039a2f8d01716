use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use promptsci_ffi::*;

unsafe fn matrix(cols: &[&[i32]], n_categories: usize, ordinal: bool) -> *mut PsLabelMatrix {
    let n_items = cols[0].len();
    let m = ps_matrix_new(n_items, cols.len(), n_categories, ordinal as i32);
    assert!(!m.is_null());
    for (r, col) in cols.iter().enumerate() {
        for (i, &c) in col.iter().enumerate() {
            assert_eq!(ps_matrix_set(m, i, r, c), PsStatus::Ok);
        }
    }
    m
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(ps_last_error()) }.to_string_lossy().into_owned()
}

unsafe fn take(s: *mut std::ffi::c_char) -> String {
    let out = CStr::from_ptr(s).to_string_lossy().into_owned();
    ps_string_free(s);
    out
}

#[test]
fn kappa_pair_count_fixture() {
    // both-P 20, P/N 5, N/P 10, both-N 15.
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (x, y, n) in [(1, 1, 20), (1, 0, 5), (0, 1, 10), (0, 0, 15)] {
        a.extend(std::iter::repeat(x).take(n));
        b.extend(std::iter::repeat(y).take(n));
    }
    unsafe {
        let m = matrix(&[&a, &b], 2, false);
        let mut k = f64::NAN;
        assert_eq!(ps_cohens_kappa(m, &mut k), PsStatus::Ok);
        assert!((k - 0.4).abs() < 1e-12, "{k}");
        let mut p = f64::NAN;
        assert_eq!(ps_percent_agreement(m, &mut p), PsStatus::Ok);
        assert!((p - 0.7).abs() < 1e-12);
        ps_matrix_free(m);
    }
}

#[test]
fn kappa_edges_and_alpha_golden() {
    unsafe {
        let m = matrix(&[&[0, 0, 1, 1], &[1, 1, 0, 0]], 2, false);
        let mut k = 0.0;
        assert_eq!(ps_cohens_kappa(m, &mut k), PsStatus::Ok);
        assert!((k + 1.0).abs() < 1e-12);
        ps_matrix_free(m);

        let m = matrix(&[&[0, 1, 2, 1], &[0, 1, 2, 1]], 3, false);
        assert_eq!(ps_cohens_kappa(m, &mut k), PsStatus::Ok);
        assert!((k - 1.0).abs() < 1e-12);
        ps_matrix_free(m);

        // A=(a,b,b,b), B=(a,a,b,b) → α = 8/15.
        let m = matrix(&[&[0, 1, 1, 1], &[0, 0, 1, 1]], 2, false);
        let mut alpha = 0.0;
        assert_eq!(ps_krippendorff_alpha(m, &mut alpha), PsStatus::Ok);
        assert!((alpha - 8.0 / 15.0).abs() < 1e-9, "{alpha}");
        ps_matrix_free(m);
    }
}

#[test]
fn undefined_and_invalid_inputs() {
    unsafe {
        let m = matrix(&[&[0, 0, 0], &[0, 0, 0]], 2, false);
        let mut v = 0.0;
        assert_eq!(ps_krippendorff_alpha(m, &mut v), PsStatus::Undefined);
        assert!(!last_error().is_empty());
        assert_eq!(ps_matrix_set(m, 7, 0, 1), PsStatus::InvalidArgument);
        assert_eq!(ps_matrix_set(m, 0, 0, 5), PsStatus::InvalidArgument);
        assert_eq!(ps_krippendorff_alpha(m, ptr::null_mut()), PsStatus::NullPointer);
        ps_matrix_free(m);

        let m = ps_matrix_new(3, 2, 2, 0);
        assert_eq!(ps_matrix_set(m, 0, 0, 1), PsStatus::Ok);
        assert_eq!(ps_cohens_kappa(m, &mut v), PsStatus::EmptyMatrix);
        ps_matrix_free(m);

        let m = ps_matrix_new(3, 3, 2, 0);
        ps_matrix_set(m, 0, 1, 1);
        assert_eq!(ps_cohens_kappa(m, &mut v), PsStatus::InvalidArgument);
        assert!(last_error().contains("exactly 2 raters"));
        ps_matrix_free(m);

        assert!(ps_matrix_new(3, 1, 2, 0).is_null());
        assert!(ps_matrix_new(3, 2, 0, 0).is_null());
        assert_eq!(ps_cohens_kappa(ptr::null(), &mut v), PsStatus::NullPointer);
        ps_matrix_free(ptr::null_mut());
        ps_string_free(ptr::null_mut());
    }
}

#[test]
fn ordinal_alpha_differs_from_nominal() {
    unsafe {
        let cols: [&[i32]; 2] = [&[0, 1, 2, 3, 0, 2], &[1, 1, 2, 2, 0, 3]];
        let (mut nominal, mut ordinal) = (0.0, 0.0);
        let m = matrix(&cols, 4, false);
        assert_eq!(ps_krippendorff_alpha(m, &mut nominal), PsStatus::Ok);
        ps_matrix_free(m);
        let m = matrix(&cols, 4, true);
        assert_eq!(ps_krippendorff_alpha(m, &mut ordinal), PsStatus::Ok);
        ps_matrix_free(m);
        assert!(ordinal > nominal, "{ordinal} vs {nominal}");
    }
}

#[test]
fn simulate_verify_and_report() {
    unsafe {
        let name = CString::new("probe-generation").unwrap();
        let mut bundle = ptr::null_mut();
        assert_eq!(ps_simulate(name.as_ptr(), 0, 0, &mut bundle), PsStatus::Ok, "{}", last_error());

        let mut count = usize::MAX;
        let mut list = ptr::null_mut();
        assert_eq!(ps_bundle_verify(bundle, &mut count, &mut list), PsStatus::Ok);
        assert_eq!(count, 0);
        assert_eq!(take(list), "[]");

        let mut md = ptr::null_mut();
        assert_eq!(ps_bundle_report(bundle, &mut md), PsStatus::Ok);
        assert!(take(md).contains("0.50 → 0.70 → 0.82"));

        let mut json = ptr::null_mut();
        assert_eq!(ps_bundle_to_json(bundle, &mut json), PsStatus::Ok);
        let text = take(json);
        ps_bundle_free(bundle);

        // Tamper with a stored deliberation list and re-verify.
        let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
        value["deliberations"].as_array_mut().unwrap().remove(0);
        let tampered = CString::new(value.to_string()).unwrap();
        let mut parsed = ptr::null_mut();
        assert_eq!(ps_bundle_parse(tampered.as_ptr(), &mut parsed), PsStatus::Ok);
        assert_eq!(ps_bundle_verify(parsed, &mut count, ptr::null_mut()), PsStatus::Violations);
        assert!(count >= 1);
        let mut md = ptr::null_mut();
        assert_eq!(ps_bundle_report(parsed, &mut md), PsStatus::Violations);
        assert!(md.is_null());
        ps_bundle_free(parsed);

        let junk = CString::new("{").unwrap();
        assert_eq!(ps_bundle_parse(junk.as_ptr(), &mut parsed), PsStatus::Malformed);
        assert_eq!(ps_simulate(junk.as_ptr(), 0, 0, &mut parsed), PsStatus::Malformed);
        assert_eq!(ps_simulate(ptr::null(), 0, 0, &mut parsed), PsStatus::NullPointer);
    }
}

#[test]
fn header_declares_the_abi() {
    let header = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/promptsci.h")).unwrap();
    for name in [
        "typedef struct PsLabelMatrix PsLabelMatrix;",
        "typedef struct PsBundle PsBundle;",
        "PS_STATUS_OK = 0",
        "ps_matrix_new(",
        "ps_cohens_kappa(",
        "ps_krippendorff_alpha(",
        "ps_simulate(",
        "ps_bundle_verify(",
        "ps_string_free(",
        "ps_last_error(",
    ] {
        assert!(header.contains(name), "missing {name}");
    }
}

/// Compiles and runs a small C program against the static library when a C
/// compiler and the archive are available.
#[test]
fn c_program_links_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let target = std::env::var_os("CARGO_TARGET_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| manifest.join("../../target"));
    let profile = if cfg!(debug_assertions) { "debug" } else { "release" };
    let archive = target.join(profile).join("libpromptsci_ffi.a");
    if !archive.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no archive at {} or no cc", archive.display());
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include <math.h>
#include "promptsci.h"
int main(void) {
    PsLabelMatrix *m = ps_matrix_new(4, 2, 2, 0);
    int a[4] = {0, 1, 1, 1}, b[4] = {0, 0, 1, 1};
    for (size_t i = 0; i < 4; i++) { ps_matrix_set(m, i, 0, a[i]); ps_matrix_set(m, i, 1, b[i]); }
    double alpha = 0;
    if (ps_krippendorff_alpha(m, &alpha) != PS_STATUS_OK) return 2;
    ps_matrix_free(m);
    PsBundle *bundle = NULL;
    if (ps_simulate("taxonomy-classification", 0, 0, &bundle) != PS_STATUS_OK) return 3;
    size_t n = 1;
    PsStatus s = ps_bundle_verify(bundle, &n, NULL);
    ps_bundle_free(bundle);
    printf("%.6f %zu %d\n", alpha, n, (int)s);
    return fabs(alpha - 8.0 / 15.0) < 1e-9 && n == 0 ? 0 : 1;
}
"#,
    )
    .unwrap();
    let exe = tmp.path().join("smoke");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&archive)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "0.533333 0 0");
}
