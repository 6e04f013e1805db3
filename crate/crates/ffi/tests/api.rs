use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use eki_ffi::*;

const A: [f64; 4] = [4.0, 0.0, 0.0, 1.0];
const GAMMA: [f64; 4] = [1.0, 0.0, 0.0, 1.0];
const Y: [f64; 2] = [0.0, 0.0];
const M0: [f64; 2] = [4.0, 4.0];
const C0: [f64; 4] = [2.0, -1.0, -1.0, 2.0];

struct Handle(*mut EkiFlow);

impl Drop for Handle {
    fn drop(&mut self) {
        unsafe { eki_flow_free(self.0) };
    }
}

fn new_flow(alpha: f64, c0: &[f64; 4]) -> Result<Handle, EkiStatus> {
    let mut out = ptr::null_mut();
    let status = unsafe {
        eki_flow_new(2, 2, A.as_ptr(), GAMMA.as_ptr(), Y.as_ptr(), M0.as_ptr(), c0.as_ptr(), alpha, &mut out)
    };
    if status == EkiStatus::Ok {
        Ok(Handle(out))
    } else {
        assert!(out.is_null());
        Err(status)
    }
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(eki_last_error()) }.to_string_lossy().into_owned()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn mean_field_flow_reaches_posterior_at_one() {
    let flow = new_flow(1.0, &C0).unwrap();
    assert_eq!(unsafe { eki_flow_dim(flow.0) }, 2);
    let (mut cov, mut mean, mut post_m, mut post_c) = ([0.0; 4], [0.0; 2], [0.0; 2], [0.0; 4]);
    unsafe {
        assert_eq!(eki_covariance_at(flow.0, 1.0, cov.as_mut_ptr(), 4), EkiStatus::Ok);
        assert_eq!(eki_mean_at(flow.0, 1.0, mean.as_mut_ptr(), 2), EkiStatus::Ok);
        assert_eq!(eki_posterior(flow.0, post_m.as_mut_ptr(), 2, post_c.as_mut_ptr(), 4), EkiStatus::Ok);
    }
    assert!(close(&cov, &post_c, 1e-12));
    assert!(close(&mean, &post_m, 1e-12));
    // information form by hand: (C0^{-1} + diag(16, 1))^{-1}
    let c0_inv = [2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0];
    let p = [c0_inv[0] + 16.0, c0_inv[1], c0_inv[2], c0_inv[3] + 1.0];
    let det = p[0] * p[3] - p[1] * p[2];
    assert!(close(&post_c, &[p[3] / det, -p[1] / det, -p[2] / det, p[0] / det], 1e-12));
}

#[test]
fn map_limit_profile_and_eigenvalues() {
    let flow = new_flow(2.0, &C0).unwrap();
    let (mut map, mut post_m, mut post_c) = ([0.0; 2], [0.0; 2], [0.0; 4]);
    let (mut lim_c, mut lim_m, mut profile, mut eig, mut cov) = ([1.0; 4], [1.0; 2], [0.0; 4], [0.0; 2], [0.0; 4]);
    unsafe {
        assert_eq!(eki_map(flow.0, 1.0, map.as_mut_ptr(), 2), EkiStatus::Ok);
        assert_eq!(eki_posterior(flow.0, post_m.as_mut_ptr(), 2, post_c.as_mut_ptr(), 4), EkiStatus::Ok);
        assert_eq!(eki_limit(flow.0, lim_c.as_mut_ptr(), 4, lim_m.as_mut_ptr(), 2), EkiStatus::Ok);
        assert_eq!(eki_limit(flow.0, ptr::null_mut(), 0, ptr::null_mut(), 0), EkiStatus::Ok);
        assert_eq!(eki_profile(flow.0, profile.as_mut_ptr(), 4), EkiStatus::Ok);
        assert_eq!(eki_eigenvalues(flow.0, 1.0, 1e-3, eig.as_mut_ptr(), 2), EkiStatus::Ok);
        assert_eq!(eki_covariance_at(flow.0, 1.0, cov.as_mut_ptr(), 4), EkiStatus::Ok);
    }
    assert!(close(&map, &post_m, 1e-10));
    // invertible forward map: everything collapses onto the data preimage
    assert!(close(&lim_c, &[0.0; 4], 1e-14));
    assert!(close(&lim_m, &[0.0, 0.0], 1e-12));
    assert!(profile[1] == profile[2] && profile[0] > 0.0);
    let tr = cov[0] + cov[3];
    let det = cov[0] * cov[3] - cov[1] * cov[2];
    let disc = (tr * tr / 4.0 - det).sqrt();
    assert!(close(&eig, &[tr / 2.0 + disc, tr / 2.0 - disc], 1e-8));
}

#[test]
fn errors_set_status_and_message() {
    let indefinite = [1.0, 2.0, 2.0, 1.0];
    assert_eq!(new_flow(2.0, &indefinite).err(), Some(EkiStatus::NotPositiveDefinite));
    assert!(last_error().contains("C0"), "{}", last_error());
    assert_eq!(new_flow(0.5, &C0).err(), Some(EkiStatus::InvalidArgument));

    let flow = new_flow(2.0, &C0).unwrap();
    let mut small = [0.0; 3];
    unsafe {
        assert_eq!(eki_covariance_at(flow.0, 1.0, small.as_mut_ptr(), 3), EkiStatus::DimensionMismatch);
        assert_eq!(eki_covariance_at(flow.0, -1.0, small.as_mut_ptr(), 3), EkiStatus::InvalidArgument);
        assert_eq!(eki_mean_at(ptr::null(), 1.0, small.as_mut_ptr(), 3), EkiStatus::NullPointer);
        assert_eq!(eki_mean_at(flow.0, 1.0, ptr::null_mut(), 3), EkiStatus::NullPointer);
        assert_eq!(eki_flow_dim(ptr::null()), 0);
        eki_flow_free(ptr::null_mut());
        let mut out = ptr::null_mut();
        assert_eq!(
            eki_flow_new(2, 2, ptr::null(), GAMMA.as_ptr(), Y.as_ptr(), M0.as_ptr(), C0.as_ptr(), 2.0, &mut out),
            EkiStatus::NullPointer
        );
        let mut ok = [0.0; 2];
        assert_eq!(eki_mean_at(flow.0, 1.0, ok.as_mut_ptr(), 2), EkiStatus::Ok);
    }
    assert_eq!(last_error(), "");
}

#[test]
fn runs_shipped_experiment() {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/rates.json");
    let dir = tempfile::tempdir().unwrap();
    let cfg = CString::new(cfg.to_str().unwrap()).unwrap();
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut passed = -1;
    let status = unsafe { eki_run_experiment(cfg.as_ptr(), out.as_ptr(), &mut passed) };
    assert_eq!(status, EkiStatus::Ok, "{}", last_error());
    assert_eq!(passed, 1);
    assert!(dir.path().join("summary.json").exists());

    let bad = CString::new("/nonexistent/config.json").unwrap();
    assert_eq!(unsafe { eki_run_experiment(bad.as_ptr(), out.as_ptr(), ptr::null_mut()) }, EkiStatus::Config);
    assert_eq!(unsafe { eki_run_experiment(ptr::null(), ptr::null(), ptr::null_mut()) }, EkiStatus::NullPointer);
}

#[test]
fn header_compiles_as_c() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = std::fs::read_to_string(include.join("eki.h")).unwrap();
    for name in [
        "eki_flow_new",
        "eki_flow_free",
        "eki_covariance_at",
        "eki_mean_at",
        "eki_limit",
        "eki_profile",
        "eki_posterior",
        "eki_map",
        "eki_eigenvalues",
        "eki_run_experiment",
        "eki_last_error",
        "EKI_STATUS_OK",
    ] {
        assert!(header.contains(name), "{name} missing from eki.h");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"eki.h\"\nint main(void) { EkiFlow *f = 0; double c[4]; \
         EkiStatus s = eki_covariance_at(f, 1.0, c, 4); eki_flow_free(f); return s == EKI_STATUS_NULL_POINTER ? 0 : 1; }\n",
    )
    .unwrap();
    // syntax check only; skipped where no C compiler is installed
    match std::process::Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .status()
    {
        Ok(status) => assert!(status.success(), "eki.h failed to compile"),
        Err(_) => eprintln!("cc not found; header compile check skipped"),
    }
}
