use qmlib::data::{Dataset, Split};
use qmlib::quantizer::QuantizerSpec;
use qmlib::train::{fit, TrainConfig};
use qmlib_ffi::*;
use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

fn last_error() -> Option<String> {
    let p = qml_last_error();
    (!p.is_null()).then(|| unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned())
}

const AMPS: [f64; 3] = [0.5, 1.0, 1.5];
const BREAKS: [f64; 3] = [-0.6, 0.1, 0.7];

#[test]
fn quantizer_functions_match_library() {
    let spec = QuantizerSpec::new(AMPS.to_vec(), BREAKS.to_vec(), 10.0).unwrap();
    let mut levels = [0.0; 4];
    assert_eq!(unsafe { qml_quantizer_levels(AMPS.as_ptr(), 3, levels.as_mut_ptr()) }, QmlStatus::Ok);
    assert_eq!(levels.as_slice(), spec.levels());
    assert_eq!(levels[0], -1.0);
    assert_eq!(levels[3], 1.0);

    let z = [-2.0, -0.6, 0.0, 0.1, 0.69, 3.0];
    let mut q = [0.0; 6];
    let s = unsafe { qml_hard_quantize(AMPS.as_ptr(), BREAKS.as_ptr(), 3, z.as_ptr(), 6, q.as_mut_ptr()) };
    assert_eq!(s, QmlStatus::Ok);
    assert_eq!(q.to_vec(), spec.hard_quantize(&z));

    let (mu, theta) = ([0.2, -1.0], [0.5, 1.2]);
    let mut pmf = [0.0; 8];
    let s = unsafe {
        qml_conditional_pmf(AMPS.as_ptr(), BREAKS.as_ptr(), 3, mu.as_ptr(), theta.as_ptr(), 2, pmf.as_mut_ptr())
    };
    assert_eq!(s, QmlStatus::Ok);
    let expect = spec.conditional_pmf(&mu, &theta).unwrap();
    assert_eq!(&pmf[..4], expect.row(0));
    assert_eq!(&pmf[4..], expect.row(1));
    assert!(((pmf[..4].iter().sum::<f64>()) - 1.0).abs() < 1e-12);
    assert!((qml_psnr_to_sigma2(10.0) - 0.1).abs() < 1e-15);
}

#[test]
fn bounds_are_ordered() {
    let (mu, theta) = ([0.2, -1.0, 1.7], [0.5, 1.2, 0.1]);
    let sigma2 = 0.1;
    let (mut tight, mut literal, mut truth) = ([0.0; 3], [0.0; 3], [0.0; 3]);
    unsafe {
        let a = AMPS.as_ptr();
        let b = BREAKS.as_ptr();
        let (m, t) = (mu.as_ptr(), theta.as_ptr());
        assert_eq!(qml_kl_bound(a, b, 3, m, t, 3, sigma2, QmlKlVariant::Tight, tight.as_mut_ptr()), QmlStatus::Ok);
        assert_eq!(
            qml_kl_bound(a, b, 3, m, t, 3, sigma2, QmlKlVariant::Literal, literal.as_mut_ptr()),
            QmlStatus::Ok
        );
        assert_eq!(qml_true_kl(a, b, 3, m, t, 3, sigma2, truth.as_mut_ptr()), QmlStatus::Ok);
        for i in 0..3 {
            assert!(truth[i] >= 0.0 && truth[i] <= tight[i] && tight[i] < literal[i]);
        }
        let mut gap = 0.0;
        assert_eq!(qml_gap_bound(a, b, 3, m, t, 3, sigma2, &mut gap), QmlStatus::Ok);
        let discrepancy: f64 = (0..3).map(|i| tight[i] - truth[i]).sum();
        assert!(discrepancy <= gap);

        assert_eq!(qml_gap_bound(a, b, 3, m, t, 3, 1.5, &mut gap), QmlStatus::OutOfDomain);
        assert!(last_error().unwrap().contains("sigma2"));
        assert_eq!(qml_true_kl(a, b, 3, m, t, 3, 1.5, truth.as_mut_ptr()), QmlStatus::Ok);
        assert!(last_error().is_none());
    }
    let mut ms = 0.0;
    assert_eq!(qml_latency_ms(57, 15, 3, 9600.0, true, &mut ms), QmlStatus::Ok);
    assert!((ms - 5.9375).abs() < 1e-12);
    assert_eq!(qml_latency_ms(57, 15, 3, 9600.0, false, &mut ms), QmlStatus::Ok);
    assert!((ms - 3.0 * 5.9375).abs() < 1e-12);
    assert_eq!(qml_latency_ms(0, 15, 3, 9600.0, true, &mut ms), QmlStatus::InvalidArgument);
}

#[test]
fn failures_report_status_and_message() {
    let mut out = [0.0; 4];
    let s = unsafe { qml_quantizer_levels(ptr::null(), 3, out.as_mut_ptr()) };
    assert_eq!(s, QmlStatus::NullPointer);
    assert!(last_error().unwrap().contains("amplitudes"));
    let s = unsafe { qml_quantizer_levels(AMPS.as_ptr(), 3, ptr::null_mut()) };
    assert_eq!(s, QmlStatus::NullPointer);

    let unsorted = [0.5, -0.5, 0.9];
    let z = [0.0];
    let s = unsafe { qml_hard_quantize(AMPS.as_ptr(), unsorted.as_ptr(), 3, z.as_ptr(), 1, out.as_mut_ptr()) };
    assert_eq!(s, QmlStatus::InvalidArgument);
    assert!(last_error().is_some());

    let mut model = ptr::null_mut();
    let path = CString::new("/nonexistent/model.ckpt").unwrap();
    assert_eq!(unsafe { qml_model_load(path.as_ptr(), &mut model) }, QmlStatus::Io);
    assert!(model.is_null());
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { qml_model_load(junk.as_ptr(), &mut model) }, QmlStatus::Checkpoint);
    assert_eq!(unsafe { qml_model_load(ptr::null(), &mut model) }, QmlStatus::NullPointer);
    unsafe { qml_model_free(ptr::null_mut()) };
    let version = unsafe { CStr::from_ptr(qml_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}

#[test]
fn model_handle_predicts_like_the_library() {
    let train = Dataset::synthetic(200, 24, 4, Split::Train, 3).unwrap();
    let test = Dataset::synthetic(50, 24, 4, Split::Test, 3).unwrap();
    let cfg = TrainConfig {
        devices: 3,
        feature_dim: 4,
        breakpoints: 3,
        epochs: 2,
        batch_size: 50,
        noise_draws: 1,
        hidden: vec![16],
        ..TrainConfig::default()
    };
    let (trained, _) = fit(&cfg, &train, &test).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    trained.save(&path).unwrap();

    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { qml_model_load(c_path.as_ptr(), &mut handle) }, QmlStatus::Ok);
    let (mut k, mut d, mut classes) = (0, 0, 0);
    assert_eq!(unsafe { qml_model_shape(handle, &mut k, &mut d, &mut classes) }, QmlStatus::Ok);
    assert_eq!((k, d, classes), (3, 4, 4));
    let mut width = 0;
    assert_eq!(unsafe { qml_model_input_dim(handle, 2, &mut width) }, QmlStatus::Ok);
    assert_eq!(width, 8);
    assert_eq!(unsafe { qml_model_input_dim(handle, 3, &mut width) }, QmlStatus::InvalidArgument);

    let batch = 5;
    let inputs: Vec<f64> = (0..batch).flat_map(|i| test.image(i)).collect();
    let mut lp = vec![0.0; batch * classes];
    let s = unsafe { qml_model_predict(handle, inputs.as_ptr(), batch, 10.0, 7, lp.as_mut_ptr()) };
    assert_eq!(s, QmlStatus::Ok);
    for row in lp.chunks(classes) {
        assert!((row.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let mut again = vec![0.0; batch * classes];
    unsafe { qml_model_predict(handle, inputs.as_ptr(), batch, 10.0, 7, again.as_mut_ptr()) };
    assert_eq!(lp, again);
    unsafe { qml_model_predict(handle, inputs.as_ptr(), batch, 10.0, 8, again.as_mut_ptr()) };
    assert_ne!(lp, again);
    let s = unsafe { qml_model_predict(handle, inputs.as_ptr(), 0, 10.0, 7, lp.as_mut_ptr()) };
    assert_eq!(s, QmlStatus::InvalidArgument);
    unsafe { qml_model_free(handle) };
}

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_header() {
    let lib = target_dir().join("libqmlib_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include <math.h>
#include "qmlib.h"

int main(void) {
    double amps[1] = {1.0}, breaks[1] = {0.0}, levels[2];
    if (qml_quantizer_levels(amps, 1, levels) != QML_STATUS_OK) return 1;
    if (levels[0] != -1.0 || levels[1] != 1.0) return 2;
    double mu[1] = {0.0}, theta[1] = {0.8}, bound[1];
    if (qml_kl_bound(amps, breaks, 1, mu, theta, 1, 1.0, QML_KL_VARIANT_TIGHT, bound) != QML_STATUS_OK) return 3;
    if (fabs(bound[0] - 0.5) > 1e-15) return 4;
    double gap;
    if (qml_gap_bound(amps, breaks, 1, mu, theta, 1, 1.5, &gap) != QML_STATUS_OUT_OF_DOMAIN) return 5;
    if (qml_last_error() == NULL) return 6;
    QmlModel *m = NULL;
    if (qml_model_load("/nonexistent", &m) != QML_STATUS_IO || m != NULL) return 7;
    printf("%s\n", qml_version());
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("main");
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), env!("CARGO_PKG_VERSION"));
}
