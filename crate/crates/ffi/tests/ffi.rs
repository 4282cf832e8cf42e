use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use ecgattr::attribution::{attribute, MethodId, MethodParams, SignMode};
use ecgattr::engine::save_checkpoint;
use ecgattr::metrics::{degradation_pair, degradation_score, localization_score, GroundTruthSet};
use ecgattr::model::{build_network, predict, standardize, NetworkConfig};
use ecgattr_ffi::*;

const LEN: usize = 2049;

fn signal(phase: f32) -> Vec<f32> {
    (0..LEN).map(|i| ((i as f32) * 0.05 + phase).sin() + 0.3 * ((i as f32) * 0.011).cos()).collect()
}

fn last_error() -> String {
    let mut buf = vec![0 as std::os::raw::c_char; 512];
    let n = unsafe { ecg_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert_eq!(n, ecg_last_error_length().min(511));
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn build(preset: &str, seed: u64) -> *mut EcgNetwork {
    let name = CString::new(preset).unwrap();
    let mut net = ptr::null_mut();
    assert_eq!(unsafe { ecg_network_build(name.as_ptr(), seed, &mut net) }, EcgStatus::Ok);
    assert!(!net.is_null());
    net
}

fn ffi_attribute(net: *const EcgNetwork, x: &[f32], method: &str, mode: EcgSignMode, backgrounds: &[f32]) -> (EcgStatus, Vec<f32>, usize) {
    let name = CString::new(method).unwrap();
    let mut out = vec![0.0f32; x.len()];
    let mut target = usize::MAX;
    let bg = if backgrounds.is_empty() { ptr::null() } else { backgrounds.as_ptr() };
    let status = unsafe {
        ecg_attribute(net, x.as_ptr(), x.len(), name.as_ptr(), mode, 5, 17, bg, backgrounds.len() / x.len(), out.as_mut_ptr(), out.len(), &mut target)
    };
    (status, out, target)
}

#[test]
fn handles_report_shape_and_predict_like_the_library() {
    let net = build("desk", 3);
    unsafe {
        assert_eq!(ecg_network_input_length(net), LEN);
        assert_eq!(ecg_network_num_classes(net), 3);
        assert_eq!(ecg_network_input_length(ptr::null()), 0);
    }
    let reference = build_network(&NetworkConfig::desk(), 3).unwrap().fold_batchnorm();
    let x = signal(0.4);
    let mut probs = [0.0f64; 3];
    assert_eq!(unsafe { ecg_predict(net, x.as_ptr(), LEN, probs.as_mut_ptr(), 3) }, EcgStatus::Ok);
    assert_eq!(probs.to_vec(), predict(&reference, &x).unwrap());
    assert_eq!(ecg_last_error_length(), 0);

    let mut short = [0.0f64; 2];
    assert_eq!(unsafe { ecg_predict(net, x.as_ptr(), LEN, short.as_mut_ptr(), 2) }, EcgStatus::Input);
    assert!(last_error().contains("probability"), "{}", last_error());
    assert_eq!(unsafe { ecg_predict(net, x.as_ptr(), LEN - 1, probs.as_mut_ptr(), 3) }, EcgStatus::Input);
    unsafe { ecg_network_free(net) };
    unsafe { ecg_network_free(ptr::null_mut()) };
}

#[test]
fn attributions_match_the_library() {
    let net = build("desk", 4);
    let reference = build_network(&NetworkConfig::desk(), 4).unwrap().fold_batchnorm();
    let x = standardize(&signal(1.1)).unwrap();
    for method in [MethodId::GradCam, MethodId::Random, MethodId::Saliency] {
        for (mode, sign) in [(EcgSignMode::Raw, SignMode::Raw), (EcgSignMode::Absolute, SignMode::Absolute)] {
            let (status, values, target) = ffi_attribute(net, &x, method.name(), mode, &[]);
            assert_eq!(status, EcgStatus::Ok, "{method}: {}", last_error());
            let params = MethodParams { seed: 5, ..MethodParams::default() };
            let want = attribute(&reference, 17, &x, method, &params, sign, &[]).unwrap();
            assert_eq!(values, want.values, "{method}");
            assert_eq!(target, want.target_class);
        }
    }

    let (status, _, _) = ffi_attribute(net, &x, "DeepSHAP", EcgSignMode::Raw, &[]);
    assert_eq!(status, EcgStatus::Input);
    assert!(!last_error().is_empty());
    let backgrounds: Vec<f32> = (0..3).flat_map(|k| standardize(&signal(k as f32)).unwrap()).collect();
    let (status, values, _) = ffi_attribute(net, &x, "DeepSHAP", EcgSignMode::Raw, &backgrounds);
    assert_eq!(status, EcgStatus::Ok, "{}", last_error());
    assert!(values.iter().all(|v| v.is_finite()));
    assert_eq!(ecg_last_error_length(), 0);

    let (status, _, _) = ffi_attribute(net, &x, "Telepathy", EcgSignMode::Raw, &[]);
    assert_eq!(status, EcgStatus::Usage);
    assert!(last_error().contains("Telepathy"));
    unsafe { ecg_network_free(net) };
}

#[test]
fn scores_match_the_library() {
    let attr: Vec<f32> = (0..LEN).map(|i| ((i * 37) % 101) as f32).collect();
    let gt: Vec<usize> = (600..800).collect();
    let mut loc = -1.0;
    assert_eq!(unsafe { ecg_localization_score(attr.as_ptr(), LEN, gt.as_ptr(), gt.len(), &mut loc) }, EcgStatus::Ok);
    assert_eq!(loc, localization_score(&attr, &GroundTruthSet::new(gt.clone(), LEN).unwrap()).unwrap());
    let bad = [LEN + 5];
    assert_eq!(unsafe { ecg_localization_score(attr.as_ptr(), LEN, bad.as_ptr(), 1, &mut loc) }, EcgStatus::Input);

    let net = build("desk", 6);
    let reference = build_network(&NetworkConfig::desk(), 6).unwrap().fold_batchnorm();
    let x = standardize(&signal(2.0)).unwrap();
    let (mut score, mut skipped) = (f64::NAN, -1);
    let status = unsafe { ecg_degradation_score(net, x.as_ptr(), attr.as_ptr(), LEN, 1, 16, 1e-9, &mut score, &mut skipped) };
    assert_eq!(status, EcgStatus::Ok, "{}", last_error());
    match degradation_pair(&reference, &x, 1, &attr, 16, 1e-9).unwrap() {
        Some((m, l)) => assert_eq!((score, skipped), (degradation_score(&m, &l).unwrap(), 0)),
        None => assert_eq!((score, skipped), (0.0, 1)),
    }
    let status = unsafe { ecg_degradation_score(net, x.as_ptr(), attr.as_ptr(), LEN, 1, 16, 2.0, &mut score, &mut skipped) };
    assert_eq!((status, score, skipped), (EcgStatus::Ok, 0.0, 1));
    let status = unsafe { ecg_degradation_score(net, x.as_ptr(), attr.as_ptr(), LEN, 3, 16, 0.1, &mut score, &mut skipped) };
    assert_eq!(status, EcgStatus::Input);
    let status = unsafe { ecg_degradation_score(net, x.as_ptr(), attr.as_ptr(), LEN, 0, 16, 0.1, ptr::null_mut(), &mut skipped) };
    assert_eq!(status, EcgStatus::NullPointer);
    unsafe { ecg_network_free(net) };
}

#[test]
fn standardize_and_null_arguments() {
    let x = signal(0.0);
    let mut out = vec![0.0f32; LEN];
    assert_eq!(unsafe { ecg_standardize(x.as_ptr(), LEN, out.as_mut_ptr()) }, EcgStatus::Ok);
    assert_eq!(out, standardize(&x).unwrap());
    assert_eq!(unsafe { ecg_standardize(ptr::null(), LEN, out.as_mut_ptr()) }, EcgStatus::NullPointer);
    assert!(last_error().contains("signal"));
    assert_eq!(unsafe { ecg_standardize(x.as_ptr(), 0, out.as_mut_ptr()) }, EcgStatus::Input);

    let mut net = ptr::null_mut();
    assert_eq!(unsafe { ecg_network_build(ptr::null(), 0, &mut net) }, EcgStatus::NullPointer);
    let huge = CString::new("huge").unwrap();
    assert_eq!(unsafe { ecg_network_build(huge.as_ptr(), 0, &mut net) }, EcgStatus::Config);
    assert!(net.is_null());
    let desk = CString::new("desk").unwrap();
    assert_eq!(unsafe { ecg_network_build(desk.as_ptr(), 0, ptr::null_mut()) }, EcgStatus::NullPointer);
    let mut probs = [0.0f64; 3];
    assert_eq!(unsafe { ecg_predict(ptr::null(), x.as_ptr(), LEN, probs.as_mut_ptr(), 3) }, EcgStatus::NullPointer);

    let mut tiny = [0 as std::os::raw::c_char; 4];
    let n = unsafe { ecg_last_error_message(tiny.as_mut_ptr(), tiny.len()) };
    assert_eq!(n, 3);
    assert_eq!(tiny[3], 0);
    assert_eq!(unsafe { ecg_last_error_message(ptr::null_mut(), 10) }, 0);
    let version = unsafe { CStr::from_ptr(ecg_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}

#[test]
fn checkpoints_load_through_the_c_api() {
    let dir = tempfile::tempdir().unwrap();
    let trained = build_network(&NetworkConfig::desk(), 8).unwrap();
    save_checkpoint(&trained, dir.path()).unwrap();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut net = ptr::null_mut();
    assert_eq!(unsafe { ecg_network_load(path.as_ptr(), &mut net) }, EcgStatus::Ok, "{}", last_error());
    let x = signal(0.9);
    let mut probs = [0.0f64; 3];
    assert_eq!(unsafe { ecg_predict(net, x.as_ptr(), LEN, probs.as_mut_ptr(), 3) }, EcgStatus::Ok);
    assert_eq!(probs.to_vec(), predict(&trained.fold_batchnorm(), &x).unwrap());
    unsafe { ecg_network_free(net) };

    std::fs::write(dir.path().join("model.json"), "{").unwrap();
    let mut other = ptr::null_mut();
    assert_eq!(unsafe { ecg_network_load(path.as_ptr(), &mut other) }, EcgStatus::Load);
    let missing = CString::new(dir.path().join("absent").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { ecg_network_load(missing.as_ptr(), &mut other) }, EcgStatus::Load);
    assert!(last_error().contains("model.json"));
    assert!(other.is_null());
}

/// Compiles a caller of every exported function against the generated header,
/// as C and as C++.
#[test]
fn header_compiles_as_c_and_cpp() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = std::fs::read_to_string(include.join("ecgattr.h")).unwrap();
    let exported = [
        "ecg_version", "ecg_last_error_length", "ecg_last_error_message", "ecg_network_load", "ecg_network_build",
        "ecg_network_free", "ecg_network_input_length", "ecg_network_num_classes", "ecg_standardize", "ecg_predict",
        "ecg_attribute", "ecg_localization_score", "ecg_degradation_score",
    ];
    for name in exported {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    let caller = r#"
#include "ecgattr.h"
int use_all(void) {
    char msg[64];
    EcgNetwork *net = NULL;
    float x[4] = {0}, out[4], bg[4] = {0};
    double probs[3], score;
    size_t gt[1] = {1}, target;
    int skipped;
    EcgStatus s = ecg_network_build("desk", 1u, &net);
    s = ecg_network_load("dir", &net);
    s = ecg_standardize(x, 4, out);
    s = ecg_predict(net, x, 4, probs, 3);
    s = ecg_attribute(net, x, 4, "GradCAM", ECG_SIGN_MODE_ABSOLUTE, 0u, 0, bg, 1, out, 4, &target);
    s = ecg_localization_score(x, 4, gt, 1, &score);
    s = ecg_degradation_score(net, x, out, 4, 0, 2, 0.1, &score, &skipped);
    (void)ecg_last_error_message(msg, sizeof msg);
    size_t n = ecg_last_error_length() + ecg_network_input_length(net) + ecg_network_num_classes(net);
    ecg_network_free(net);
    return (int)s + (int)n + (ecg_version() != NULL) + (s == ECG_STATUS_PANIC);
}
"#;
    let dir = tempfile::tempdir().unwrap();
    let source = dir.path().join("caller.c");
    std::fs::write(&source, caller).unwrap();
    for lang in ["c", "c++"] {
        let output = Command::new("cc")
            .args(["-fsyntax-only", "-Wall", "-Wextra", "-Werror", "-x", lang, "-I"])
            .arg(&include)
            .arg(&source)
            .output()
            .expect("a C compiler named cc is on PATH");
        assert!(output.status.success(), "{lang}: {}", String::from_utf8_lossy(&output.stderr));
    }
}
