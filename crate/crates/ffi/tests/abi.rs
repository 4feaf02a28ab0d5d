use std::ffi::{CStr, CString};
use std::ptr;

use fidcal::calibration::{BackboneConfig, Classifier};
use fidcal::degrade::{self, DegradationSpec, MIXTURE_SIGMAS};
use fidcal::fidelity::{self, FidelityMetric};
use fidcal::imaging::{self, ImageTensor, PreprocessConfig};
use fidcal::restore::{self, Denoiser, DenoiserConfig};
use fidcal_ffi::*;

fn ramp(c: usize, h: usize, w: usize) -> ImageTensor {
    let n = c * h * w;
    ImageTensor::new(c, h, w, (0..n).map(|i| (i % 97) as f32 / 96.0).collect()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(fidcal_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn awgn_matches_core_and_may_run_in_place() {
    let img = ramp(3, 8, 10);
    let (want, _) = degrade::awgn(&img, &DegradationSpec::awgn(0.2, 5)).unwrap();
    let mut out = vec![0f32; img.data().len()];
    let st = unsafe { fidcal_awgn(img.data().as_ptr(), 3, 8, 10, 0.2, 5, out.as_mut_ptr()) };
    assert_eq!(st, FidcalStatus::Ok);
    assert_eq!(out, want.data());
    let mut buf = img.data().to_vec();
    let st = unsafe { fidcal_awgn(buf.as_ptr(), 3, 8, 10, 0.2, 5, buf.as_mut_ptr()) };
    assert_eq!(st, FidcalStatus::Ok);
    assert_eq!(buf, want.data());
    assert!(last_error().is_empty());
}

#[test]
fn failures_report_codes_and_messages() {
    let mut out = [0f32; 4];
    let st = unsafe { fidcal_awgn(ptr::null(), 1, 2, 2, 0.1, 0, out.as_mut_ptr()) };
    assert_eq!(st, FidcalStatus::NullPointer);
    assert!(last_error().contains("null"));
    let img = [0.5f32; 4];
    let st = unsafe { fidcal_salt_pepper(img.as_ptr(), 1, 2, 2, 1.5, 0, out.as_mut_ptr()) };
    assert_eq!(st, FidcalStatus::InvalidArgument);
    assert!(last_error().contains("probability"));
    let st = unsafe { fidcal_awgn(img.as_ptr(), 0, 2, 2, 0.1, 0, out.as_mut_ptr()) };
    assert_eq!(st, FidcalStatus::InvalidArgument);
    let mut h = ptr::null_mut();
    let missing = CString::new("/nonexistent/restorer.ckpt").unwrap();
    let st = unsafe { fidcal_denoiser_load(missing.as_ptr(), &mut h) };
    assert_ne!(st, FidcalStatus::Ok);
    assert!(h.is_null());
    unsafe { fidcal_denoiser_free(h) };
    assert_eq!(unsafe { fidcal_classifier_num_classes(ptr::null()) }, 0);
}

#[test]
fn mixture_stats_and_normalized_fidelity_match_core() {
    let mut s = FidcalMixtureStats::default();
    let st = unsafe { fidcal_mixture_stats(MIXTURE_SIGMAS.as_ptr(), MIXTURE_SIGMAS.len(), true, &mut s) };
    assert_eq!(st, FidcalStatus::Ok);
    assert!((s.sigma_sq - 0.55 / 72.0).abs() < 1e-15);

    let clean = ramp(3, 6, 5);
    let (noisy, _) = degrade::awgn(&clean, &DegradationSpec::awgn(0.1, 1)).unwrap();
    let core_stats = fidelity::mixture_stats(&MIXTURE_SIGMAS, true).unwrap();
    let want = fidelity::prepare(&fidelity::oracle_fidelity(&noisy, &clean, FidelityMetric::L1).unwrap(), &core_stats).unwrap();
    let mut out = vec![0f32; 30];
    let st = unsafe {
        fidcal_fidelity(
            noisy.data().as_ptr(),
            clean.data().as_ptr(),
            6,
            5,
            FidcalMetric::L1,
            &s,
            out.as_mut_ptr(),
        )
    };
    assert_eq!(st, FidcalStatus::Ok);
    assert_eq!(out, want.values);
    let st = unsafe {
        fidcal_fidelity(
            noisy.data().as_ptr(),
            clean.data().as_ptr(),
            6,
            5,
            FidcalMetric::Cosine,
            ptr::null(),
            out.as_mut_ptr(),
        )
    };
    assert_eq!(st, FidcalStatus::Ok);
    assert!(out.iter().all(|v| (0.0..=2.0).contains(v)));

    let mut p = 0.0;
    let st = unsafe { fidcal_psnr(noisy.data().as_ptr(), clean.data().as_ptr(), 3, 6, 5, &mut p) };
    assert_eq!(st, FidcalStatus::Ok);
    assert_eq!(p, restore::psnr(&noisy, &clean).unwrap());
}

#[test]
fn handles_run_saved_models() {
    let dir = tempfile::tempdir().unwrap();
    let model = Denoiser::new(
        DenoiserConfig {
            depth: 3,
            width: 4,
            ..DenoiserConfig::desk()
        },
        2,
    )
    .unwrap();
    let path = dir.path().join("restorer.ckpt");
    model.save(&path).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { fidcal_denoiser_load(cpath.as_ptr(), &mut h) }, FidcalStatus::Ok);
    let img = ramp(3, 12, 12);
    let mut out = vec![0f32; img.data().len()];
    assert_eq!(
        unsafe { fidcal_denoiser_run(h, img.data().as_ptr(), 3, 12, 12, out.as_mut_ptr()) },
        FidcalStatus::Ok
    );
    assert_eq!(out, restore::denoise(&model, &img).unwrap().data());
    unsafe { fidcal_denoiser_free(h) };

    let clf = Classifier::new(BackboneConfig::desk(10), 3).unwrap();
    let path = dir.path().join("clf.ckpt");
    clf.save(&path).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { fidcal_classifier_load(cpath.as_ptr(), &mut h) }, FidcalStatus::Ok);
    let s = unsafe { fidcal_classifier_input_size(h) };
    let k = unsafe { fidcal_classifier_num_classes(h) };
    assert_eq!(k, 10);
    let imgs = [ramp(3, s, s), ImageTensor::filled(3, s, s, 0.25)];
    let flat: Vec<f32> = imgs.iter().flat_map(|i| i.data().iter().copied()).collect();
    let mut logits = vec![0f32; 2 * k];
    assert_eq!(
        unsafe { fidcal_classifier_predict(h, flat.as_ptr(), 2, logits.as_mut_ptr()) },
        FidcalStatus::Ok
    );
    let prep = PreprocessConfig::eval(s);
    let norm: Vec<_> = imgs.iter().map(|i| i.normalize(&prep.mean, &prep.std).unwrap()).collect();
    assert_eq!(logits, clf.predict(&imaging::batch(&norm).unwrap()).data());
    unsafe { fidcal_classifier_free(h) };
}

#[test]
fn header_declares_the_exports() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/fidcal.h")).unwrap();
    for name in [
        "fidcal_last_error",
        "fidcal_awgn",
        "fidcal_fidelity",
        "fidcal_mixture_stats",
        "fidcal_denoiser_load",
        "fidcal_classifier_predict",
        "typedef struct FidcalDenoiser FidcalDenoiser",
        "FIDCAL_STATUS_NULL_POINTER",
    ] {
        assert!(header.contains(name), "{name}");
    }
    let v = unsafe { CStr::from_ptr(fidcal_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
