use std::ffi::{CStr, CString};
use std::ptr;

use sinc_ffi::*;

const PULSE: SincBand = SincBand {
    a: 0.66,
    b: 3.0,
    delta_f: 0.1,
};

fn last_error() -> String {
    let p = sinc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tone(f: f64, n: usize, fs: f64) -> Vec<f64> {
    (0..n)
        .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / fs).sin())
        .collect()
}

#[test]
fn psd_matches_core_and_checks_buffer() {
    let y = tone(1.5, 120, 30.0);
    let mut out = vec![0.0; sinc_psd_len(512)];
    let st = unsafe { sinc_psd(y.as_ptr(), y.len(), 30.0, 512, out.as_mut_ptr(), out.len()) };
    assert_eq!(st, SincStatus::Ok);
    let cfg = sinc_core::SpectralConfig::new(512, 30.0).unwrap();
    assert_eq!(out, sinc_core::spectral::psd(&y, &cfg).unwrap().power());

    let st = unsafe { sinc_psd(y.as_ptr(), y.len(), 30.0, 512, out.as_mut_ptr(), 10) };
    assert_eq!(st, SincStatus::BufferTooSmall);
    assert!(last_error().contains("257 needed"));
}

#[test]
fn peak_rate_of_a_tone() {
    let y = tone(1.5, 120, 30.0);
    let mut rate = 0.0;
    let st = unsafe { sinc_peak_rate(y.as_ptr(), y.len(), 30.0, 5400, PULSE, &mut rate) };
    assert_eq!(st, SincStatus::Ok);
    assert!((rate - 90.0).abs() < 0.5, "{rate}");
}

#[test]
fn null_pointers_and_bad_bands_are_reported() {
    let mut rate = 0.0;
    let st = unsafe { sinc_peak_rate(ptr::null(), 10, 30.0, 64, PULSE, &mut rate) };
    assert_eq!(st, SincStatus::NullPointer);
    assert!(last_error().contains("y is null"));

    let y = tone(1.0, 64, 30.0);
    let bad = SincBand {
        a: 2.0,
        b: 1.0,
        delta_f: 0.1,
    };
    let st = unsafe { sinc_peak_rate(y.as_ptr(), y.len(), 30.0, 64, bad, &mut rate) };
    assert_eq!(st, SincStatus::InvalidBand);
}

#[test]
fn loss_and_gradient_match_core() {
    let batch: Vec<f64> = [0.9, 1.4, 2.2]
        .iter()
        .flat_map(|f| tone(*f, 90, 30.0))
        .collect();
    let weights = SincLossWeights {
        bandwidth: 1.0,
        sparsity: 1.0,
        variance: 0.5,
    };
    let mut loss = SincLoss::default();
    let mut grad = vec![0.0; batch.len()];
    let st = unsafe {
        sinc_loss(
            batch.as_ptr(),
            3,
            90,
            30.0,
            1024,
            PULSE,
            weights,
            &mut loss,
            grad.as_mut_ptr(),
        )
    };
    assert_eq!(st, SincStatus::Ok);
    let rows: Vec<Vec<f64>> = batch.chunks(90).map(<[f64]>::to_vec).collect();
    let w = sinc_core::LossWeights {
        bandwidth: 1.0,
        sparsity: 1.0,
        variance: 0.5,
    };
    let cfg = sinc_core::SpectralConfig::new(1024, 30.0).unwrap();
    let band = sinc_core::Bandlimits::pulse();
    let (expect, g) = sinc_core::losses::total_loss(&rows, &band, &cfg, &w).unwrap();
    assert_eq!(loss.total, expect.total);
    assert_eq!(grad, g.concat());

    let st = unsafe {
        sinc_loss(
            batch.as_ptr(),
            3,
            90,
            30.0,
            1024,
            PULSE,
            weights,
            &mut loss,
            ptr::null_mut(),
        )
    };
    assert_eq!(st, SincStatus::Ok);
}

#[test]
fn model_lifecycle_round_trips() {
    let mut m: *mut SincModel = ptr::null_mut();
    assert_eq!(
        unsafe { sinc_model_init(4, 4, 3, 7, &mut m) },
        SincStatus::Ok
    );
    let (mut w, mut h, mut c, mut n) = (0, 0, 0, 0);
    assert_eq!(
        unsafe { sinc_model_shape(m, &mut w, &mut h, &mut c, &mut n) },
        SincStatus::Ok
    );
    assert_eq!((w, h, c), (4, 4, 3));
    assert!(n > 0);

    let frames = 150;
    let data: Vec<f32> = (0..frames * 48).map(|i| ((i * 37) % 101) as f32).collect();
    let mut wave = vec![0.0; frames];
    let st =
        unsafe { sinc_model_forward(m, data.as_ptr(), frames, 30.0, wave.as_mut_ptr(), frames) };
    assert_eq!(st, SincStatus::Ok);

    let dir = tempfile::tempdir().unwrap();
    let file = CString::new(dir.path().join("m.sinc").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { sinc_model_save(m, file.as_ptr()) }, SincStatus::Ok);
    let mut back: *mut SincModel = ptr::null_mut();
    assert_eq!(
        unsafe { sinc_model_load(file.as_ptr(), &mut back) },
        SincStatus::Ok
    );
    let mut wave2 = vec![0.0; frames];
    let st = unsafe {
        sinc_model_forward(
            back,
            data.as_ptr(),
            frames,
            30.0,
            wave2.as_mut_ptr(),
            frames,
        )
    };
    assert_eq!(st, SincStatus::Ok);
    assert_eq!(wave, wave2);

    let mut count = 0;
    let mut times = vec![0.0; 2];
    let mut rates = vec![0.0; 2];
    let call = |cap: usize, times: &mut [f64], rates: &mut [f64], count: &mut usize| unsafe {
        sinc_model_predict_rates(
            m,
            data.as_ptr(),
            frames,
            30.0,
            60,
            30,
            5400,
            PULSE,
            times.as_mut_ptr(),
            rates.as_mut_ptr(),
            cap,
            count,
        )
    };
    assert_eq!(
        call(2, &mut times, &mut rates, &mut count),
        SincStatus::BufferTooSmall
    );
    assert_eq!(count, 4);
    times.resize(count, 0.0);
    rates.resize(count, 0.0);
    assert_eq!(
        call(count, &mut times, &mut rates, &mut count),
        SincStatus::Ok
    );
    assert_eq!(times, vec![1.0, 2.0, 3.0, 4.0]);
    assert!(rates.iter().all(|r| (39.6..=180.0).contains(r)));

    unsafe {
        sinc_model_free(m);
        sinc_model_free(back);
        sinc_model_free(ptr::null_mut());
    }
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let mut m: *mut SincModel = ptr::null_mut();
    let file = CString::new("/nonexistent/model.sinc").unwrap();
    assert_eq!(
        unsafe { sinc_model_load(file.as_ptr(), &mut m) },
        SincStatus::Io
    );
    assert!(m.is_null());
    assert!(last_error().contains("/nonexistent/model.sinc"));
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("junk.sinc");
    std::fs::write(&p, b"not a model").unwrap();
    let file = CString::new(p.to_str().unwrap()).unwrap();
    let mut m: *mut SincModel = ptr::null_mut();
    assert_eq!(
        unsafe { sinc_model_load(file.as_ptr(), &mut m) },
        SincStatus::Format
    );
}

#[test]
fn undersized_output_and_null_model_are_rejected() {
    let mut m: *mut SincModel = ptr::null_mut();
    assert_eq!(
        unsafe { sinc_model_init(2, 2, 1, 1, &mut m) },
        SincStatus::Ok
    );
    let mut wave = vec![0.0; 2];
    let data = [1.0f32; 8];
    let st = unsafe { sinc_model_forward(m, data.as_ptr(), 2, 30.0, wave.as_mut_ptr(), 1) };
    assert_eq!(st, SincStatus::BufferTooSmall);
    let st =
        unsafe { sinc_model_forward(ptr::null(), data.as_ptr(), 2, 30.0, wave.as_mut_ptr(), 2) };
    assert_eq!(st, SincStatus::NullPointer);
    unsafe { sinc_model_free(m) };
}
