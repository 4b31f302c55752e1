use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use ser_lstm::audio::{write_wav_pcm16, AudioClip};
use ser_lstm::persistence::{save_checkpoint, Checkpoint, TrainingMeta};
use ser_lstm::{MfccConfig, Model, ModelConfig, Standardizer};
use ser_lstm_ffi::*;

fn last_error() -> String {
    let n = unsafe { ser_last_error_message(ptr::null_mut(), 0) };
    let mut buf = vec![0 as c_char; n + 1];
    unsafe { ser_last_error_message(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn tone(path: &Path, seconds: f64, rate: u32) {
    let n = (seconds * f64::from(rate)) as usize;
    let s: Vec<f64> = (0..n)
        .map(|i| 0.3 * (2.0 * std::f64::consts::PI * 220.0 * i as f64 / f64::from(rate)).sin())
        .collect();
    write_wav_pcm16(path, &AudioClip::mono(s, rate).unwrap()).unwrap();
}

#[test]
fn new_model_reports_parameter_counts() {
    for (layers, expected) in [(1, 107_016), (2, 238_600)] {
        let mut m: *mut SerModel = ptr::null_mut();
        assert_eq!(unsafe { ser_model_new(layers, 3, &mut m) }, SerStatus::Ok);
        assert_eq!(unsafe { ser_model_num_params(m) }, expected);
        assert_eq!(unsafe { ser_model_num_layers(m) }, layers);
        unsafe { ser_model_free(m) };
    }
    assert_eq!(unsafe { ser_model_num_params(ptr::null()) }, 0);
}

#[test]
fn invalid_layer_count_is_rejected() {
    let mut m: *mut SerModel = ptr::null_mut();
    assert_eq!(unsafe { ser_model_new(3, 0, &mut m) }, SerStatus::InvalidArgument);
    assert!(m.is_null());
    assert!(last_error().contains("layer"), "{}", last_error());
}

#[test]
fn predict_features_gives_distribution() {
    let mut m: *mut SerModel = ptr::null_mut();
    assert_eq!(unsafe { ser_model_new(2, 5, &mut m) }, SerStatus::Ok);
    let features: Vec<f64> = (0..SER_FEATURE_FRAMES * SER_FEATURE_COEFFS)
        .map(|i| ((i * 37) % 11) as f64 - 5.0)
        .collect();
    let mut probs = [0.0; SER_NUM_EMOTIONS];
    let mut class = usize::MAX;
    let status = unsafe {
        ser_model_predict_features(m, features.as_ptr(), features.len(), probs.as_mut_ptr(), probs.len(), &mut class)
    };
    assert_eq!(status, SerStatus::Ok);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(class < SER_NUM_EMOTIONS);

    let status = unsafe {
        ser_model_predict_features(m, features.as_ptr(), features.len() - 1, probs.as_mut_ptr(), probs.len(), &mut class)
    };
    assert_eq!(status, SerStatus::Shape);
    let status = unsafe {
        ser_model_predict_features(m, features.as_ptr(), features.len(), probs.as_mut_ptr(), 4, ptr::null_mut())
    };
    assert_eq!(status, SerStatus::BufferTooSmall);
    let status = unsafe {
        ser_model_predict_features(ptr::null(), features.as_ptr(), features.len(), probs.as_mut_ptr(), 8, ptr::null_mut())
    };
    assert_eq!(status, SerStatus::NullPointer);
    unsafe { ser_model_free(m) };
}

#[test]
fn load_checkpoint_and_predict_wav() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt_path = dir.path().join("m.ckpt");
    let mfcc = MfccConfig::default();
    let ckpt = Checkpoint {
        model: Model::new(ModelConfig::with_layers(1), 9).unwrap(),
        standardizer: Standardizer::identity(mfcc.num_coeffs),
        mfcc,
        meta: TrainingMeta::default(),
        optimizer: None,
    };
    save_checkpoint(&ckpt, &ckpt_path).unwrap();
    let wav = dir.path().join("tone.wav");
    tone(&wav, 2.5, 44_100);

    let mut m: *mut SerModel = ptr::null_mut();
    assert_eq!(unsafe { ser_model_load(cstr(&ckpt_path).as_ptr(), &mut m) }, SerStatus::Ok);
    let mut probs = [0.0; SER_NUM_EMOTIONS];
    let mut class = 0usize;
    let status = unsafe { ser_model_predict_wav(m, cstr(&wav).as_ptr(), probs.as_mut_ptr(), probs.len(), &mut class) };
    assert_eq!(status, SerStatus::Ok, "{}", last_error());

    let mut features = vec![0.0; SER_FEATURE_FRAMES * SER_FEATURE_COEFFS];
    let mut padded = true;
    let status = unsafe { ser_featurize_wav(cstr(&wav).as_ptr(), features.as_mut_ptr(), features.len(), &mut padded) };
    assert_eq!(status, SerStatus::Ok);
    assert!(!padded);
    let mut probs2 = [0.0; SER_NUM_EMOTIONS];
    let status = unsafe {
        ser_model_predict_features(m, features.as_ptr(), features.len(), probs2.as_mut_ptr(), 8, ptr::null_mut())
    };
    assert_eq!(status, SerStatus::Ok);
    assert_eq!(probs, probs2);

    let missing = dir.path().join("missing.wav");
    let status = unsafe { ser_model_predict_wav(m, cstr(&missing).as_ptr(), probs.as_mut_ptr(), 8, ptr::null_mut()) };
    assert_eq!(status, SerStatus::Io);
    assert!(last_error().contains("missing.wav"));
    unsafe { ser_model_free(m) };

    let garbage = dir.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let mut m: *mut SerModel = ptr::null_mut();
    assert_eq!(unsafe { ser_model_load(cstr(&garbage).as_ptr(), &mut m) }, SerStatus::Format);
    assert!(m.is_null());
}

#[test]
fn parse_filename_through_abi() {
    let mut label = SerRavdessLabel::default();
    let name = CString::new("03-01-05-01-02-01-12.wav").unwrap();
    assert_eq!(unsafe { ser_parse_ravdess_filename(name.as_ptr(), &mut label) }, SerStatus::Ok);
    assert_eq!(
        [label.modality, label.vocal_channel, label.emotion, label.intensity, label.statement, label.repetition, label.actor],
        [3, 1, 5, 1, 2, 1, 12]
    );
    assert_eq!(label.emotion_index, 4);
    let name = unsafe { CStr::from_ptr(ser_emotion_name(label.emotion_index as usize)) };
    assert_eq!(name.to_str().unwrap(), "angry");

    let bad = CString::new("03-01-09-01-02-01-12.wav").unwrap();
    assert_eq!(unsafe { ser_parse_ravdess_filename(bad.as_ptr(), &mut label) }, SerStatus::InvalidArgument);
    assert_eq!(unsafe { ser_parse_ravdess_filename(ptr::null(), &mut label) }, SerStatus::NullPointer);
}

#[test]
fn gradient_check_through_abi() {
    let mut err = f64::NAN;
    assert_eq!(unsafe { ser_gradient_check(1, &mut err) }, SerStatus::Ok);
    assert!(err < 1e-6, "{err}");
}

#[test]
fn last_error_truncates_to_buffer() {
    let mut m: *mut SerModel = ptr::null_mut();
    let _ = unsafe { ser_model_new(0, 0, &mut m) };
    let full = last_error();
    let mut buf = [0 as c_char; 6];
    let n = unsafe { ser_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert_eq!(n, full.len());
    let short = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap();
    assert_eq!(short, &full[..5]);
}

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

/// Compiles a C program against the generated header and static library.
#[test]
fn c_program_links_against_header() {
    let header_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    assert!(header_dir.join("ser_lstm.h").is_file());
    let lib = target_dir().join("libser_lstm_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.is_file() {
        eprintln!("skipping C link test: cc or {} unavailable", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include <math.h>
#include "ser_lstm.h"

int main(void) {
    SerModel *m = NULL;
    if (ser_model_new(2, 7, &m) != SER_STATUS_OK) return 1;
    if (ser_model_num_params(m) != 238600) return 2;
    double x[SER_FEATURE_FRAMES * SER_FEATURE_COEFFS] = {0};
    double p[SER_NUM_EMOTIONS];
    size_t cls = 99;
    if (ser_model_predict_features(m, x, SER_FEATURE_FRAMES * SER_FEATURE_COEFFS, p, SER_NUM_EMOTIONS, &cls) != SER_STATUS_OK) return 3;
    double s = 0;
    for (int i = 0; i < SER_NUM_EMOTIONS; i++) s += p[i];
    if (fabs(s - 1.0) > 1e-12 || cls >= SER_NUM_EMOTIONS) return 4;
    SerRavdessLabel l;
    if (ser_parse_ravdess_filename("03-01-05-01-02-01-12.wav", &l) != SER_STATUS_OK || l.actor != 12) return 5;
    if (ser_model_new(5, 0, &m) != SER_STATUS_INVALID_ARGUMENT) return 6;
    char msg[256];
    if (ser_last_error_message(msg, sizeof msg) == 0) return 7;
    ser_model_free(NULL);
    printf("%s\n", ser_emotion_name(cls));
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&header_dir)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status.code());
    let name = String::from_utf8(out.stdout).unwrap();
    assert!(ser_lstm::EMOTION_NAMES.contains(&name.trim()));
}
