//! C ABI over the `ser_lstm` crate.
//!
//! Every function returns a [`SerStatus`] (or a plain value that cannot fail)
//! and never unwinds across the boundary. After a non-OK status the message
//! for the calling thread is available from [`ser_last_error_message`].
//!
//! Models are opaque [`SerModel`] handles created by [`ser_model_load`] or
//! [`ser_model_new`] and released with [`ser_model_free`]. A handle may be
//! shared between threads for prediction.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ser_lstm::audio::AudioError;
use ser_lstm::dataset::parse_filename;
use ser_lstm::features::FeatureError;
use ser_lstm::nn::{gradcheck_config, gradient_check};
use ser_lstm::persistence::load_checkpoint;
use ser_lstm::pipeline::{featurize_wav, PipelineError, Predictor};
use ser_lstm::{
    Matrix, MfccConfig, MfccExtractor, Model, ModelConfig, NnError, PersistError, Standardizer,
};

pub const SER_NUM_EMOTIONS: usize = 8;
pub const SER_FEATURE_FRAMES: usize = 20;
pub const SER_FEATURE_COEFFS: usize = 40;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SerStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Numeric = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Opaque model handle.
pub struct SerModel {
    predictor: Predictor,
}

/// The seven numeric fields of a RAVDESS file name plus the 0-based emotion index.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SerRavdessLabel {
    pub modality: u8,
    pub vocal_channel: u8,
    pub emotion: u8,
    pub intensity: u8,
    pub statement: u8,
    pub repetition: u8,
    pub actor: u8,
    pub emotion_index: u8,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(SerStatus, String);

impl Failure {
    fn new(status: SerStatus, message: impl Into<String>) -> Self {
        Failure(status, message.into())
    }
}

fn audio_status(e: &AudioError) -> SerStatus {
    match e {
        AudioError::Io { .. } => SerStatus::Io,
        AudioError::UnsupportedFormat { .. }
        | AudioError::Corrupt { .. }
        | AudioError::UnsupportedChannels(_)
        | AudioError::SampleRate(_)
        | AudioError::EmptyClip
        | AudioError::NotMono(_) => SerStatus::Format,
    }
}

fn feature_status(e: &FeatureError) -> SerStatus {
    match e {
        FeatureError::Config(_) => SerStatus::InvalidArgument,
        FeatureError::Width { .. } => SerStatus::Shape,
        _ => SerStatus::Format,
    }
}

fn nn_status(e: &NnError) -> SerStatus {
    match e {
        NnError::Shape { .. } | NnError::Numeric(_) => SerStatus::Shape,
        NnError::Config(_) | NnError::Class { .. } => SerStatus::InvalidArgument,
        NnError::InferenceCache => SerStatus::Numeric,
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let status = match &e {
            PipelineError::Audio(a) => audio_status(a),
            PipelineError::Feature(f) => feature_status(f),
            PipelineError::Nn(n) => nn_status(n),
        };
        Failure(status, e.to_string())
    }
}

impl From<PersistError> for Failure {
    fn from(e: PersistError) -> Self {
        let status = match &e {
            PersistError::Io { .. } => SerStatus::Io,
            _ => SerStatus::Format,
        };
        Failure(status, e.to_string())
    }
}

impl From<FeatureError> for Failure {
    fn from(e: FeatureError) -> Self {
        Failure(feature_status(&e), e.to_string())
    }
}

impl From<NnError> for Failure {
    fn from(e: NnError) -> Self {
        Failure(nn_status(&e), e.to_string())
    }
}

/// Runs `f`, converting errors and panics into a status and the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SerStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SerStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(&message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_last_error(&format!("internal panic: {message}"));
            SerStatus::Panic
        }
    }
}

/// # Safety
/// `p` is null or a valid NUL-terminated string.
unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::new(SerStatus::NullPointer, format!("{what} is null")));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(SerStatus::InvalidArgument, format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// # Safety
/// `out` is null or points to `len` writable doubles.
unsafe fn write_probs(
    probs: &[f64],
    class: usize,
    probs_out: *mut f64,
    probs_len: usize,
    class_out: *mut usize,
) -> Result<(), Failure> {
    if probs_out.is_null() {
        return Err(Failure::new(SerStatus::NullPointer, "probs_out is null"));
    }
    if probs_len < probs.len() {
        return Err(Failure::new(
            SerStatus::BufferTooSmall,
            format!("probs_out holds {probs_len} values, need {}", probs.len()),
        ));
    }
    ptr::copy_nonoverlapping(probs.as_ptr(), probs_out, probs.len());
    if !class_out.is_null() {
        *class_out = class;
    }
    Ok(())
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ser_model_load(path: *const c_char, out: *mut *mut SerModel) -> SerStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::new(SerStatus::NullPointer, "out is null"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        let predictor = Predictor::from_checkpoint(load_checkpoint(&path)?)?;
        *out = Box::into_raw(Box::new(SerModel { predictor }));
        Ok(())
    })
}

/// Creates an untrained model with the default architecture and `num_layers`
/// LSTM layers (1 or 2). Features are used without standardization.
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ser_model_new(num_layers: u32, seed: u64, out: *mut *mut SerModel) -> SerStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::new(SerStatus::NullPointer, "out is null"));
        }
        *out = ptr::null_mut();
        let cfg = ModelConfig::with_layers(num_layers as usize);
        let model = Model::new(cfg, seed)?;
        let mfcc = MfccConfig::default();
        let predictor = Predictor {
            standardizer: Standardizer::identity(mfcc.num_coeffs),
            extractor: MfccExtractor::new(mfcc)?,
            model,
        };
        *out = Box::into_raw(Box::new(SerModel { predictor }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ser_model_free(model: *mut SerModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of trainable scalars, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ser_model_num_params(model: *const SerModel) -> usize {
    model.as_ref().map_or(0, |m| m.predictor.model.num_params())
}

/// Number of LSTM layers, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ser_model_num_layers(model: *const SerModel) -> u32 {
    model
        .as_ref()
        .map_or(0, |m| m.predictor.model.config.num_lstm_layers as u32)
}

/// Classifies a raw (unstandardized) `frames × coeffs` MFCC matrix given row-major.
/// Writes `SER_NUM_EMOTIONS` probabilities and, if `class_out` is not null, the argmax.
///
/// # Safety
/// `features` must point to `len` doubles, `probs_out` to `probs_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ser_model_predict_features(
    model: *const SerModel,
    features: *const f64,
    len: usize,
    probs_out: *mut f64,
    probs_len: usize,
    class_out: *mut usize,
) -> SerStatus {
    guard(|| {
        let model = model
            .as_ref()
            .ok_or_else(|| Failure::new(SerStatus::NullPointer, "model is null"))?;
        if features.is_null() {
            return Err(Failure::new(SerStatus::NullPointer, "features is null"));
        }
        let cfg = &model.predictor.model.config;
        let (rows, cols) = (cfg.seq_len, cfg.input_dim);
        if len != rows * cols {
            return Err(Failure::new(
                SerStatus::Shape,
                format!("expected {rows}×{cols} = {} values, got {len}", rows * cols),
            ));
        }
        let data = std::slice::from_raw_parts(features, len).to_vec();
        let m = Matrix::new(rows, cols, data).map_err(|e| Failure::new(SerStatus::Shape, e.to_string()))?;
        let p = model.predictor.predict_features(&m)?;
        write_probs(&p.probabilities, p.class, probs_out, probs_len, class_out)
    })
}

/// Reads, featurizes and classifies a WAV file.
///
/// # Safety
/// `path` must be a NUL-terminated string, `probs_out` point to `probs_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ser_model_predict_wav(
    model: *const SerModel,
    path: *const c_char,
    probs_out: *mut f64,
    probs_len: usize,
    class_out: *mut usize,
) -> SerStatus {
    guard(|| {
        let model = model
            .as_ref()
            .ok_or_else(|| Failure::new(SerStatus::NullPointer, "model is null"))?;
        let path = path_arg(path, "path")?;
        let p = model.predictor.predict_wav(&path)?;
        write_probs(&p.probabilities, p.class, probs_out, probs_len, class_out)
    })
}

/// Computes the pooled `SER_FEATURE_FRAMES × SER_FEATURE_COEFFS` MFCC matrix of a
/// WAV file with default settings, row-major. `padded_out` may be null.
///
/// # Safety
/// `path` must be a NUL-terminated string, `out` point to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ser_featurize_wav(
    path: *const c_char,
    out: *mut f64,
    out_len: usize,
    padded_out: *mut bool,
) -> SerStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        if out.is_null() {
            return Err(Failure::new(SerStatus::NullPointer, "out is null"));
        }
        let extractor = MfccExtractor::new(MfccConfig::default())?;
        let (features, padded) = featurize_wav(&path, &extractor)?;
        let data = features.data();
        if out_len < data.len() {
            return Err(Failure::new(
                SerStatus::BufferTooSmall,
                format!("out holds {out_len} values, need {}", data.len()),
            ));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
        if !padded_out.is_null() {
            *padded_out = padded;
        }
        Ok(())
    })
}

/// Parses a RAVDESS file name such as `03-01-05-01-02-01-12.wav`.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ser_parse_ravdess_filename(name: *const c_char, out: *mut SerRavdessLabel) -> SerStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::new(SerStatus::NullPointer, "out is null"));
        }
        let name = path_arg(name, "name")?;
        let label = parse_filename(&name.to_string_lossy())
            .map_err(|e| Failure::new(SerStatus::InvalidArgument, e.to_string()))?;
        *out = SerRavdessLabel {
            modality: label.modality,
            vocal_channel: label.vocal_channel,
            emotion: label.emotion,
            intensity: label.intensity,
            statement: label.statement,
            repetition: label.repetition,
            actor: label.actor,
            emotion_index: label.emotion_index() as u8,
        };
        Ok(())
    })
}

static EMOTION_CSTRS: [&CStr; SER_NUM_EMOTIONS] = [
    c"neutral",
    c"calm",
    c"happy",
    c"sad",
    c"angry",
    c"fearful",
    c"disgust",
    c"surprised",
];

/// Static name of emotion `index` (0-based), or null when out of range.
#[no_mangle]
pub extern "C" fn ser_emotion_name(index: usize) -> *const c_char {
    EMOTION_CSTRS.get(index).map_or(ptr::null(), |s| s.as_ptr())
}

/// Runs the finite-difference gradient check on the small reference model and
/// writes the largest relative error.
///
/// # Safety
/// `max_rel_error` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ser_gradient_check(seed: u64, max_rel_error: *mut f64) -> SerStatus {
    guard(|| {
        if max_rel_error.is_null() {
            return Err(Failure::new(SerStatus::NullPointer, "max_rel_error is null"));
        }
        *max_rel_error = gradient_check(&gradcheck_config(), seed)?.max_rel_error();
        Ok(())
    })
}

/// Copies the calling thread's last error message (NUL-terminated, truncated
/// to fit) into `buf` and returns the full message length excluding the NUL.
/// Pass a null `buf` to query the length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ser_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ser_lstm::EMOTION_NAMES;

    #[test]
    fn emotion_names_agree_with_core_table() {
        for (i, name) in EMOTION_NAMES.iter().enumerate() {
            let s = unsafe { CStr::from_ptr(ser_emotion_name(i)) };
            assert_eq!(s.to_str().unwrap(), *name);
        }
        assert!(ser_emotion_name(SER_NUM_EMOTIONS).is_null());
    }

    #[test]
    fn constants_match_defaults() {
        let cfg = ModelConfig::default();
        assert_eq!(SER_FEATURE_FRAMES, cfg.seq_len);
        assert_eq!(SER_FEATURE_COEFFS, cfg.input_dim);
        assert_eq!(SER_NUM_EMOTIONS, cfg.num_classes);
    }

    #[test]
    fn panic_becomes_status() {
        let status = guard(|| panic!("boom"));
        assert_eq!(status, SerStatus::Panic);
        let mut buf = [0 as c_char; 64];
        let n = unsafe { ser_last_error_message(buf.as_mut_ptr(), buf.len()) };
        let msg = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap();
        assert_eq!(msg.len(), n);
        assert!(msg.contains("boom"));
    }
}
