//! C ABI for the `quad` calibration library.
//!
//! Every fallible function returns a [`QuadStatus`] and writes its result
//! through an out-pointer. On failure, [`quad_last_error_message`] describes
//! the error for the calling thread. Strings returned by the library must be
//! released with [`quad_string_free`], models with [`quad_model_free`].
//!
//! Labels are encoded as `0` = real, `1` = fake.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use quad::calibration::{
    corrected_logit, fit, fuse_corrected_instances, normalize_quality, CalibrationModel, FitConfig,
};
use quad::metrics::{balanced_accuracy, nll};
use quad::sim::{generate_tree, PipelineConfig, PipelineSampler, TreeConfig};
use quad::types::{Dataset, InstanceMeta, InstanceRecord, Label};
use quad::Error;

pub const QUAD_LABEL_REAL: u8 = 0;
pub const QUAD_LABEL_FAKE: u8 = 1;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    LabelsRequired = 3,
    MissingMetadata = 4,
    Numerical = 5,
    Parse = 6,
    Io = 7,
    InvalidUtf8 = 8,
    Panic = 9,
}

/// Opaque handle to a fitted calibration model.
pub struct QuadModel {
    inner: CalibrationModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(QuadStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidInput(_) => QuadStatus::InvalidInput,
            Error::LabelsRequired(_) => QuadStatus::LabelsRequired,
            Error::MissingMetadata(_) => QuadStatus::MissingMetadata,
            Error::Numerical(_) => QuadStatus::Numerical,
            Error::Parse { .. } | Error::MalformedRows { .. } | Error::Json(_) => QuadStatus::Parse,
            Error::Io { .. } => QuadStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> QuadStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => QuadStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("internal panic: {msg}"));
            QuadStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(QuadStatus::NullPointer, format!("{name} is null"))
}

unsafe fn as_ref<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(name))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(QuadStatus::InvalidUtf8, format!("{name}: {e}")))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, name: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn label(code: u8) -> Result<Label, Failure> {
    match code {
        QUAD_LABEL_REAL => Ok(Label::Real),
        QUAD_LABEL_FAKE => Ok(Label::Fake),
        other => Err(Failure(
            QuadStatus::InvalidInput,
            format!("label must be 0 or 1, got {other}"),
        )),
    }
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|e| Failure(QuadStatus::InvalidInput, e.to_string()))
}

fn records(
    logits: &[f64],
    qualities: &[f64],
    labels: Option<&[u8]>,
) -> Result<Vec<InstanceRecord>, Failure> {
    logits
        .iter()
        .zip(qualities)
        .enumerate()
        .map(|(i, (&logit, &quality))| {
            Ok(InstanceRecord {
                source_id: "ffi".into(),
                instance_id: i.to_string(),
                logit,
                quality,
                label: labels.map(|l| label(l[i])).transpose()?,
                meta: InstanceMeta::default(),
            })
        })
        .collect()
}

/// Message for the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn quad_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn quad_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses and validates a model from its JSON document.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn quad_model_from_json(
    json: *const c_char,
    out_model: *mut *mut QuadModel,
) -> QuadStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        let inner = CalibrationModel::from_json(str_arg(json, "json")?)?;
        *slot = Box::into_raw(Box::new(QuadModel { inner }));
        Ok(())
    })
}

/// Loads a model JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn quad_model_load(
    path: *const c_char,
    out_model: *mut *mut QuadModel,
) -> QuadStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        let path = Path::new(str_arg(path, "path")?);
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let inner = CalibrationModel::from_json(&text)?;
        *slot = Box::into_raw(Box::new(QuadModel { inner }));
        Ok(())
    })
}

/// Serializes a model; free the result with `quad_string_free`.
///
/// # Safety
/// `model` must come from this library; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn quad_model_to_json(
    model: *const QuadModel,
    out_json: *mut *mut c_char,
) -> QuadStatus {
    guard(|| {
        let slot = out(out_json, "out_json")?;
        let json = as_ref(model, "model")?.inner.to_json()?;
        *slot = into_c_string(json)?;
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn quad_model_free(model: *mut QuadModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn quad_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Min-max normalizes a raw quality with the model's range, clamped to [0, 1].
///
/// # Safety
/// `model` must come from this library; `out_q` must be writable.
#[no_mangle]
pub unsafe extern "C" fn quad_normalize_quality(
    model: *const QuadModel,
    quality: f64,
    out_q: *mut f64,
) -> QuadStatus {
    guard(|| {
        let slot = out(out_q, "out_q")?;
        *slot = normalize_quality(quality, &as_ref(model, "model")?.inner)?;
        Ok(())
    })
}

/// Corrected logit of one instance given its raw quality.
///
/// # Safety
/// `model` must come from this library; `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn quad_corrected_logit(
    model: *const QuadModel,
    logit: f64,
    quality: f64,
    out_value: *mut f64,
) -> QuadStatus {
    guard(|| {
        let slot = out(out_value, "out_value")?;
        let m = &as_ref(model, "model")?.inner;
        if !logit.is_finite() {
            return Err(Failure(
                QuadStatus::InvalidInput,
                "logit must be finite".into(),
            ));
        }
        *slot = corrected_logit(logit, normalize_quality(quality, m)?, m);
        Ok(())
    })
}

/// Fused score of one query set of `n` instances; `out_decision` receives
/// the label code (fake iff score > 0).
///
/// # Safety
/// `logits` and `qualities` must point to `n` values; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn quad_fuse(
    model: *const QuadModel,
    logits: *const f64,
    qualities: *const f64,
    n: usize,
    out_score: *mut f64,
    out_decision: *mut u8,
) -> QuadStatus {
    guard(|| {
        let m = &as_ref(model, "model")?.inner;
        let recs = records(
            slice_arg(logits, n, "logits")?,
            slice_arg(qualities, n, "qualities")?,
            None,
        )?;
        let fused = fuse_corrected_instances(&recs, m)?;
        *out(out_score, "out_score")? = fused.score;
        *out(out_decision, "out_decision")? = fused.decision.as_index() as u8;
        Ok(())
    })
}

/// Fits a first-order model on `n` labeled instances.
///
/// # Safety
/// The three arrays must point to `n` values; `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn quad_fit(
    logits: *const f64,
    qualities: *const f64,
    labels: *const u8,
    n: usize,
    out_model: *mut *mut QuadModel,
) -> QuadStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        let recs = records(
            slice_arg(logits, n, "logits")?,
            slice_arg(qualities, n, "qualities")?,
            Some(slice_arg(labels, n, "labels")?),
        )?;
        let inner = fit(&Dataset::from_records(recs), &FitConfig::default())?;
        *slot = Box::into_raw(Box::new(QuadModel { inner }));
        Ok(())
    })
}

/// Balanced accuracy of `n` predicted vs true label codes.
///
/// # Safety
/// Both arrays must point to `n` values; `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn quad_balanced_accuracy(
    predicted: *const u8,
    truth: *const u8,
    n: usize,
    out_value: *mut f64,
) -> QuadStatus {
    guard(|| {
        let slot = out(out_value, "out_value")?;
        let pairs = slice_arg(predicted, n, "predicted")?
            .iter()
            .zip(slice_arg(truth, n, "truth")?)
            .map(|(&p, &t)| Ok((label(p)?, label(t)?)))
            .collect::<Result<Vec<_>, Failure>>()?;
        *slot = balanced_accuracy(&pairs)?;
        Ok(())
    })
}

/// Mean negative log-likelihood of true label codes under logistic scores.
///
/// # Safety
/// Both arrays must point to `n` values; `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn quad_nll(
    scores: *const f64,
    truth: *const u8,
    n: usize,
    out_value: *mut f64,
) -> QuadStatus {
    guard(|| {
        let slot = out(out_value, "out_value")?;
        let pairs = slice_arg(scores, n, "scores")?
            .iter()
            .zip(slice_arg(truth, n, "truth")?)
            .map(|(&s, &t)| Ok((s, label(t)?)))
            .collect::<Result<Vec<_>, Failure>>()?;
        *slot = nll(&pairs)?;
        Ok(())
    })
}

/// Default degradation-tree manifest as JSON; free with `quad_string_free`.
///
/// # Safety
/// `source_id` must be a NUL-terminated string; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn quad_generate_tree_json(
    source_id: *const c_char,
    label_code: u8,
    seed: u64,
    out_json: *mut *mut c_char,
) -> QuadStatus {
    guard(|| {
        let slot = out(out_json, "out_json")?;
        let sampler = PipelineSampler::new(PipelineConfig::default())?;
        let tree = generate_tree(
            str_arg(source_id, "source_id")?,
            label(label_code)?,
            seed,
            &TreeConfig::default(),
            &sampler,
        )?;
        *slot = into_c_string(tree.to_json()?)?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panics_become_status() {
        let s = guard(|| panic!("boom"));
        assert_eq!(s, QuadStatus::Panic);
        let msg = unsafe { CStr::from_ptr(quad_last_error_message()) }
            .to_str()
            .unwrap();
        assert!(msg.contains("boom"));
    }

    #[test]
    fn error_mapping() {
        let f: Failure = Error::Numerical("x".into()).into();
        assert_eq!(f.0, QuadStatus::Numerical);
        let f: Failure = Error::LabelsRequired("x".into()).into();
        assert_eq!(f.0, QuadStatus::LabelsRequired);
    }
}
