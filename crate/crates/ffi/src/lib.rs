//! C interface to the premod toolkit.
//!
//! Every fallible call returns a [`PremodStatus`]. On failure the message is
//! kept per thread and read with [`premod_last_error`]. Objects cross the
//! boundary as opaque handles that the caller releases with the matching
//! `_free` function; passing NULL to a `_free` function is a no-op.

use premod::autodiff::Tensor;
use premod::model::{load_checkpoint, ModelParams};
use premod::recal::{prevalence_to_odds, RecalSpec};
use premod::screen::{CascadeResult, Scenario};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PremodStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Corrupt = 4,
    Panic = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Fail(PremodStatus, String);

impl Fail {
    fn invalid(e: impl ToString) -> Self {
        Fail(PremodStatus::InvalidArgument, e.to_string())
    }
    fn null(what: &str) -> Self {
        Fail(PremodStatus::NullPointer, format!("{what} is NULL"))
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PremodStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            clear_error();
            PremodStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            PremodStatus::Panic
        }
    }
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| Fail::null(what))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::invalid(format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn premod_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a
/// successful call. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn premod_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Prior shift between a training prior and a deployment prior.
pub struct PremodRecal(RecalSpec);

/// Builds a recalibration from source and target prior odds.
///
/// # Safety
/// `out_handle` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn premod_recal_new(
    pi_src: f64,
    pi_tar: f64,
    out_handle: *mut *mut PremodRecal,
) -> PremodStatus {
    guard(|| {
        let o = out(out_handle, "out")?;
        let spec = RecalSpec::new(pi_src, pi_tar).map_err(Fail::invalid)?;
        *o = Box::into_raw(Box::new(PremodRecal(spec)));
        Ok(())
    })
}

/// Builds a recalibration from a `1:ratio` training design and a target
/// prevalence.
///
/// # Safety
/// `out_handle` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn premod_recal_from_ratio(
    ratio: f64,
    target_prevalence: f64,
    out_handle: *mut *mut PremodRecal,
) -> PremodStatus {
    guard(|| {
        let o = out(out_handle, "out")?;
        let pi_tar = prevalence_to_odds(target_prevalence).map_err(Fail::invalid)?;
        let spec = RecalSpec::from_ratio(ratio, pi_tar).map_err(Fail::invalid)?;
        *o = Box::into_raw(Box::new(PremodRecal(spec)));
        Ok(())
    })
}

/// Shifts `n` probabilities in place.
///
/// # Safety
/// `handle` must come from a `premod_recal_*` constructor and `probs` must
/// point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn premod_recal_apply(
    handle: *const PremodRecal,
    probs: *mut f64,
    n: usize,
) -> PremodStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| Fail::null("handle"))?;
        if n == 0 {
            return Ok(());
        }
        if probs.is_null() {
            return Err(Fail::null("probs"));
        }
        for p in std::slice::from_raw_parts_mut(probs, n) {
            *p = premod::recal::recalibrate_prob(*p, &h.0);
        }
        Ok(())
    })
}

/// Additive logit shift of the recalibration.
///
/// # Safety
/// `handle` and `delta` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn premod_recal_delta(
    handle: *const PremodRecal,
    delta: *mut f64,
) -> PremodStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| Fail::null("handle"))?;
        *out(delta, "delta")? = h.0.delta();
        Ok(())
    })
}

/// # Safety
/// `handle` must be NULL or come from a `premod_recal_*` constructor.
#[no_mangle]
pub unsafe extern "C" fn premod_recal_free(handle: *mut PremodRecal) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

unsafe fn pairs(scores: *const f64, labels: *const u8, n: usize) -> Result<Vec<(f64, bool)>, Fail> {
    let s = slice_arg(scores, n, "scores")?;
    let l = slice_arg(labels, n, "labels")?;
    Ok(s.iter().zip(l).map(|(&s, &l)| (s, l != 0)).collect())
}

/// Area under the ROC curve with ties counted as one half. Labels are
/// nonzero for cases.
///
/// # Safety
/// `scores` and `labels` must point to `n` elements; `result` must be valid.
#[no_mangle]
pub unsafe extern "C" fn premod_auroc(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    result: *mut f64,
) -> PremodStatus {
    guard(|| {
        let r = out(result, "result")?;
        *r = premod::metrics::auroc(&pairs(scores, labels, n)?).map_err(Fail::invalid)?;
        Ok(())
    })
}

/// Expected calibration error over `n_bins` equal-width bins.
///
/// # Safety
/// As for [`premod_auroc`].
#[no_mangle]
pub unsafe extern "C" fn premod_ece(
    probs: *const f64,
    labels: *const u8,
    n: usize,
    n_bins: usize,
    result: *mut f64,
) -> PremodStatus {
    guard(|| {
        let r = out(result, "result")?;
        *r = premod::metrics::ece(&pairs(probs, labels, n)?, n_bins).map_err(Fail::invalid)?;
        Ok(())
    })
}

/// Mean squared error of probabilities against labels.
///
/// # Safety
/// As for [`premod_auroc`].
#[no_mangle]
pub unsafe extern "C" fn premod_brier(
    probs: *const f64,
    labels: *const u8,
    n: usize,
    result: *mut f64,
) -> PremodStatus {
    guard(|| {
        let r = out(result, "result")?;
        *r = premod::metrics::brier(&pairs(probs, labels, n)?).map_err(Fail::invalid)?;
        Ok(())
    })
}

/// Outcome of a screening cascade.
pub struct PremodCascade(CascadeResult);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PremodCascadeSummary {
    pub n_stages: usize,
    pub detected: f64,
    pub nns: f64,
    pub nns_base: f64,
    pub efficiency: f64,
    pub ppv: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PremodStage {
    pub population: f64,
    pub prevalence: f64,
    pub cases: f64,
    pub true_positives: f64,
    pub false_positives: f64,
    pub positives: f64,
}

fn run_scenario(s: Scenario, o: &mut *mut PremodCascade) -> Result<(), Fail> {
    let r = s.run().map_err(Fail::invalid)?;
    *o = Box::into_raw(Box::new(PremodCascade(r)));
    Ok(())
}

/// Runs a built-in scenario (`premod_redmod`, `endpac`, `eus_only`).
///
/// # Safety
/// `name` must be a NUL-terminated string and `out_handle` valid.
#[no_mangle]
pub unsafe extern "C" fn premod_cascade_builtin(
    name: *const c_char,
    out_handle: *mut *mut PremodCascade,
) -> PremodStatus {
    guard(|| {
        let o = out(out_handle, "out")?;
        let name = str_arg(name, "name")?;
        let s = Scenario::builtin(name)
            .ok_or_else(|| Fail::invalid(format!("InvalidScenario: unknown {name:?}")))?;
        run_scenario(s, o)
    })
}

/// Runs a scenario given as TOML text.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out_handle` valid.
#[no_mangle]
pub unsafe extern "C" fn premod_cascade_from_toml(
    toml: *const c_char,
    out_handle: *mut *mut PremodCascade,
) -> PremodStatus {
    guard(|| {
        let o = out(out_handle, "out")?;
        let s = Scenario::from_toml(str_arg(toml, "toml")?).map_err(Fail::invalid)?;
        run_scenario(s, o)
    })
}

/// # Safety
/// `handle` and `summary` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn premod_cascade_summary(
    handle: *const PremodCascade,
    summary: *mut PremodCascadeSummary,
) -> PremodStatus {
    guard(|| {
        let r = &handle.as_ref().ok_or_else(|| Fail::null("handle"))?.0;
        *out(summary, "summary")? = PremodCascadeSummary {
            n_stages: r.stages.len(),
            detected: r.detected,
            nns: r.nns,
            nns_base: r.nns_base,
            efficiency: r.efficiency,
            ppv: r.ppv,
        };
        Ok(())
    })
}

/// Stage `i` of the cascade, in screening order.
///
/// # Safety
/// `handle` and `stage` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn premod_cascade_stage(
    handle: *const PremodCascade,
    i: usize,
    stage: *mut PremodStage,
) -> PremodStatus {
    guard(|| {
        let r = &handle.as_ref().ok_or_else(|| Fail::null("handle"))?.0;
        let s = r
            .stages
            .get(i)
            .ok_or_else(|| Fail::invalid(format!("stage {i} out of range")))?;
        *out(stage, "stage")? = PremodStage {
            population: s.population,
            prevalence: s.prevalence,
            cases: s.cases,
            true_positives: s.true_positives,
            false_positives: s.false_positives,
            positives: s.positives,
        };
        Ok(())
    })
}

/// # Safety
/// `handle` must be NULL or come from a `premod_cascade_*` constructor.
#[no_mangle]
pub unsafe extern "C" fn premod_cascade_free(handle: *mut PremodCascade) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// A trained classifier loaded from a checkpoint.
pub struct PremodModel(ModelParams);

/// Loads a checkpoint from memory.
///
/// # Safety
/// `bytes` must point to `len` bytes and `out_handle` must be valid.
#[no_mangle]
pub unsafe extern "C" fn premod_model_load(
    bytes: *const u8,
    len: usize,
    out_handle: *mut *mut PremodModel,
) -> PremodStatus {
    guard(|| {
        let o = out(out_handle, "out")?;
        let b = slice_arg(bytes, len, "bytes")?;
        let ck =
            load_checkpoint(b, None).map_err(|e| Fail(PremodStatus::Corrupt, e.to_string()))?;
        *o = Box::into_raw(Box::new(PremodModel(ck.params)));
        Ok(())
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out_handle` valid.
#[no_mangle]
pub unsafe extern "C" fn premod_model_load_file(
    path: *const c_char,
    out_handle: *mut *mut PremodModel,
) -> PremodStatus {
    guard(|| {
        out(out_handle, "out")?;
        let path = str_arg(path, "path")?;
        let b = std::fs::read(path).map_err(|e| Fail(PremodStatus::Io, format!("{path}: {e}")))?;
        match premod_model_load(b.as_ptr(), b.len(), out_handle) {
            PremodStatus::Ok => Ok(()),
            s => Err(Fail(s, last_error_string())),
        }
    })
}

fn last_error_string() -> String {
    LAST_ERROR.with(|e| {
        e.borrow()
            .as_ref()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    })
}

/// Input shape expected by the model: buckets by features.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn premod_model_dims(
    handle: *const PremodModel,
    n_buckets: *mut usize,
    n_features: *mut usize,
) -> PremodStatus {
    guard(|| {
        let m = &handle.as_ref().ok_or_else(|| Fail::null("handle"))?.0;
        *out(n_buckets, "n_buckets")? = m.config.n_buckets;
        *out(n_features, "n_features")? = m.config.n_features;
        Ok(())
    })
}

/// Scores one row-major bucket matrix (bucket 0 nearest the index day).
///
/// # Safety
/// `values` must point to `len` doubles; `logit` and `prob` must be valid.
#[no_mangle]
pub unsafe extern "C" fn premod_model_score(
    handle: *const PremodModel,
    values: *const f64,
    len: usize,
    logit: *mut f64,
    prob: *mut f64,
) -> PremodStatus {
    guard(|| {
        let m = &handle.as_ref().ok_or_else(|| Fail::null("handle"))?.0;
        let (t, d) = (m.config.n_buckets, m.config.n_features);
        if len != t * d {
            return Err(Fail::invalid(format!(
                "expected {t}x{d} = {} values, got {len}",
                t * d
            )));
        }
        let x = Tensor::from_rows(t, d, slice_arg(values, len, "values")?.to_vec())
            .map_err(Fail::invalid)?;
        let f = m.forward(&x).map_err(Fail::invalid)?;
        *out(logit, "logit")? = f.logit;
        *out(prob, "prob")? = f.prob;
        Ok(())
    })
}

/// # Safety
/// `handle` must be NULL or come from a `premod_model_load*` function.
#[no_mangle]
pub unsafe extern "C" fn premod_model_free(handle: *mut PremodModel) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err() -> String {
        let p = premod_last_error();
        assert!(!p.is_null());
        unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
    }

    #[test]
    fn version_matches_crate() {
        let v = unsafe { CStr::from_ptr(premod_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn recal_roundtrip_and_errors() {
        unsafe {
            let mut h = ptr::null_mut();
            assert_eq!(premod_recal_new(0.1, 0.1, &mut h), PremodStatus::Ok);
            assert!(premod_last_error().is_null());
            let mut p = [0.2, 0.7];
            assert_eq!(premod_recal_apply(h, p.as_mut_ptr(), 2), PremodStatus::Ok);
            assert!((p[0] - 0.2).abs() < 1e-15 && (p[1] - 0.7).abs() < 1e-15);
            premod_recal_free(h);

            let mut h = ptr::null_mut();
            assert_eq!(premod_recal_from_ratio(10.0, 0.5, &mut h), PremodStatus::Ok);
            let mut delta = 0.0;
            assert_eq!(premod_recal_delta(h, &mut delta), PremodStatus::Ok);
            assert!((delta - 10f64.ln()).abs() < 1e-12);
            premod_recal_free(h);

            assert_eq!(
                premod_recal_new(-1.0, 0.1, &mut h),
                PremodStatus::InvalidArgument
            );
            assert!(!err().is_empty());
            assert_eq!(
                premod_recal_new(0.1, 0.1, ptr::null_mut()),
                PremodStatus::NullPointer
            );
            premod_recal_free(ptr::null_mut());
        }
    }

    #[test]
    fn metrics_through_the_abi() {
        let s = [0.1, 0.4, 0.35, 0.8];
        let l = [0u8, 0, 1, 1];
        let mut r = 0.0;
        unsafe {
            assert_eq!(
                premod_auroc(s.as_ptr(), l.as_ptr(), 4, &mut r),
                PremodStatus::Ok
            );
            assert_eq!(r, 0.75);
            assert_eq!(
                premod_brier(s.as_ptr(), l.as_ptr(), 4, &mut r),
                PremodStatus::Ok
            );
            let want = (0.01 + 0.16 + 0.65f64.powi(2) + 0.04) / 4.0;
            assert!((r - want).abs() < 1e-15);
            assert_eq!(
                premod_ece(s.as_ptr(), l.as_ptr(), 4, 10, &mut r),
                PremodStatus::Ok
            );
            let only_controls = [0u8; 4];
            assert_eq!(
                premod_auroc(s.as_ptr(), only_controls.as_ptr(), 4, &mut r),
                PremodStatus::InvalidArgument
            );
            assert_eq!(
                premod_auroc(ptr::null(), l.as_ptr(), 4, &mut r),
                PremodStatus::NullPointer
            );
        }
    }

    #[test]
    fn cascade_handle() {
        unsafe {
            let mut h = ptr::null_mut();
            let name = CString::new("premod_redmod").unwrap();
            assert_eq!(
                premod_cascade_builtin(name.as_ptr(), &mut h),
                PremodStatus::Ok
            );
            let mut s = PremodCascadeSummary::default();
            assert_eq!(premod_cascade_summary(h, &mut s), PremodStatus::Ok);
            assert_eq!(s.n_stages, 3);
            assert!((s.detected - 20.97).abs() < 0.01);
            let mut st = PremodStage::default();
            assert_eq!(premod_cascade_stage(h, 0, &mut st), PremodStatus::Ok);
            assert!((st.positives - 44816.77).abs() < 0.01);
            assert_eq!(
                premod_cascade_stage(h, 3, &mut st),
                PremodStatus::InvalidArgument
            );
            premod_cascade_free(h);

            let bad = CString::new("nope").unwrap();
            assert_eq!(
                premod_cascade_builtin(bad.as_ptr(), &mut h),
                PremodStatus::InvalidArgument
            );
            assert!(err().contains("nope"));
        }
    }

    #[test]
    fn model_load_and_score() {
        use premod::encode::EncoderConfig;
        use premod::model::{save_checkpoint, Aggregation, Checkpoint, ModelConfig};
        let enc = EncoderConfig::new(30, 4, vec!["A".into()], vec!["glu".into()]).unwrap();
        let cfg = ModelConfig {
            n_buckets: 4,
            n_features: 2,
            d_model: 4,
            n_layers: 1,
            n_heads: 1,
            aggregation: Aggregation::Additive(1),
        };
        let params = ModelParams::init(cfg, 9).unwrap();
        let x = vec![0.0, 1.0, 0.5, 0.0, 0.0, 0.0, 1.0, -0.3];
        let want = params
            .forward(&Tensor::from_rows(4, 2, x.clone()).unwrap())
            .unwrap();
        let bytes = save_checkpoint(&Checkpoint::new(params, &enc, None));
        unsafe {
            let mut h = ptr::null_mut();
            assert_eq!(
                premod_model_load(bytes.as_ptr(), bytes.len(), &mut h),
                PremodStatus::Ok
            );
            let (mut t, mut d) = (0, 0);
            assert_eq!(premod_model_dims(h, &mut t, &mut d), PremodStatus::Ok);
            assert_eq!((t, d), (4, 2));
            let (mut z, mut p) = (0.0, 0.0);
            assert_eq!(
                premod_model_score(h, x.as_ptr(), 8, &mut z, &mut p),
                PremodStatus::Ok
            );
            assert_eq!((z, p), (want.logit, want.prob));
            assert_eq!(
                premod_model_score(h, x.as_ptr(), 7, &mut z, &mut p),
                PremodStatus::InvalidArgument
            );
            premod_model_free(h);

            let junk = [1u8, 2, 3];
            assert_eq!(
                premod_model_load(junk.as_ptr(), 3, &mut h),
                PremodStatus::Corrupt
            );
            let missing = CString::new("/nonexistent/model.ckpt").unwrap();
            assert_eq!(
                premod_model_load_file(missing.as_ptr(), &mut h),
                PremodStatus::Io
            );
        }
    }
}
