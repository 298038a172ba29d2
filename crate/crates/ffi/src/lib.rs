//! C ABI over `gjeval-core`.
//!
//! Every fallible function returns a [`GjStatus`]; on failure the message is
//! available from [`gj_last_error`] on the same thread. Objects cross the
//! boundary as opaque handles that must be released with their `_free`
//! function. Strings returned to the caller are freed with
//! [`gj_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use gjeval_core::aggregation::evaluate;
use gjeval_core::data::{parse_predictions, Dataset};
use gjeval_core::fusion::{forward, FeatureBundle, Grid, HeadDims, HeadParams};
use gjeval_core::metrics::{cohen_kappa, wald_ci, ConfusionMatrix, EvalLevel, MetricReport};
use gjeval_core::report::to_json_bytes;
use gjeval_core::stats::{bowker_from_table, chi2_sf, delong_test, std_normal_cdf, BowkerDf};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GjStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Degenerate = 4,
    Panic = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GjLevel {
    Image = 0,
    Patient = 1,
    Weighted = 2,
}

/// Parsed prediction file.
pub struct GjDataset(Dataset);

/// Metrics of one evaluation.
pub struct GjReport(MetricReport);

/// Fusion-head parameters.
pub struct GjHead(HeadParams);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct GjTest {
    pub statistic: f64,
    /// Degrees of freedom; 0 for normal-based tests.
    pub df: u32,
    pub p: f64,
    /// Nonzero when the test fell back to its degenerate answer.
    pub degenerate: u8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct GjDeLong {
    pub auc_a: f64,
    pub auc_b: f64,
    pub test: GjTest,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Fail(GjStatus, String);

impl Fail {
    fn null(what: &str) -> Self {
        Fail(GjStatus::NullPointer, format!("{what} is null"))
    }
    fn arg(msg: impl std::fmt::Display) -> Self {
        Fail(GjStatus::InvalidArgument, msg.to_string())
    }
}

/// Runs `f`, turning errors and panics into a status plus a stored message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GjStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            GjStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            GjStatus::Panic
        }
    }
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| Fail::null(what))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn table(p: *const f64) -> Result<[[f64; 3]; 3], Fail> {
    let v = slice(p, 9, "table")?;
    if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Fail::arg("table entries must be finite and non-negative"));
    }
    Ok([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
}

fn c_string(bytes: Vec<u8>) -> Result<*mut c_char, Fail> {
    CString::new(bytes)
        .map(CString::into_raw)
        .map_err(|_| Fail::arg("string contains NUL"))
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn gj_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn gj_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Upper-tail probability of a chi-square variable with `df` degrees of
/// freedom.
#[no_mangle]
pub extern "C" fn gj_chi2_sf(x: f64, df: u32) -> f64 {
    chi2_sf(x, df)
}

#[no_mangle]
pub extern "C" fn gj_normal_cdf(x: f64) -> f64 {
    std_normal_cdf(x)
}

/// 95% Wald interval of a proportion, clipped to [0, 1].
///
/// # Safety
/// `lo` and `hi` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gj_wald_ci(p: f64, n: f64, lo: *mut f64, hi: *mut f64) -> GjStatus {
    guard(|| {
        if !(0.0..=1.0).contains(&p) || !(n > 0.0 && n.is_finite()) {
            return Err(Fail::arg(format!("need 0 <= p <= 1 and n > 0, got p={p} n={n}")));
        }
        let (l, h) = wald_ci(p, n);
        *out_ref(lo, "lo")? = l;
        *out_ref(hi, "hi")? = h;
        Ok(())
    })
}

/// Cohen's kappa of a row-major 3x3 table (rows: first rater).
///
/// # Safety
/// `cm` must point to 9 doubles; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gj_kappa(cm: *const f64, out: *mut f64) -> GjStatus {
    guard(|| {
        let t = table(cm)?;
        let k = cohen_kappa(&ConfusionMatrix::from_counts(t)).map_err(|e| Fail(GjStatus::Degenerate, e.to_string()))?;
        *out_ref(out, "out")? = k;
        Ok(())
    })
}

/// McNemar-Bowker test of a row-major 3x3 paired table. Empty off-diagonal
/// pairs are dropped from the statistic and the degrees of freedom.
///
/// # Safety
/// `t` must point to 9 doubles; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gj_bowker(t: *const f64, out: *mut GjTest) -> GjStatus {
    guard(|| {
        let r = bowker_from_table(&table(t)?, BowkerDf::DropEmpty);
        *out_ref(out, "out")? = GjTest {
            statistic: r.statistic,
            df: r.df.unwrap_or(0),
            p: r.p_value,
            degenerate: r.is_degenerate() as u8,
        };
        Ok(())
    })
}

/// Paired DeLong test. `labels[i]` is nonzero for positives.
///
/// # Safety
/// Each array must hold `n` elements; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gj_delong(
    scores_a: *const f64,
    scores_b: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut GjDeLong,
) -> GjStatus {
    guard(|| {
        let a = slice(scores_a, n, "scores_a")?;
        let b = slice(scores_b, n, "scores_b")?;
        let labels: Vec<bool> = slice(labels, n, "labels")?.iter().map(|&l| l != 0).collect();
        let r = delong_test(a, b, &labels).map_err(Fail::arg)?;
        *out_ref(out, "out")? = GjDeLong {
            auc_a: r.detail["auc_a"],
            auc_b: r.detail["auc_b"],
            test: GjTest {
                statistic: r.statistic,
                df: 0,
                p: r.p_value,
                degenerate: r.is_degenerate() as u8,
            },
        };
        Ok(())
    })
}

/// Parses a predictions CSV held in memory.
///
/// # Safety
/// `csv` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gj_dataset_from_csv(csv: *const c_char, strict: u8, out: *mut *mut GjDataset) -> GjStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        if csv.is_null() {
            return Err(Fail::null("csv"));
        }
        let bytes = CStr::from_ptr(csv).to_bytes();
        let parsed = parse_predictions(bytes, strict != 0).map_err(|e| Fail(GjStatus::Parse, e.to_string()))?;
        *out = Box::into_raw(Box::new(GjDataset(parsed.dataset)));
        Ok(())
    })
}

/// Number of images, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gj_dataset_len(ds: *const GjDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `ds` must be null or a handle from [`gj_dataset_from_csv`], freed once.
#[no_mangle]
pub unsafe extern "C" fn gj_dataset_free(ds: *mut GjDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `ds` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gj_evaluate(ds: *const GjDataset, level: GjLevel, out: *mut *mut GjReport) -> GjStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let ds = ds.as_ref().ok_or_else(|| Fail::null("dataset"))?;
        let level = match level {
            GjLevel::Image => EvalLevel::Image,
            GjLevel::Patient => EvalLevel::Patient,
            GjLevel::Weighted => EvalLevel::Weighted,
        };
        let ev = evaluate(&ds.0, level).map_err(Fail::arg)?;
        *out = Box::into_raw(Box::new(GjReport(ev.report)));
        Ok(())
    })
}

/// Overall accuracy and its interval.
///
/// # Safety
/// `r` must be a live handle; the outputs must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gj_report_accuracy(r: *const GjReport, value: *mut f64, lo: *mut f64, hi: *mut f64) -> GjStatus {
    guard(|| {
        let r = r.as_ref().ok_or_else(|| Fail::null("report"))?;
        let acc = r.0.overall.accuracy.ok_or_else(|| Fail(GjStatus::Degenerate, "accuracy undefined".into()))?;
        *out_ref(value, "value")? = acc.value;
        *out_ref(lo, "lo")? = acc.ci_low;
        *out_ref(hi, "hi")? = acc.ci_high;
        Ok(())
    })
}

/// Full report as JSON; free the string with [`gj_string_free`].
///
/// # Safety
/// `r` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gj_report_json(r: *const GjReport, out: *mut *mut c_char) -> GjStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let r = r.as_ref().ok_or_else(|| Fail::null("report"))?;
        *out = c_string(to_json_bytes(&r.0))?;
        Ok(())
    })
}

/// # Safety
/// `r` must be null or a handle from [`gj_evaluate`], freed once.
#[no_mangle]
pub unsafe extern "C" fn gj_report_free(r: *mut GjReport) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Freshly initialized head.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gj_head_init(
    c: usize,
    c_res: usize,
    hidden: usize,
    dropout: f64,
    seed: u64,
    out: *mut *mut GjHead,
) -> GjStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let p = HeadParams::init(HeadDims { c, c_res, hidden }, dropout, seed).map_err(Fail::arg)?;
        *out = Box::into_raw(Box::new(GjHead(p)));
        Ok(())
    })
}

/// Loads parameters written by `fusion-demo` (`params.json`).
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gj_head_from_json(json: *const c_char, out: *mut *mut GjHead) -> GjStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        if json.is_null() {
            return Err(Fail::null("json"));
        }
        let s = CStr::from_ptr(json).to_str().map_err(|_| Fail(GjStatus::Parse, "not UTF-8".into()))?;
        let p = HeadParams::from_json(s).map_err(|e| Fail(GjStatus::Parse, e.to_string()))?;
        *out = Box::into_raw(Box::new(GjHead(p)));
        Ok(())
    })
}

/// # Safety
/// `h` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gj_head_to_json(h: *const GjHead, out: *mut *mut c_char) -> GjStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let h = h.as_ref().ok_or_else(|| Fail::null("head"))?;
        *out = c_string(h.0.to_json().into_bytes())?;
        Ok(())
    })
}

/// Class probabilities (A-EGJA, E-EGJA, control) for pooled feature vectors:
/// `dino` of length `c` (class token plus mean patch token) and `res` of
/// length `c_res`.
///
/// # Safety
/// `h` must be a live handle, the arrays must hold the stated lengths and
/// `probs` must point to 3 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn gj_head_predict(
    h: *const GjHead,
    dino: *const f64,
    c: usize,
    res: *const f64,
    c_res: usize,
    probs: *mut f64,
) -> GjStatus {
    guard(|| {
        let h = h.as_ref().ok_or_else(|| Fail::null("head"))?;
        let bundle = FeatureBundle {
            f_cls: slice(dino, c, "dino")?.to_vec(),
            f_grid_dino: Grid::zeros(1, 1, c),
            f_grid_res: Grid::from_vector(slice(res, c_res, "res")?.to_vec()),
        };
        let fw = forward(&bundle, &h.0, None).map_err(Fail::arg)?;
        if probs.is_null() {
            return Err(Fail::null("probs"));
        }
        std::slice::from_raw_parts_mut(probs, 3).copy_from_slice(&fw.probs);
        Ok(())
    })
}

/// # Safety
/// `h` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn gj_head_free(h: *mut GjHead) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}
