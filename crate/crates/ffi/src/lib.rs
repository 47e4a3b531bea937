//! C ABI over tagkit.
//!
//! Every fallible call returns a [`TagkitStatus`]. On failure the message is
//! kept per thread and read with [`tagkit_last_error`]. Architectures and
//! calibration tables are opaque handles released with their `_free`
//! function; strings returned through out-pointers are released with
//! [`tagkit_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use tagkit::archdsl::{self, ArchSpec, Geometry};
use tagkit::calibsvc::{self, CalibError, CalibrationTable, Verdict};
use tagkit::complexity;
use tagkit::eval;
use tagkit::multilabel;
use tagkit::network::HeadConfig;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TagkitStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    InvalidArgument = 4,
    NotFound = 5,
    Io = 6,
    Panic = 7,
}

/// Parsed architecture.
pub struct TagkitArch(ArchSpec);

/// Per-tag calibration table.
pub struct TagkitTable(CalibrationTable);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct TagkitComplexity {
    pub total_ops: u64,
    pub total_params: u64,
    pub layers: usize,
    pub conv_layers: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct TagkitSuggestion {
    pub bias: f64,
    pub window_precision: f64,
    pub window_posterior: f64,
    pub judged_in_window: usize,
    /// Judgments never cross the target; `bias` is the end of the scanned range.
    pub unconstrained: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(TagkitStatus, String);

impl From<CalibError> for Failure {
    fn from(e: CalibError) -> Self {
        let status = match &e {
            CalibError::UnknownTag(_) | CalibError::UnknownPhoto(_) => TagkitStatus::NotFound,
            CalibError::Format { .. } | CalibError::FutureVersion(_) | CalibError::Json(_) => TagkitStatus::Parse,
            CalibError::Io(_) => TagkitStatus::Io,
            _ => TagkitStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: TagkitStatus, msg: impl ToString) -> Failure {
    Failure(status, msg.to_string())
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TagkitStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            TagkitStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            TagkitStatus::Panic
        }
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(TagkitStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(TagkitStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(TagkitStatus::NullArgument, format!("{what} is null")))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| fail(TagkitStatus::NullArgument, format!("{what} is null")))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    match (p.is_null(), n) {
        (_, 0) => Ok(&[]),
        (true, _) => Err(fail(TagkitStatus::NullArgument, format!("{what} is null"))),
        (false, _) => Ok(std::slice::from_raw_parts(p, n)),
    }
}

fn out_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s).map(CString::into_raw).map_err(|_| fail(TagkitStatus::InvalidArgument, "string contains a nul byte"))
}

/// Message of the last failed call on this thread, or null after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn tagkit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version, statically allocated.
#[no_mangle]
pub extern "C" fn tagkit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` is null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tagkit_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses an architecture file (`name: notation`).
///
/// # Safety
/// `text` is a nul-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn tagkit_arch_parse(text: *const c_char, out: *mut *mut TagkitArch) -> TagkitStatus {
    guard(|| {
        let out = handle_mut(out, "out")?;
        let spec = archdsl::parse_arch_file(c_str(text, "text")?).map_err(|e| fail(TagkitStatus::Parse, e))?;
        *out = Box::into_raw(Box::new(TagkitArch(spec)));
        Ok(())
    })
}

/// Looks up a built-in architecture such as `yfnet_a` or `ctc_j`.
///
/// # Safety
/// `name` is a nul-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn tagkit_arch_builtin(name: *const c_char, out: *mut *mut TagkitArch) -> TagkitStatus {
    guard(|| {
        let out = handle_mut(out, "out")?;
        let name = c_str(name, "name")?;
        let spec = archdsl::builtin(name).ok_or_else(|| fail(TagkitStatus::NotFound, format!("no built-in architecture `{name}`")))?;
        *out = Box::into_raw(Box::new(TagkitArch(spec)));
        Ok(())
    })
}

/// Canonical file text for `arch`; free with [`tagkit_string_free`].
///
/// # Safety
/// `arch` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn tagkit_arch_render(arch: *const TagkitArch, out: *mut *mut c_char) -> TagkitStatus {
    guard(|| {
        let out = handle_mut(out, "out")?;
        *out = out_string(archdsl::render_arch_file(&handle(arch, "arch")?.0))?;
        Ok(())
    })
}

/// Totals for `arch` on an `height`×`width`×`channels` input with the
/// standard head (SPP 6/3/2/1, two 4096-wide layers) and `num_classes` outputs.
///
/// # Safety
/// `arch` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn tagkit_arch_complexity(
    arch: *const TagkitArch,
    height: usize,
    width: usize,
    channels: usize,
    num_classes: usize,
    out: *mut TagkitComplexity,
) -> TagkitStatus {
    guard(|| {
        let out = handle_mut(out, "out")?;
        let head = HeadConfig::imagenet(num_classes);
        let plan = archdsl::expand_layers(&handle(arch, "arch")?.0, Geometry::new(height, width, channels), &head)
            .map_err(|e| fail(TagkitStatus::InvalidArgument, e))?;
        let report = complexity::count_complexity(&plan);
        *out = TagkitComplexity {
            total_ops: report.total_ops,
            total_params: report.total_params,
            layers: plan.layers.len(),
            conv_layers: plan.conv_layer_count(),
        };
        Ok(())
    })
}

/// # Safety
/// `arch` is null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tagkit_arch_free(arch: *mut TagkitArch) {
    if !arch.is_null() {
        drop(Box::from_raw(arch));
    }
}

/// Non-interpolated average precision of `n` scored items.
///
/// # Safety
/// `scores` and `relevant` hold `n` elements; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn tagkit_average_precision(scores: *const f64, relevant: *const bool, n: usize, out: *mut f64) -> TagkitStatus {
    guard(|| {
        let out = handle_mut(out, "out")?;
        let ap = eval::average_precision(slice(scores, n, "scores")?, slice(relevant, n, "relevant")?)
            .map_err(|e| fail(TagkitStatus::InvalidArgument, e))?;
        *out = ap;
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn tagkit_posterior(logit: f64, bias: f64) -> f64 {
    multilabel::posterior(logit, bias)
}

/// Logit of probability `p`; the inverse of [`tagkit_posterior`] at zero bias.
#[no_mangle]
pub extern "C" fn tagkit_logit(p: f64) -> f64 {
    multilabel::logit(p)
}

/// Bias that calibrates `n` judged items within the posterior window
/// `[p - width, p + width]`.
///
/// # Safety
/// `logits` and `correct` hold `n` elements; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn tagkit_suggest_bias(
    logits: *const f64,
    correct: *const bool,
    n: usize,
    p: f64,
    width: f64,
    out: *mut TagkitSuggestion,
) -> TagkitStatus {
    guard(|| {
        let out = handle_mut(out, "out")?;
        let judged: Vec<(f64, Verdict)> = slice(logits, n, "logits")?
            .iter()
            .zip(slice(correct, n, "correct")?)
            .map(|(&s, &c)| (s, if c { Verdict::Correct } else { Verdict::Incorrect }))
            .collect();
        let s = calibsvc::suggest_bias(&judged, p, width)?;
        *out = TagkitSuggestion {
            bias: s.bias,
            window_precision: s.window_precision,
            window_posterior: s.window_posterior,
            judged_in_window: s.judged_in_window,
            unconstrained: s.unconstrained,
        };
        Ok(())
    })
}

/// # Safety
/// `path` is a nul-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn tagkit_table_load(path: *const c_char, out: *mut *mut TagkitTable) -> TagkitStatus {
    guard(|| {
        let out = handle_mut(out, "out")?;
        let table = CalibrationTable::load(Path::new(c_str(path, "path")?))?;
        *out = Box::into_raw(Box::new(TagkitTable(table)));
        Ok(())
    })
}

/// Number of tags in `table`, 0 for null.
///
/// # Safety
/// `table` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tagkit_table_len(table: *const TagkitTable) -> usize {
    table.as_ref().map_or(0, |t| t.0.entries.len())
}

/// # Safety
/// `table` is a live handle; `tag` is a nul-terminated string; `bias` and
/// `enabled` are writable.
#[no_mangle]
pub unsafe extern "C" fn tagkit_table_get(table: *const TagkitTable, tag: *const c_char, bias: *mut f64, enabled: *mut bool) -> TagkitStatus {
    guard(|| {
        let table = handle(table, "table")?;
        let tag = c_str(tag, "tag")?;
        let (bias, enabled) = (handle_mut(bias, "bias")?, handle_mut(enabled, "enabled")?);
        let e = table.0.entries.get(tag).ok_or_else(|| CalibError::UnknownTag(tag.into()))?;
        *bias = e.bias;
        *enabled = e.enabled;
        Ok(())
    })
}

/// Sets the bias of a tag already in the table.
///
/// # Safety
/// `table` is a live handle; `tag` is a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tagkit_table_set_bias(table: *mut TagkitTable, tag: *const c_char, bias: f64) -> TagkitStatus {
    guard(|| {
        let table = handle_mut(table, "table")?;
        let tag = c_str(tag, "tag")?;
        if !bias.is_finite() {
            return Err(fail(TagkitStatus::InvalidArgument, "bias must be finite"));
        }
        let e = table.0.entries.get_mut(tag).ok_or_else(|| CalibError::UnknownTag(tag.into()))?;
        e.bias = bias;
        Ok(())
    })
}

/// Writes `table` to `path` atomically.
///
/// # Safety
/// `table` is a live handle; `path` is a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tagkit_table_save(table: *const TagkitTable, path: *const c_char) -> TagkitStatus {
    guard(|| {
        handle(table, "table")?.0.persist(Path::new(c_str(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `table` is null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tagkit_table_free(table: *mut TagkitTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}
