//! C ABI over the budget arithmetic and metric primitives. Every function
//! is prefixed `lmx_`, returns a status code (or a value that cannot
//! fail), and touches caller memory only through out-pointers. Strings
//! cross the boundary as NUL-terminated UTF-8; strings we allocate are
//! released with [`lmx_string_free`]. The matching declarations live in
//! `include/loramix.h`.

use std::ffi::{c_char, c_int, CStr, CString};

use loramix::audio::{audio_token_budget, max_duration_s, subsampled_len};
use loramix::decoder::peak_lr;
use loramix::error::Error;
use loramix::eval::{bleu, cer, cot_split, error_rate, wer, BleuTokenizer};
use loramix::vision::plan_crops;

pub const LMX_OK: c_int = 0;
/// Numeric argument outside the function's domain.
pub const LMX_ERR_DOMAIN: c_int = 1;
/// Invalid configuration (unknown language, bad geometry).
pub const LMX_ERR_CONFIG: c_int = 2;
/// Malformed data.
pub const LMX_ERR_DATA: c_int = 3;
/// The metric is undefined on this input (empty reference, empty corpus).
pub const LMX_ERR_UNDEFINED: c_int = 4;
/// A string argument was not valid UTF-8.
pub const LMX_ERR_UTF8: c_int = 5;
/// A required pointer was NULL.
pub const LMX_ERR_NULL: c_int = 6;

fn status_of(e: &Error) -> c_int {
    match e {
        Error::Domain(_) => LMX_ERR_DOMAIN,
        Error::Config(_) => LMX_ERR_CONFIG,
        Error::UndefinedMetric(_) => LMX_ERR_UNDEFINED,
        _ => LMX_ERR_DATA,
    }
}

/// # Safety
/// `s` must be NULL or point to a NUL-terminated string.
unsafe fn utf8_arg<'a>(s: *const c_char) -> Result<&'a str, c_int> {
    if s.is_null() {
        return Err(LMX_ERR_NULL);
    }
    unsafe { CStr::from_ptr(s) }.to_str().map_err(|_| LMX_ERR_UTF8)
}

/// Version of the underlying crate as a static string.
#[no_mangle]
pub extern "C" fn lmx_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Audio tokens produced from `frames` mel frames by the 8x subsampler.
#[no_mangle]
pub extern "C" fn lmx_subsampled_token_count(frames: usize) -> usize {
    subsampled_len(frames)
}

/// Tokens consumed by `duration_s` seconds of audio, and whether they fit
/// `context_tokens` alongside `reserved_text`.
///
/// # Safety
/// `out_tokens` and `out_fits` must be valid for writes or NULL (a NULL
/// out-pointer skips that result).
#[no_mangle]
pub unsafe extern "C" fn lmx_audio_token_budget(
    duration_s: f64,
    context_tokens: usize,
    reserved_text: usize,
    out_tokens: *mut usize,
    out_fits: *mut c_int,
) -> c_int {
    match audio_token_budget(duration_s, context_tokens, reserved_text) {
        Ok(b) => {
            if !out_tokens.is_null() {
                unsafe { *out_tokens = b.tokens };
            }
            if !out_fits.is_null() {
                unsafe { *out_fits = c_int::from(b.fits) };
            }
            LMX_OK
        }
        Err(e) => status_of(&e),
    }
}

/// Longest audio duration (seconds) whose tokens fit the context.
#[no_mangle]
pub extern "C" fn lmx_max_audio_duration_s(context_tokens: usize, reserved_text: usize) -> f64 {
    max_duration_s(context_tokens, reserved_text)
}

/// Peak learning rate B * D^-0.32 for data size D.
///
/// # Safety
/// `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn lmx_peak_lr(b: f64, d: f64, out: *mut f64) -> c_int {
    if out.is_null() {
        return LMX_ERR_NULL;
    }
    match peak_lr(b, d) {
        Ok(lr) => {
            unsafe { *out = lr };
            LMX_OK
        }
        Err(e) => status_of(&e),
    }
}

/// Crop plan for an image, mirroring the planner's tie-breaking exactly.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LmxCropPlan {
    pub rows: usize,
    pub cols: usize,
    pub resize_h: usize,
    pub resize_w: usize,
    /// 1 when the aspect-preserving fallback grid was used.
    pub fallback_used: c_int,
}

/// Plan the crop grid for an `h` x `w` image with square crops of
/// `crop_size` and at most `max_crops` tiles.
///
/// # Safety
/// `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn lmx_plan_crops(
    h: usize,
    w: usize,
    crop_size: usize,
    max_crops: usize,
    out: *mut LmxCropPlan,
) -> c_int {
    if out.is_null() {
        return LMX_ERR_NULL;
    }
    match plan_crops(h, w, crop_size, max_crops) {
        Ok(p) => {
            unsafe {
                *out = LmxCropPlan {
                    rows: p.rows,
                    cols: p.cols,
                    resize_h: p.resize_h,
                    resize_w: p.resize_w,
                    fallback_used: c_int::from(p.fallback_used),
                };
            }
            LMX_OK
        }
        Err(e) => status_of(&e),
    }
}

/// Word error rate of `hypothesis` against `reference`.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be valid for a
/// write.
#[no_mangle]
pub unsafe extern "C" fn lmx_wer(
    hypothesis: *const c_char,
    reference: *const c_char,
    out: *mut f64,
) -> c_int {
    if out.is_null() {
        return LMX_ERR_NULL;
    }
    let (hyp, refr) = match (unsafe { utf8_arg(hypothesis) }, unsafe { utf8_arg(reference) }) {
        (Ok(h), Ok(r)) => (h, r),
        (Err(c), _) | (_, Err(c)) => return c,
    };
    match wer(hyp, refr) {
        Ok(v) => {
            unsafe { *out = v };
            LMX_OK
        }
        Err(e) => status_of(&e),
    }
}

/// Character error rate of `hypothesis` against `reference`.
///
/// # Safety
/// As [`lmx_wer`].
#[no_mangle]
pub unsafe extern "C" fn lmx_cer(
    hypothesis: *const c_char,
    reference: *const c_char,
    out: *mut f64,
) -> c_int {
    if out.is_null() {
        return LMX_ERR_NULL;
    }
    let (hyp, refr) = match (unsafe { utf8_arg(hypothesis) }, unsafe { utf8_arg(reference) }) {
        (Ok(h), Ok(r)) => (h, r),
        (Err(c), _) | (_, Err(c)) => return c,
    };
    match cer(hyp, refr) {
        Ok(v) => {
            unsafe { *out = v };
            LMX_OK
        }
        Err(e) => status_of(&e),
    }
}

/// WER or CER according to the language's convention (CER for ja/zh).
///
/// # Safety
/// As [`lmx_wer`]; `lang` must also be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lmx_error_rate(
    hypothesis: *const c_char,
    reference: *const c_char,
    lang: *const c_char,
    out: *mut f64,
) -> c_int {
    if out.is_null() {
        return LMX_ERR_NULL;
    }
    let args = (
        unsafe { utf8_arg(hypothesis) },
        unsafe { utf8_arg(reference) },
        unsafe { utf8_arg(lang) },
    );
    let (hyp, refr, lang) = match args {
        (Ok(h), Ok(r), Ok(l)) => (h, r, l),
        (Err(c), _, _) | (_, Err(c), _) | (_, _, Err(c)) => return c,
    };
    match error_rate(hyp, refr, lang) {
        Ok(v) => {
            unsafe { *out = v };
            LMX_OK
        }
        Err(e) => status_of(&e),
    }
}

/// Corpus-BLEU accumulator: push aligned hypothesis/reference pairs, then
/// score the whole corpus at once.
pub struct LmxBleu {
    tokenizer: BleuTokenizer,
    hyps: Vec<String>,
    refs: Vec<String>,
}

/// New accumulator using the tokenizer convention for `lang` (character
/// tokens for ja/zh, mteval-13a otherwise). Returns NULL on invalid input.
///
/// # Safety
/// `lang` must be NULL (treated as "en") or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lmx_bleu_new(lang: *const c_char) -> *mut LmxBleu {
    let lang = if lang.is_null() {
        "en"
    } else {
        match unsafe { utf8_arg(lang) } {
            Ok(l) => l,
            Err(_) => return std::ptr::null_mut(),
        }
    };
    Box::into_raw(Box::new(LmxBleu {
        tokenizer: BleuTokenizer::for_lang(lang),
        hyps: Vec::new(),
        refs: Vec::new(),
    }))
}

/// Add one hypothesis/reference pair to the corpus.
///
/// # Safety
/// `acc` must come from [`lmx_bleu_new`] and not have been freed; strings
/// must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lmx_bleu_push(
    acc: *mut LmxBleu,
    hypothesis: *const c_char,
    reference: *const c_char,
) -> c_int {
    if acc.is_null() {
        return LMX_ERR_NULL;
    }
    let (hyp, refr) = match (unsafe { utf8_arg(hypothesis) }, unsafe { utf8_arg(reference) }) {
        (Ok(h), Ok(r)) => (h, r),
        (Err(c), _) | (_, Err(c)) => return c,
    };
    let acc = unsafe { &mut *acc };
    acc.hyps.push(hyp.to_string());
    acc.refs.push(refr.to_string());
    LMX_OK
}

/// Corpus BLEU (0..100) over everything pushed so far.
///
/// # Safety
/// `acc` must come from [`lmx_bleu_new`] and not have been freed; `out`
/// must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn lmx_bleu_score(acc: *const LmxBleu, out: *mut f64) -> c_int {
    if acc.is_null() || out.is_null() {
        return LMX_ERR_NULL;
    }
    let acc = unsafe { &*acc };
    match bleu(&acc.hyps, &acc.refs, acc.tokenizer) {
        Ok(v) => {
            unsafe { *out = v };
            LMX_OK
        }
        Err(e) => status_of(&e),
    }
}

/// Release an accumulator. NULL is a no-op.
///
/// # Safety
/// `acc` must come from [`lmx_bleu_new`] and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn lmx_bleu_free(acc: *mut LmxBleu) {
    if !acc.is_null() {
        drop(unsafe { Box::from_raw(acc) });
    }
}

/// Translation side of a chain-of-thought transcription+translation
/// output: the text after the `<sep>` marker, or the whole output when
/// the marker is absent. Returns a new string released with
/// [`lmx_string_free`], or NULL on invalid input.
///
/// # Safety
/// `output` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lmx_cot_translation(output: *const c_char) -> *mut c_char {
    let Ok(text) = (unsafe { utf8_arg(output) }) else {
        return std::ptr::null_mut();
    };
    let split = cot_split(text);
    match CString::new(split.translation) {
        Ok(s) => s.into_raw(),
        Err(_) => std::ptr::null_mut(),
    }
}

/// Release a string returned by this library. NULL is a no-op.
///
/// # Safety
/// `s` must have been returned by this library and not freed already.
#[no_mangle]
pub unsafe extern "C" fn lmx_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}
