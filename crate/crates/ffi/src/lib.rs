//! C interface to the dlam digests and classifiers.
//!
//! Objects cross the boundary as opaque handles that the caller releases
//! with the matching `*_free` function. Every fallible call returns a
//! [`DlamStatus`]; on failure the message is kept per thread and can be
//! read back with [`dlam_last_error`]. Output pointers are written only on
//! success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dlam::digest::{self, Algo, Digest};
use dlam::featurize::tokenize;
use dlam::nn::{self, Checkpoint};
use dlam::Error;

/// Result of every fallible call. Values are stable.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DlamStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    BufferTooSmall = 3,
    InvalidAlgorithm = 4,
    Panic = 5,
    EmptyInput = 10,
    MalformedDigest = 11,
    InputTooShort = 12,
    InputTooLong = 13,
    InsufficientVariation = 14,
    MixedAlgorithms = 15,
    IoFailure = 16,
    SchemaMismatch = 17,
    VersionMismatch = 18,
    ShapeMismatch = 19,
    InvalidConfig = 20,
    /// Any other toolkit error; see the message.
    Other = 99,
}

/// `DLAM_ALGO_SSDEEP` or `DLAM_ALGO_TLSH`.
pub type DlamAlgo = u32;
pub const DLAM_ALGO_SSDEEP: DlamAlgo = 0;
pub const DLAM_ALGO_TLSH: DlamAlgo = 1;

/// A parsed or computed fuzzy digest.
pub struct DlamDigest(Digest);

/// A trained classifier loaded from a checkpoint file.
pub struct DlamModel(Checkpoint);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DlamStatus {
    match e {
        Error::EmptyInput => DlamStatus::EmptyInput,
        Error::MalformedDigest(_) => DlamStatus::MalformedDigest,
        Error::InputTooShort { .. } => DlamStatus::InputTooShort,
        Error::InputTooLong(_) => DlamStatus::InputTooLong,
        Error::InsufficientVariation => DlamStatus::InsufficientVariation,
        Error::MixedAlgorithms => DlamStatus::MixedAlgorithms,
        Error::IoFailure { .. } => DlamStatus::IoFailure,
        Error::SchemaMismatch(_) => DlamStatus::SchemaMismatch,
        Error::VersionMismatch { .. } => DlamStatus::VersionMismatch,
        Error::ShapeMismatch(_) => DlamStatus::ShapeMismatch,
        Error::InvalidConfig(_) => DlamStatus::InvalidConfig,
        _ => DlamStatus::Other,
    }
}

struct Fail(DlamStatus);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        set_error(format!("{}: {e}", e.name()));
        Fail(status_of(&e))
    }
}

fn fail(status: DlamStatus, msg: &str) -> Fail {
    set_error(msg.to_string());
    Fail(status)
}

/// Runs `f`, turning errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DlamStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DlamStatus::Ok
        }
        Ok(Err(Fail(s))) => s,
        Err(_) => {
            set_error("panic inside dlam".into());
            DlamStatus::Panic
        }
    }
}

fn algo(a: DlamAlgo) -> Result<Algo, Fail> {
    match a {
        DLAM_ALGO_SSDEEP => Ok(Algo::Ssdeep),
        DLAM_ALGO_TLSH => Ok(Algo::Tlsh),
        _ => Err(fail(DlamStatus::InvalidAlgorithm, "unknown algorithm code")),
    }
}

unsafe fn text<'a>(s: *const c_char) -> Result<&'a str, Fail> {
    if s.is_null() {
        return Err(fail(DlamStatus::NullPointer, "null string"));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| fail(DlamStatus::InvalidUtf8, "string is not UTF-8"))
}

unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, Fail> {
    p.as_ref()
        .ok_or_else(|| fail(DlamStatus::NullPointer, "null handle"))
}

fn out<T>(p: *mut T) -> Result<(), Fail> {
    if p.is_null() {
        Err(fail(DlamStatus::NullPointer, "null output pointer"))
    } else {
        Ok(())
    }
}

/// Copies `s` plus a NUL into `buf`. `needed` (if not null) always receives
/// the required size including the NUL.
unsafe fn copy_out(s: &str, buf: *mut c_char, cap: usize, needed: *mut usize) -> Result<(), Fail> {
    let n = s.len() + 1;
    if !needed.is_null() {
        *needed = n;
    }
    if buf.is_null() || cap < n {
        return Err(fail(DlamStatus::BufferTooSmall, "buffer too small"));
    }
    ptr::copy_nonoverlapping(s.as_ptr(), buf.cast::<u8>(), s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dlam_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Static name of a status code, e.g. "MalformedDigest".
#[no_mangle]
pub extern "C" fn dlam_status_name(status: DlamStatus) -> *const c_char {
    let s: &'static str = match status {
        DlamStatus::Ok => "Ok\0",
        DlamStatus::NullPointer => "NullPointer\0",
        DlamStatus::InvalidUtf8 => "InvalidUtf8\0",
        DlamStatus::BufferTooSmall => "BufferTooSmall\0",
        DlamStatus::InvalidAlgorithm => "InvalidAlgorithm\0",
        DlamStatus::Panic => "Panic\0",
        DlamStatus::EmptyInput => "EmptyInput\0",
        DlamStatus::MalformedDigest => "MalformedDigest\0",
        DlamStatus::InputTooShort => "InputTooShort\0",
        DlamStatus::InputTooLong => "InputTooLong\0",
        DlamStatus::InsufficientVariation => "InsufficientVariation\0",
        DlamStatus::MixedAlgorithms => "MixedAlgorithms\0",
        DlamStatus::IoFailure => "IoFailure\0",
        DlamStatus::SchemaMismatch => "SchemaMismatch\0",
        DlamStatus::VersionMismatch => "VersionMismatch\0",
        DlamStatus::ShapeMismatch => "ShapeMismatch\0",
        DlamStatus::InvalidConfig => "InvalidConfig\0",
        DlamStatus::Other => "Other\0",
    };
    s.as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until
/// the next dlam call on the same thread.
#[no_mangle]
pub extern "C" fn dlam_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Hashes `len` bytes at `data`.
///
/// # Safety
/// `data` must point to `len` readable bytes (it may be NULL when `len` is
/// 0) and `out_digest` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dlam_digest_hash(
    algorithm: DlamAlgo,
    data: *const u8,
    len: usize,
    out_digest: *mut *mut DlamDigest,
) -> DlamStatus {
    guard(|| {
        out(out_digest)?;
        let a = algo(algorithm)?;
        let bytes: &[u8] = if len == 0 {
            &[]
        } else if data.is_null() {
            return Err(fail(DlamStatus::NullPointer, "null data"));
        } else {
            std::slice::from_raw_parts(data, len)
        };
        let d = digest::hash(a, bytes)?;
        *out_digest = Box::into_raw(Box::new(DlamDigest(d)));
        Ok(())
    })
}

/// Parses a digest in its canonical text form.
///
/// # Safety
/// `digest_text` must be NUL-terminated and `out_digest` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dlam_digest_parse(
    algorithm: DlamAlgo,
    digest_text: *const c_char,
    out_digest: *mut *mut DlamDigest,
) -> DlamStatus {
    guard(|| {
        out(out_digest)?;
        let a = algo(algorithm)?;
        let d = digest::parse(a, text(digest_text)?)?;
        *out_digest = Box::into_raw(Box::new(DlamDigest(d)));
        Ok(())
    })
}

/// Algorithm code of a digest.
///
/// # Safety
/// `d` must be a live handle and `out_algo` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dlam_digest_algorithm(
    d: *const DlamDigest,
    out_algo: *mut DlamAlgo,
) -> DlamStatus {
    guard(|| {
        out(out_algo)?;
        *out_algo = match handle(d)?.0.algo() {
            Algo::Ssdeep => DLAM_ALGO_SSDEEP,
            Algo::Tlsh => DLAM_ALGO_TLSH,
        };
        Ok(())
    })
}

/// Writes the canonical text into `buf`. With a NULL or short buffer the
/// call fails with `BufferTooSmall` and `needed` tells the size to use.
///
/// # Safety
/// `d` must be a live handle, `buf` must have `cap` writable bytes and
/// `needed` must be NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn dlam_digest_to_string(
    d: *const DlamDigest,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> DlamStatus {
    guard(|| copy_out(&handle(d)?.0.to_string(), buf, cap, needed))
}

/// ssdeep score (0..=100) or TLSH distance of two digests of the same
/// algorithm.
///
/// # Safety
/// Both handles must be live and `out_score` valid.
#[no_mangle]
pub unsafe extern "C" fn dlam_digest_compare(
    a: *const DlamDigest,
    b: *const DlamDigest,
    out_score: *mut u32,
) -> DlamStatus {
    guard(|| {
        out(out_score)?;
        *out_score = digest::compare(&handle(a)?.0, &handle(b)?.0)?;
        Ok(())
    })
}

/// # Safety
/// `d` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dlam_digest_free(d: *mut DlamDigest) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Loads a checkpoint written by `dlam train`.
///
/// # Safety
/// `path` must be NUL-terminated and `out_model` valid.
#[no_mangle]
pub unsafe extern "C" fn dlam_model_load(
    path: *const c_char,
    out_model: *mut *mut DlamModel,
) -> DlamStatus {
    guard(|| {
        out(out_model)?;
        let c = nn::load_checkpoint(Path::new(text(path)?))?;
        if c.config.algo.is_none() {
            return Err(fail(
                DlamStatus::InvalidConfig,
                "checkpoint has no digest algorithm",
            ));
        }
        *out_model = Box::into_raw(Box::new(DlamModel(c)));
        Ok(())
    })
}

/// Algorithm of the digests the model reads.
///
/// # Safety
/// `m` must be a live handle and `out_algo` valid.
#[no_mangle]
pub unsafe extern "C" fn dlam_model_algorithm(
    m: *const DlamModel,
    out_algo: *mut DlamAlgo,
) -> DlamStatus {
    guard(|| {
        out(out_algo)?;
        *out_algo = match handle(m)?.0.config.algo {
            Some(Algo::Tlsh) => DLAM_ALGO_TLSH,
            _ => DLAM_ALGO_SSDEEP,
        };
        Ok(())
    })
}

/// Anomaly probability of one digest; `label` is 1 iff it exceeds 0.5.
/// Either output may be NULL.
///
/// # Safety
/// Handles must be live; outputs NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn dlam_model_predict(
    m: *const DlamModel,
    d: *const DlamDigest,
    probability: *mut f32,
    label: *mut u8,
) -> DlamStatus {
    guard(|| {
        let model = handle(m)?;
        let dg = handle(d)?;
        if model.0.config.algo != Some(dg.0.algo()) {
            return Err(fail(
                DlamStatus::MixedAlgorithms,
                "digest algorithm does not match the model",
            ));
        }
        let p = nn::predict(&model.0, &[tokenize(&dg.0)])?[0];
        if !probability.is_null() {
            *probability = p.probability;
        }
        if !label.is_null() {
            *label = p.label;
        }
        Ok(())
    })
}

/// # Safety
/// `m` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dlam_model_free(m: *mut DlamModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}
