//! C ABI over a trained run: open a session from a run config, predict on
//! PNG patches or bag directories, and inspect the result.
//!
//! Every fallible call returns a [`KvaStatus`]; on failure the message is
//! available from [`kva_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use kvadapt::backbone::BackboneBundle;
use kvadapt::cli::{load_backbone, load_store, read_input};
use kvadapt::config::RunConfig;
use kvadapt::engine::{Engine, GenerationResult};
use kvadapt::storage::{key_loss, AdaptorStore};
use kvadapt::vocab::Vocabulary;
use kvadapt::Error;

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KvaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    MissingArtifact = 4,
    Io = 5,
    InvalidInput = 6,
    OutOfVocabulary = 7,
    UnknownTask = 8,
    NoTasks = 9,
    Compatibility = 10,
    Dimension = 11,
    InvalidData = 12,
    /// A Rust panic was caught at the boundary.
    Internal = 13,
}

impl KvaStatus {
    fn of(err: &Error) -> Self {
        match err {
            Error::Config(_) => KvaStatus::Config,
            Error::MissingArtifact { .. } | Error::MissingFile(_) => KvaStatus::MissingArtifact,
            Error::Io { .. } => KvaStatus::Io,
            Error::OutOfVocabulary(_) => KvaStatus::OutOfVocabulary,
            Error::UnknownTask(_) => KvaStatus::UnknownTask,
            Error::NoTasks => KvaStatus::NoTasks,
            Error::Compatibility { .. } => KvaStatus::Compatibility,
            Error::Dimension(_) | Error::DegenerateVector(_) | Error::InvalidRank { .. } => KvaStatus::Dimension,
            Error::InvalidData(_)
            | Error::Schema { .. }
            | Error::Json(_)
            | Error::Csv(_)
            | Error::Png(_)
            | Error::TooSmall(_) => KvaStatus::InvalidData,
            _ => KvaStatus::InvalidInput,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: KvaStatus, msg: impl Into<String>) -> KvaStatus {
    set_error(msg.into());
    status
}

/// Runs `f` with panics converted to [`KvaStatus::Internal`].
fn guard(f: impl FnOnce() -> Result<(), KvaStatus>) -> KvaStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KvaStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(KvaStatus::Internal, "internal panic"),
    }
}

fn check<T>(r: kvadapt::Result<T>) -> Result<T, KvaStatus> {
    r.map_err(|e| fail(KvaStatus::of(&e), e.to_string()))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, KvaStatus> {
    if p.is_null() {
        return Err(fail(KvaStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(KvaStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), KvaStatus> {
    if p.is_null() {
        Err(fail(KvaStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// A loaded backbone, vocabulary and adaptor store.
pub struct KvaSession {
    config: RunConfig,
    bundle: BackboneBundle,
    vocab: Vocabulary,
    store: AdaptorStore,
}

/// One generated label.
pub struct KvaPrediction {
    label: CString,
    task_id: CString,
    result: GenerationResult,
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on this thread.
#[no_mangle]
pub extern "C" fn kva_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static, NUL-terminated crate version.
#[no_mangle]
pub extern "C" fn kva_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Opens the run described by the TOML file at `config_path`.
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kva_session_open(config_path: *const c_char, out: *mut *mut KvaSession) -> KvaStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = str_arg(config_path, "config_path")?;
        let config = check(RunConfig::load(Path::new(path)))?;
        let (bundle, vocab) = check(load_backbone(&config))?;
        let store = check(load_store(&config, &bundle, false))?;
        *out = Box::into_raw(Box::new(KvaSession {
            config,
            bundle,
            vocab,
            store,
        }));
        Ok(())
    })
}

/// # Safety
/// `session` must come from [`kva_session_open`] or be null.
#[no_mangle]
pub unsafe extern "C" fn kva_session_free(session: *mut KvaSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Number of stored tasks; 0 for a null session.
///
/// # Safety
/// `session` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn kva_session_task_count(session: *const KvaSession) -> usize {
    session.as_ref().map_or(0, |s| s.store.len())
}

/// Predicts for a PNG patch or a directory of bag PNGs. With a null
/// `task_id` the adaptors are retrieved from `prompt`; otherwise the named
/// task is used and a null `prompt` selects that task's own prompt.
///
/// # Safety
/// Pointers must be valid NUL-terminated strings or null where allowed;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kva_predict(
    session: *const KvaSession,
    input_path: *const c_char,
    prompt: *const c_char,
    task_id: *const c_char,
    out: *mut *mut KvaPrediction,
) -> KvaStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        non_null(session, "session")?;
        let s = &*session;
        let input = check(read_input(Path::new(str_arg(input_path, "input_path")?)))?;
        let engine = check(Engine::new(&s.bundle, &s.vocab))?;
        let result = if task_id.is_null() {
            let text = str_arg(prompt, "prompt")?;
            let prompt = check(s.vocab.encode_prompt(text))?;
            check(engine.infer(&input, &prompt, &s.store, s.config.train.patch.max_generate_len))?
        } else {
            let id = str_arg(task_id, "task_id")?;
            let (_, set) = check(s.store.get(id).ok_or_else(|| Error::UnknownTask(id.to_string())))?;
            let max_len = s.config.train_config(set.level()).max_generate_len;
            let prompt = if prompt.is_null() {
                set.prompt.clone()
            } else {
                check(s.vocab.encode_prompt(str_arg(prompt, "prompt")?))?
            };
            check(engine.generate(&input, &prompt, set, max_len))?
        };
        let c = |t: &str| CString::new(t).map_err(|_| fail(KvaStatus::InvalidData, "label holds a NUL byte"));
        *out = Box::into_raw(Box::new(KvaPrediction {
            label: c(&result.label_text)?,
            task_id: c(&result.retrieved_task_id)?,
            result,
        }));
        Ok(())
    })
}

/// # Safety
/// `p` must come from [`kva_predict`] or be null.
#[no_mangle]
pub unsafe extern "C" fn kva_prediction_free(p: *mut KvaPrediction) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Generated label text; owned by the prediction.
///
/// # Safety
/// `p` must be a live prediction or null.
#[no_mangle]
pub unsafe extern "C" fn kva_prediction_label(p: *const KvaPrediction) -> *const c_char {
    p.as_ref().map_or(ptr::null(), |p| p.label.as_ptr())
}

/// Task whose adaptors produced the label; owned by the prediction.
///
/// # Safety
/// `p` must be a live prediction or null.
#[no_mangle]
pub unsafe extern "C" fn kva_prediction_task_id(p: *const KvaPrediction) -> *const c_char {
    p.as_ref().map_or(ptr::null(), |p| p.task_id.as_ptr())
}

/// 1 if decoding stopped at end-of-sequence, 0 if it hit the length cap or `p` is null.
///
/// # Safety
/// `p` must be a live prediction or null.
#[no_mangle]
pub unsafe extern "C" fn kva_prediction_terminated(p: *const KvaPrediction) -> i32 {
    p.as_ref().map_or(0, |p| i32::from(p.result.terminated_by_eos))
}

/// Number of per-patch attention weights; 0 for patch inputs.
///
/// # Safety
/// `p` must be a live prediction or null.
#[no_mangle]
pub unsafe extern "C" fn kva_prediction_attention_len(p: *const KvaPrediction) -> usize {
    p.as_ref().and_then(|p| p.result.attention.as_ref()).map_or(0, Vec::len)
}

/// Copies up to `cap` attention weights into `buf`; returns how many were written.
///
/// # Safety
/// `buf` must hold `cap` doubles; `p` must be a live prediction or null.
#[no_mangle]
pub unsafe extern "C" fn kva_prediction_attention(p: *const KvaPrediction, buf: *mut f64, cap: usize) -> usize {
    let Some(att) = p.as_ref().and_then(|p| p.result.attention.as_ref()) else {
        return 0;
    };
    if buf.is_null() {
        return 0;
    }
    let n = att.len().min(cap);
    ptr::copy_nonoverlapping(att.as_ptr(), buf, n);
    n
}

/// Key loss of `key` against one `query` and `n_prev` earlier keys stored
/// row-major in `prev_keys`, all of length `len`.
///
/// # Safety
/// `key` and `query` must hold `len` doubles, `prev_keys` `n_prev * len`
/// (null allowed when `n_prev` is 0); `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kva_key_loss(
    key: *const f64,
    query: *const f64,
    len: usize,
    prev_keys: *const f64,
    n_prev: usize,
    out: *mut f64,
) -> KvaStatus {
    guard(|| {
        non_null(key, "key")?;
        non_null(query, "query")?;
        non_null(out, "out")?;
        if n_prev > 0 {
            non_null(prev_keys, "prev_keys")?;
        }
        let key = std::slice::from_raw_parts(key, len);
        let query = std::slice::from_raw_parts(query, len);
        let prev: Vec<&[f64]> = (0..n_prev)
            .map(|i| std::slice::from_raw_parts(prev_keys.add(i * len), len))
            .collect();
        *out = check(key_loss(key, query, &prev))?;
        Ok(())
    })
}
