//! C ABI over the model, chat sessions, and the BLEU metric.
//!
//! Handles are opaque pointers owned by the caller and released with the
//! matching `*_free` function. Every fallible call returns an [`NaStatus`];
//! on failure [`na_last_error_message`] describes the most recent error on
//! the calling thread. Strings returned through out-parameters are
//! allocated here and must be released with [`na_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use neural_assistant::checkpoint::Checkpoint;
use neural_assistant::decode::{Assistant, DecodeSettings, Session};
use neural_assistant::kb::{KbMode, KnowledgeBase};
use neural_assistant::text::DEFAULT_MAX_HISTORY;
use neural_assistant::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NaStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Checkpoint = 4,
    InvalidArgument = 5,
    Decode = 6,
    Panic = 7,
}

/// Loaded checkpoint, vocabulary, and KB.
pub struct NaModel {
    assistant: Arc<Assistant<f32>>,
    kb_mode: KbMode,
}

/// One conversation bound to a model.
pub struct NaSession {
    assistant: Arc<Assistant<f32>>,
    session: Session,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: NaStatus, msg: impl Into<String>) -> NaStatus {
    set_error(msg);
    status
}

fn status_of(e: &Error) -> NaStatus {
    match e {
        Error::Io { .. } => NaStatus::Io,
        Error::Checkpoint(_) | Error::VocabMismatch { .. } | Error::Json(_) => NaStatus::Checkpoint,
        Error::InvalidArgument(_) | Error::Schema { .. } => NaStatus::InvalidArgument,
        _ => NaStatus::Decode,
    }
}

fn guard(f: impl FnOnce() -> NaStatus) -> NaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(NaStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, NaStatus> {
    if p.is_null() {
        return Err(fail(NaStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(NaStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

fn into_c(s: &str) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul bytes removed").into_raw()
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn na_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint and an optional KB file (`kb` may be null).
///
/// # Safety
/// `checkpoint` and a non-null `kb` must be NUL-terminated strings;
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn na_model_load(checkpoint: *const c_char, kb: *const c_char, out: *mut *mut NaModel) -> NaStatus {
    guard(|| {
        if out.is_null() {
            return fail(NaStatus::NullArgument, "out is null");
        }
        *out = ptr::null_mut();
        let ck_path = match str_arg(checkpoint, "checkpoint") {
            Ok(s) => s,
            Err(s) => return s,
        };
        let kb = if kb.is_null() {
            KnowledgeBase::default()
        } else {
            let p = match str_arg(kb, "kb") {
                Ok(s) => s,
                Err(s) => return s,
            };
            match KnowledgeBase::load(Path::new(p)) {
                Ok(k) => k,
                Err(e) => return fail(status_of(&e), e.to_string()),
            }
        };
        let ck = match Checkpoint::<f32>::load(Path::new(ck_path)) {
            Ok(c) => c,
            Err(e) => return fail(status_of(&e), e.to_string()),
        };
        let max_history = ck.train_state.as_ref().map_or(DEFAULT_MAX_HISTORY, |s| s.config.max_history);
        let model = NaModel {
            assistant: Arc::new(Assistant {
                model: ck.model,
                vocab: ck.vocab,
                kb,
                max_history,
            }),
            kb_mode: ck.kb_mode,
        };
        *out = Box::into_raw(Box::new(model));
        NaStatus::Ok
    })
}

/// # Safety
/// `model` must come from [`na_model_load`] and not be freed twice.
/// Sessions created from it remain usable.
#[no_mangle]
pub unsafe extern "C" fn na_model_free(model: *mut NaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Starts a session with greedy decoding and the model's training KB mode.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn na_session_new(model: *const NaModel, kb_seed: u64, out: *mut *mut NaSession) -> NaStatus {
    guard(|| {
        if model.is_null() || out.is_null() {
            return fail(NaStatus::NullArgument, "model or out is null");
        }
        let m = &*model;
        let session = Session::new("ffi", m.kb_mode, kb_seed, DecodeSettings::default());
        *out = Box::into_raw(Box::new(NaSession {
            assistant: m.assistant.clone(),
            session,
        }));
        NaStatus::Ok
    })
}

/// # Safety
/// `session` must come from [`na_session_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn na_session_free(session: *mut NaSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Sends one user message. On success `*response` holds the reply text and
/// `*action` the generated action string, or null when there is none.
///
/// # Safety
/// `session` must be a live handle used by one thread at a time; `text`
/// a NUL-terminated string; `response` and `action` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn na_session_respond(
    session: *mut NaSession,
    text: *const c_char,
    response: *mut *mut c_char,
    action: *mut *mut c_char,
) -> NaStatus {
    guard(|| {
        if session.is_null() || response.is_null() || action.is_null() {
            return fail(NaStatus::NullArgument, "session, response, or action is null");
        }
        *response = ptr::null_mut();
        *action = ptr::null_mut();
        let text = match str_arg(text, "text") {
            Ok(s) => s,
            Err(s) => return s,
        };
        let s = &mut *session;
        match s.assistant.respond(&mut s.session, text) {
            Ok(r) => {
                *response = into_c(&r.response);
                if let Some(a) = r.raw_action {
                    *action = into_c(&a);
                }
                NaStatus::Ok
            }
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}

/// Number of turns in the session transcript.
///
/// # Safety
/// `session` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn na_session_turn_count(session: *const NaSession, out: *mut usize) -> NaStatus {
    if session.is_null() || out.is_null() {
        return fail(NaStatus::NullArgument, "session or out is null");
    }
    *out = (*session).session.turns.len();
    NaStatus::Ok
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn na_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Corpus BLEU-4 (0 to 100) of `n` aligned reference/hypothesis strings.
///
/// # Safety
/// `references` and `hypotheses` must each point to `n` NUL-terminated
/// strings; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn na_bleu(
    references: *const *const c_char,
    hypotheses: *const *const c_char,
    n: usize,
    out: *mut f64,
) -> NaStatus {
    guard(|| {
        if references.is_null() || hypotheses.is_null() || out.is_null() {
            return fail(NaStatus::NullArgument, "references, hypotheses, or out is null");
        }
        let mut refs = Vec::with_capacity(n);
        let mut hyps = Vec::with_capacity(n);
        for i in 0..n {
            match (str_arg(*references.add(i), "reference"), str_arg(*hypotheses.add(i), "hypothesis")) {
                (Ok(r), Ok(h)) => {
                    refs.push(r);
                    hyps.push(h);
                }
                (Err(s), _) | (_, Err(s)) => return s,
            }
        }
        match neural_assistant::eval::bleu(&refs, &hyps) {
            Ok(b) => {
                *out = b;
                NaStatus::Ok
            }
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}
