//! C ABI over the recursor engine. Every fallible call returns a
//! [`RecursorStatus`]; the message of the last failure on the calling thread
//! is available from [`recursor_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use recursor::config::RunConfig;
use recursor::cost::{cost_breakdown, FlopsOptions};
use recursor::decode::{DecodeSession, ExitPolicy, Sampler};
use recursor::model::{checkpoint, Model};
use recursor::scheduler::{schedule, Scenario, Strategy};
use recursor::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecursorStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    NonFinite = 5,
    BufferTooSmall = 6,
    Failed = 7,
    Panic = 8,
}

/// A loaded checkpoint. Create with [`recursor_model_load`], release with
/// [`recursor_model_free`].
pub struct RecursorModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> RecursorStatus {
    match e {
        Error::Io(_) => RecursorStatus::Io,
        Error::NonFinite(_) => RecursorStatus::NonFinite,
        Error::Config(_)
        | Error::Parse(_)
        | Error::Capacity { .. }
        | Error::Length(_)
        | Error::Index(_)
        | Error::Domain(_)
        | Error::Mapping(_) => RecursorStatus::InvalidArgument,
        _ => RecursorStatus::Failed,
    }
}

struct Fail(RecursorStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RecursorStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RecursorStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            RecursorStatus::Panic
        }
    }
}

fn null(name: &str) -> Fail {
    Fail(RecursorStatus::NullArgument, format!("{name} is null"))
}

unsafe fn text<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(RecursorStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(name))
}

/// Message of the last failure on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn recursor_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn recursor_status_name(status: RecursorStatus) -> *const c_char {
    let s: &'static CStr = match status {
        RecursorStatus::Ok => c"ok",
        RecursorStatus::NullArgument => c"null argument",
        RecursorStatus::InvalidUtf8 => c"invalid utf-8",
        RecursorStatus::InvalidArgument => c"invalid argument",
        RecursorStatus::Io => c"i/o error",
        RecursorStatus::NonFinite => c"non-finite value",
        RecursorStatus::BufferTooSmall => c"buffer too small",
        RecursorStatus::Failed => c"failed",
        RecursorStatus::Panic => c"panic",
    };
    s.as_ptr()
}

/// Loads a checkpoint directory into `*out_model`.
///
/// # Safety
/// `dir` must be a nul-terminated string and `out_model` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn recursor_model_load(dir: *const c_char, out_model: *mut *mut RecursorModel) -> RecursorStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        *slot = std::ptr::null_mut();
        let dir = text(dir, "dir")?;
        let model = checkpoint::load(Path::new(dir))?;
        *slot = Box::into_raw(Box::new(RecursorModel { model }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`recursor_model_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn recursor_model_free(model: *mut RecursorModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Layer count, recursion count and vocabulary size.
///
/// # Safety
/// `model` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn recursor_model_info(
    model: *const RecursorModel,
    out_n_layers: *mut usize,
    out_n_recursions: *mut usize,
    out_vocab: *mut usize,
) -> RecursorStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let spec = m.model.spec();
        *out(out_n_layers, "out_n_layers")? = spec.n_layers;
        *out(out_n_recursions, "out_n_recursions")? = spec.n_recursions;
        *out(out_vocab, "out_vocab")? = spec.vocab;
        Ok(())
    })
}

/// Generates up to `max_tokens` tokens after `prompt`. `policy` uses the
/// command-line syntax (`none`, `oracle`, `confidence:0.9`, `static:1`),
/// `sampler` likewise (`greedy`, `topk:k`, `nucleus:p`). Token ids and exit
/// depths go to `out_tokens` / `out_depths` (either may be null), each of
/// room `capacity`; `*out_len` receives the count. `out_depths[i]` is the
/// depth of the step that produced `out_tokens[i]`, the prompt pass being
/// full depth.
///
/// # Safety
/// Pointers must be valid for the stated lengths; strings nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn recursor_decode(
    model: *const RecursorModel,
    policy: *const c_char,
    sampler: *const c_char,
    seed: u64,
    prompt: *const u32,
    prompt_len: usize,
    max_tokens: usize,
    out_tokens: *mut u32,
    out_depths: *mut u32,
    capacity: usize,
    out_len: *mut usize,
) -> RecursorStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let len = out(out_len, "out_len")?;
        *len = 0;
        let policy: ExitPolicy = text(policy, "policy")?.parse()?;
        let sampler: Sampler = text(sampler, "sampler")?.parse()?;
        if prompt.is_null() {
            return Err(null("prompt"));
        }
        if capacity < max_tokens {
            return Err(Fail(RecursorStatus::BufferTooSmall, format!("capacity {capacity} below max_tokens {max_tokens}")));
        }
        let ids: Vec<usize> = std::slice::from_raw_parts(prompt, prompt_len).iter().map(|&t| t as usize).collect();
        let mut session = DecodeSession::new(&m.model, policy)?;
        let res = session.decode(0, &ids, max_tokens, sampler, &mut ChaCha8Rng::seed_from_u64(seed))?;
        if !out_tokens.is_null() {
            let dst = std::slice::from_raw_parts_mut(out_tokens, capacity);
            res.ids.iter().zip(dst).for_each(|(s, d)| *d = *s as u32);
        }
        if !out_depths.is_null() {
            let dst = std::slice::from_raw_parts_mut(out_depths, capacity);
            let full = m.model.spec().n_recursions;
            let depths = std::iter::once(full).chain(res.trace.iter().map(|r| r.exit_depth));
            depths.zip(dst).take(res.ids.len()).for_each(|(x, d)| *d = x as u32);
        }
        *len = res.ids.len();
        Ok(())
    })
}

/// Runs one batching strategy (`vanilla`, `csb`, `cdb`) over a scenario
/// given as TOML text.
///
/// # Safety
/// Strings must be nul-terminated; out pointers valid.
#[no_mangle]
pub unsafe extern "C" fn recursor_simulate(
    scenario_toml: *const c_char,
    strategy: *const c_char,
    out_finish: *mut f64,
    out_tokens: *mut usize,
) -> RecursorStatus {
    guard(|| {
        let sc = Scenario::parse(text(scenario_toml, "scenario_toml")?)?;
        let strategy: Strategy = text(strategy, "strategy")?.parse()?;
        let reqs = sc.build_requests()?;
        let tl = schedule(strategy, &reqs, sc.max_batch, sc.n_stages, &sc.cost)?;
        *out(out_finish, "out_finish")? = tl.finish();
        *out(out_tokens, "out_tokens")? = tl.tokens();
        Ok(())
    })
}

/// Forward FLOPs per token and non-embedding parameters for a run config
/// given as TOML text, at sequence length `seq_len`.
///
/// # Safety
/// `config_toml` must be nul-terminated; out pointers valid.
#[no_mangle]
pub unsafe extern "C" fn recursor_flops(
    config_toml: *const c_char,
    seq_len: usize,
    out_flops_per_token: *mut f64,
    out_non_embedding_params: *mut u64,
) -> RecursorStatus {
    guard(|| {
        let cfg = RunConfig::parse(text(config_toml, "config_toml")?)?;
        cfg.validate()?;
        let opts = FlopsOptions { router: cfg.router.as_ref().map(|r| r.kind), kv_mode: cfg.kv_mode, ..Default::default() };
        let c = cost_breakdown(&cfg.model, seq_len, &opts, 2)?;
        *out(out_flops_per_token, "out_flops_per_token")? = c.flops_per_token;
        *out(out_non_embedding_params, "out_non_embedding_params")? = c.params.non_embedding as u64;
        Ok(())
    })
}
