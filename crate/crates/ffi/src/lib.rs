//! C ABI over the shadowprec runtime.
//!
//! Every entry point returns an [`SpStatus`]. On failure the message is kept
//! per thread and can be copied out with [`sp_last_error_message`]. Objects
//! cross the boundary as opaque handles that the caller frees with the
//! matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use shadowprec::clock::SimClock;
use shadowprec::densela::{inv_root, SymMatrix};
use shadowprec::harness::{run_training, write_outputs, HarnessError, RunConfig, RunResult};
use shadowprec::metrics::{compute_eta, EfficiencyInput};
use shadowprec::tierstore::{TensorKey, TensorRole, TierConfig, TierError, TierStore, TierTag};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ConfigError = 3,
    AuditFailure = 4,
    NotFound = 5,
    CapacityExhausted = 6,
    BufferTooSmall = 7,
    RuntimeError = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpTier {
    Hot = 0,
    Host = 1,
    Cold = 2,
}

impl From<SpTier> for TierTag {
    fn from(t: SpTier) -> Self {
        match t {
            SpTier::Hot => TierTag::Hot,
            SpTier::Host => TierTag::Host,
            SpTier::Cold => TierTag::Cold,
        }
    }
}

impl From<TierTag> for SpTier {
    fn from(t: TierTag) -> Self {
        match t {
            TierTag::Hot => SpTier::Hot,
            TierTag::Host => SpTier::Host,
            TierTag::Cold => SpTier::Cold,
        }
    }
}

/// Opaque run configuration.
pub struct SpConfig {
    inner: RunConfig,
}

/// Opaque result of a finished training run.
pub struct SpRun {
    cfg: RunConfig,
    inner: RunResult,
}

/// Opaque three-tier tensor store.
pub struct SpStore {
    inner: TierStore,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

type Failure = (SpStatus, String);

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            SpStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            SpStatus::Panic
        }
    }
}

fn harness_failure(e: HarnessError) -> Failure {
    let status = if e.is_config_error() {
        SpStatus::ConfigError
    } else if e.is_audit_failure() {
        SpStatus::AuditFailure
    } else {
        SpStatus::RuntimeError
    };
    (status, e.to_string())
}

fn tier_failure(e: TierError) -> Failure {
    let status = match e {
        TierError::MissingKey(_) => SpStatus::NotFound,
        TierError::CapacityExhausted { .. } => SpStatus::CapacityExhausted,
        TierError::ChecksumMismatch { .. } | TierError::AuditMismatch(_) => SpStatus::AuditFailure,
        TierError::EmptyTensor(_) => SpStatus::InvalidArgument,
        _ => SpStatus::RuntimeError,
    };
    (status, e.to_string())
}

fn null(what: &str) -> Failure {
    (SpStatus::NullPointer, format!("{what} is null"))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (SpStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Copies `text` plus a NUL terminator into `buf`. `written` receives the
/// required size including the terminator, also when `buf` is too small.
unsafe fn copy_out(text: &str, buf: *mut c_char, len: usize, written: *mut usize) -> Result<(), Failure> {
    let need = text.len() + 1;
    if !written.is_null() {
        *written = need;
    }
    if buf.is_null() || len < need {
        return Err((SpStatus::BufferTooSmall, format!("need {need} bytes, have {len}")));
    }
    ptr::copy_nonoverlapping(text.as_ptr(), buf as *mut u8, text.len());
    *buf.add(text.len()) = 0;
    Ok(())
}

fn role(index: u8) -> Result<TensorRole, Failure> {
    TensorRole::ALL
        .get(index as usize)
        .copied()
        .ok_or_else(|| (SpStatus::InvalidArgument, format!("tensor role {index} out of range")))
}

/// Copies the calling thread's last error message into `buf`. `written`
/// receives the size needed including the terminator. An empty message
/// means the last call succeeded.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes; `written` must be null or
/// valid for one write.
#[no_mangle]
pub unsafe extern "C" fn sp_last_error_message(buf: *mut c_char, len: usize, written: *mut usize) -> SpStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    match copy_out(&msg, buf, len, written) {
        Ok(()) => SpStatus::Ok,
        Err((s, _)) => s,
    }
}

/// Creates a config with every field at its default.
///
/// # Safety
/// `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn sp_config_default(out: *mut *mut SpConfig) -> SpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(SpConfig { inner: RunConfig::default() }));
        Ok(())
    })
}

/// Parses and validates a JSON run config. Missing fields take defaults.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn sp_config_from_json(json: *const c_char, out: *mut *mut SpConfig) -> SpStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inner: RunConfig =
            serde_json::from_str(text).map_err(|e| (SpStatus::ConfigError, format!("invalid config: {e}")))?;
        inner.validate().map_err(harness_failure)?;
        *out = Box::into_raw(Box::new(SpConfig { inner }));
        Ok(())
    })
}

/// Serializes the config as JSON.
///
/// # Safety
/// `cfg` must be a live config handle; see [`sp_last_error_message`] for the
/// buffer contract.
#[no_mangle]
pub unsafe extern "C" fn sp_config_to_json(
    cfg: *const SpConfig,
    buf: *mut c_char,
    len: usize,
    written: *mut usize,
) -> SpStatus {
    guard(|| copy_out(&borrow(cfg, "cfg")?.inner.to_json(), buf, len, written))
}

/// Sets the number of training steps.
///
/// # Safety
/// `cfg` must be a live config handle.
#[no_mangle]
pub unsafe extern "C" fn sp_config_set_steps(cfg: *mut SpConfig, steps: u64) -> SpStatus {
    guard(|| {
        let c = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        c.inner.steps = steps;
        Ok(())
    })
}

/// Sets the staleness budget S.
///
/// # Safety
/// `cfg` must be a live config handle.
#[no_mangle]
pub unsafe extern "C" fn sp_config_set_staleness(cfg: *mut SpConfig, staleness: u64) -> SpStatus {
    guard(|| {
        let c = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        c.inner.sched.staleness_s = staleness;
        Ok(())
    })
}

/// Sets the seed used for weights and data.
///
/// # Safety
/// `cfg` must be a live config handle.
#[no_mangle]
pub unsafe extern "C" fn sp_config_set_seed(cfg: *mut SpConfig, seed: u64) -> SpStatus {
    guard(|| {
        let c = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        c.inner.seed = seed;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sp_config_free(cfg: *mut SpConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs training to completion.
///
/// # Safety
/// `cfg` must be a live config handle; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn sp_run_training(cfg: *const SpConfig, out: *mut *mut SpRun) -> SpStatus {
    guard(|| {
        let cfg = borrow(cfg, "cfg")?.inner.clone();
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = run_training(&cfg).map_err(harness_failure)?;
        *out = Box::into_raw(Box::new(SpRun { cfg, inner }));
        Ok(())
    })
}

/// Number of logged steps.
///
/// # Safety
/// `run` must be a live run handle; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn sp_run_steps(run: *const SpRun, out: *mut u64) -> SpStatus {
    guard(|| {
        let r = borrow(run, "run")?;
        *out.as_mut().ok_or_else(|| null("out"))? = r.inner.losses.len() as u64;
        Ok(())
    })
}

/// Training loss of step `step`.
///
/// # Safety
/// `run` must be a live run handle; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn sp_run_loss_at(run: *const SpRun, step: u64, out: *mut f64) -> SpStatus {
    guard(|| {
        let r = borrow(run, "run")?;
        let row = r
            .inner
            .losses
            .get(step as usize)
            .ok_or_else(|| (SpStatus::InvalidArgument, format!("step {step} out of range")))?;
        *out.as_mut().ok_or_else(|| null("out"))? = row.loss;
        Ok(())
    })
}

/// Held-out loss after the last step.
///
/// # Safety
/// `run` must be a live run handle; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn sp_run_final_eval_loss(run: *const SpRun, out: *mut f64) -> SpStatus {
    guard(|| {
        let r = borrow(run, "run")?;
        *out.as_mut().ok_or_else(|| null("out"))? = r.inner.summary.final_eval_loss;
        Ok(())
    })
}

/// Run summary as JSON.
///
/// # Safety
/// `run` must be a live run handle; see [`sp_last_error_message`] for the
/// buffer contract.
#[no_mangle]
pub unsafe extern "C" fn sp_run_summary_json(
    run: *const SpRun,
    buf: *mut c_char,
    len: usize,
    written: *mut usize,
) -> SpStatus {
    guard(|| {
        let r = borrow(run, "run")?;
        let json =
            serde_json::to_string(&r.inner.summary).map_err(|e| (SpStatus::RuntimeError, e.to_string()))?;
        copy_out(&json, buf, len, written)
    })
}

/// Writes config, loss, series, trace and summary files into `dir`.
///
/// # Safety
/// `run` must be a live run handle; `dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sp_run_write_outputs(run: *const SpRun, dir: *const c_char) -> SpStatus {
    guard(|| {
        let r = borrow(run, "run")?;
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        write_outputs(&dir, &r.cfg, &r.inner).map_err(harness_failure)
    })
}

/// # Safety
/// `run` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sp_run_free(run: *mut SpRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Writes `(m + damping·I)^(-1/p)` of the symmetric `dim`×`dim` row-major
/// matrix `m` into `out`.
///
/// # Safety
/// `m` and `out` must each be valid for `dim*dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn sp_inv_root(m: *const f64, dim: usize, p: u32, damping: f64, out: *mut f64) -> SpStatus {
    guard(|| {
        if m.is_null() || out.is_null() {
            return Err(null("matrix"));
        }
        if dim == 0 {
            return Err((SpStatus::InvalidArgument, "dim must be positive".into()));
        }
        let data = std::slice::from_raw_parts(m, dim * dim).to_vec();
        let sym = SymMatrix::from_full(dim, data).map_err(|e| (SpStatus::InvalidArgument, e.to_string()))?;
        let root = inv_root(&sym, p, damping).map_err(|e| (SpStatus::InvalidArgument, e.to_string()))?;
        let full = root.to_full_vec();
        ptr::copy_nonoverlapping(full.as_ptr(), out, full.len());
        Ok(())
    })
}

/// Normalized loss-reduction efficiency `(l_init - l_final) / e_ratio`.
///
/// # Safety
/// `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn sp_compute_eta(l_final: f64, l_init: f64, e_ratio: f64, out: *mut f64) -> SpStatus {
    guard(|| {
        let eta = compute_eta(EfficiencyInput { l_final, l_init, e_ratio })
            .map_err(|e| (SpStatus::InvalidArgument, e.to_string()))?;
        *out.as_mut().ok_or_else(|| null("out"))? = eta;
        Ok(())
    })
}

/// Creates a store with the given tier capacities. `cold_path` may be null
/// for an anonymous temporary file.
///
/// # Safety
/// `cold_path` must be null or a NUL-terminated string; `out` must be valid
/// for one write.
#[no_mangle]
pub unsafe extern "C" fn sp_store_new(
    hot_bytes: u64,
    host_bytes: u64,
    cold_path: *const c_char,
    out: *mut *mut SpStore,
) -> SpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cold_path = if cold_path.is_null() {
            None
        } else {
            Some(PathBuf::from(str_arg(cold_path, "cold_path")?))
        };
        let cfg = TierConfig {
            hot_capacity_bytes: hot_bytes,
            host_capacity_bytes: host_bytes,
            cold_path,
            ..TierConfig::default()
        };
        let inner = TierStore::new(cfg, SimClock::virtual_at(0)).map_err(tier_failure)?;
        *out = Box::into_raw(Box::new(SpStore { inner }));
        Ok(())
    })
}

/// Stores `len` bytes under `(block, role)` in `tier`, replacing any
/// previous value. `role` indexes FactorL, FactorR, InvL, InvR, BasisL,
/// BasisR, MomentM, MomentV in that order.
///
/// # Safety
/// `store` must be a live store handle; `data` must be valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn sp_store_put(
    store: *const SpStore,
    block: u32,
    role: u8,
    data: *const u8,
    len: usize,
    tier: SpTier,
) -> SpStatus {
    guard(|| {
        let s = borrow(store, "store")?;
        if data.is_null() {
            return Err(null("data"));
        }
        let bytes = std::slice::from_raw_parts(data, len).to_vec();
        let key = TensorKey::new(block, self::role(role)?);
        s.inner.put(key, bytes, tier.into()).map_err(tier_failure)?;
        Ok(())
    })
}

/// Copies the value under `(block, role)` into `buf`. `written` receives
/// the value's length, also when `buf` is too small; `tier` receives the
/// tier the entry resides in afterwards. Cold entries are paged into Host.
///
/// # Safety
/// `store` must be a live store handle; `buf` must be null or valid for
/// `len` bytes; `written` and `tier` must be null or valid for one write.
#[no_mangle]
pub unsafe extern "C" fn sp_store_get(
    store: *const SpStore,
    block: u32,
    role: u8,
    buf: *mut u8,
    len: usize,
    written: *mut usize,
    tier: *mut SpTier,
) -> SpStatus {
    guard(|| {
        let s = borrow(store, "store")?;
        let key = TensorKey::new(block, self::role(role)?);
        let (bytes, from) = s.inner.get(&key).map_err(tier_failure)?;
        if !written.is_null() {
            *written = bytes.len();
        }
        if !tier.is_null() {
            *tier = from.into();
        }
        if buf.is_null() || len < bytes.len() {
            return Err((SpStatus::BufferTooSmall, format!("need {} bytes, have {len}", bytes.len())));
        }
        ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len());
        Ok(())
    })
}

/// Bytes currently resident in `tier`.
///
/// # Safety
/// `store` must be a live store handle; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn sp_store_resident_bytes(store: *const SpStore, tier: SpTier, out: *mut u64) -> SpStatus {
    guard(|| {
        let s = borrow(store, "store")?;
        *out.as_mut().ok_or_else(|| null("out"))? = s.inner.resident_bytes(tier.into());
        Ok(())
    })
}

/// # Safety
/// `store` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sp_store_free(store: *mut SpStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}
