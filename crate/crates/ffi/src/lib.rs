//! C ABI over the arena, trained agent policies and evaluation.
//!
//! Every fallible function returns a [`RacaStatus`]. On failure a
//! description is kept per thread and can be read with
//! [`raca_last_error_message`]. Handles are opaque and must be released
//! with their matching `_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use raca_core::agentnet::{greedy, AgentNet};
use raca_core::arena::{Arena, ArenaConfig, Snapshot};
use raca_core::harness::{agent_net_for, evaluate, load_checkpoint, LoadScope};
use raca_core::numerics::{ParamStore, Tensor};
use raca_core::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RacaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Shape = 4,
    Io = 5,
    Checkpoint = 6,
    Runtime = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Opaque arena handle.
pub struct RacaArena {
    arena: Arena,
    snapshot: Option<Snapshot>,
}

/// Opaque handle to the agent network of a checkpoint, with per-agent
/// recurrent state.
pub struct RacaPolicy {
    net: AgentNet,
    params: ParamStore,
    hidden: Tensor,
}

/// Outcome of one arena step.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RacaStepResult {
    pub reward: f64,
    pub terminated: bool,
    pub won: bool,
    pub truncated: bool,
}

/// Aggregate of greedy evaluation episodes.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RacaEvalResult {
    pub win_rate: f64,
    pub mean_return: f64,
    pub mean_length: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(RacaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config { .. } | Error::Json(_) => RacaStatus::Config,
            Error::Dimension { .. } | Error::Shape(_) => RacaStatus::Shape,
            Error::Io(_) => RacaStatus::Io,
            Error::Version { .. } | Error::Checksum { .. } | Error::Corrupt(_) => {
                RacaStatus::Checkpoint
            }
            Error::UnavailableAction { .. } | Error::Contract(_) => RacaStatus::InvalidArgument,
            _ => RacaStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(RacaStatus::NullPointer, format!("`{what}` is null"))
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RacaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            clear_error();
            RacaStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            RacaStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        Failure(
            RacaStatus::InvalidArgument,
            format!("`{what}` is not UTF-8"),
        )
    })
}

unsafe fn obj<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn snapshot_of(a: &RacaArena) -> Result<&Snapshot, Failure> {
    a.snapshot.as_ref().ok_or_else(|| {
        Failure(
            RacaStatus::InvalidArgument,
            "arena has not been reset".into(),
        )
    })
}

unsafe fn out_slice<'a, T>(
    p: *mut T,
    len: usize,
    need: usize,
    what: &str,
) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    if len < need {
        return Err(Failure(
            RacaStatus::BufferTooSmall,
            format!("`{what}` holds {len} entries, {need} needed"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn raca_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Description of the last failure on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn raca_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Creates an arena from its JSON config.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn raca_arena_new(
    config_json: *const c_char,
    out: *mut *mut RacaArena,
) -> RacaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = ArenaConfig::from_json(str_arg(config_json, "config_json")?)?;
        let arena = Arena::new(cfg)?;
        *out = Box::into_raw(Box::new(RacaArena {
            arena,
            snapshot: None,
        }));
        Ok(())
    })
}

/// Releases an arena. Null is ignored.
///
/// # Safety
/// `arena` must come from [`raca_arena_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn raca_arena_free(arena: *mut RacaArena) {
    if !arena.is_null() {
        drop(Box::from_raw(arena));
    }
}

/// Starts an episode.
///
/// # Safety
/// `arena` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn raca_arena_reset(arena: *mut RacaArena, seed: u64) -> RacaStatus {
    guard(|| {
        let a = obj(arena, "arena")?;
        a.snapshot = Some(a.arena.reset(seed)?);
        Ok(())
    })
}

/// Number of controlled agents, joint-action width and state width.
///
/// # Safety
/// `arena` must be a live handle; each out pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn raca_arena_dims(
    arena: *const RacaArena,
    n_agents: *mut usize,
    n_actions: *mut usize,
    state_dim: *mut usize,
) -> RacaStatus {
    guard(|| {
        let a = arena.as_ref().ok_or_else(|| null("arena"))?;
        for (p, v) in [
            (n_agents, a.arena.n_agents()),
            (n_actions, a.arena.n_actions()),
            (state_dim, a.arena.state_dim()),
        ] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Copies the global state into `buf`, which must hold `state_dim` values.
///
/// # Safety
/// `arena` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn raca_arena_state(
    arena: *const RacaArena,
    buf: *mut f64,
    len: usize,
) -> RacaStatus {
    guard(|| {
        let a = arena.as_ref().ok_or_else(|| null("arena"))?;
        let s = &snapshot_of(a)?.state;
        out_slice(buf, len, s.len(), "buf")?.copy_from_slice(s);
        Ok(())
    })
}

/// Writes agent `agent`'s availability mask (1 available, 0 not) into
/// `buf`, which must hold `n_actions` bytes.
///
/// # Safety
/// `arena` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn raca_arena_avail_actions(
    arena: *const RacaArena,
    agent: usize,
    buf: *mut u8,
    len: usize,
) -> RacaStatus {
    guard(|| {
        let a = arena.as_ref().ok_or_else(|| null("arena"))?;
        let masks = &snapshot_of(a)?.masks;
        let m = masks.get(agent).ok_or_else(|| {
            Failure(
                RacaStatus::InvalidArgument,
                format!("agent {agent} out of range (team of {})", masks.len()),
            )
        })?;
        for (o, &b) in out_slice(buf, len, m.len(), "buf")?.iter_mut().zip(m) {
            *o = b as u8;
        }
        Ok(())
    })
}

/// Applies one joint action (`n` entries, one per agent).
///
/// # Safety
/// `arena` must be a live handle, `actions` valid for `n` reads and `out`
/// valid or null.
#[no_mangle]
pub unsafe extern "C" fn raca_arena_step(
    arena: *mut RacaArena,
    actions: *const usize,
    n: usize,
    out: *mut RacaStepResult,
) -> RacaStatus {
    guard(|| {
        let a = obj(arena, "arena")?;
        snapshot_of(a)?;
        if actions.is_null() {
            return Err(null("actions"));
        }
        let acts = std::slice::from_raw_parts(actions, n);
        let (o, snap) = a.arena.step(acts)?;
        a.snapshot = Some(snap);
        if let Some(out) = out.as_mut() {
            *out = RacaStepResult {
                reward: o.reward,
                terminated: o.terminated,
                won: o.won,
                truncated: o.truncated,
            };
        }
        Ok(())
    })
}

/// Loads only the agent network of a checkpoint file.
///
/// # Safety
/// `checkpoint_path` must be a NUL-terminated string and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn raca_policy_load(
    checkpoint_path: *const c_char,
    out: *mut *mut RacaPolicy,
) -> RacaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(checkpoint_path, "checkpoint_path")?;
        let ck = load_checkpoint(Path::new(path), LoadScope::AgentOnly)?;
        let net = agent_net_for(&ck.config)?;
        net.check(&ck.params)?;
        let hidden = net.initial_hidden(0);
        *out = Box::into_raw(Box::new(RacaPolicy {
            net,
            params: ck.params,
            hidden,
        }));
        Ok(())
    })
}

/// Releases a policy. Null is ignored.
///
/// # Safety
/// `policy` must come from [`raca_policy_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn raca_policy_free(policy: *mut RacaPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Zeroes the recurrent state for a team of `n_agents`. Call at every
/// episode start.
///
/// # Safety
/// `policy` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn raca_policy_reset_hidden(
    policy: *mut RacaPolicy,
    n_agents: usize,
) -> RacaStatus {
    guard(|| {
        let p = obj(policy, "policy")?;
        p.hidden = p.net.initial_hidden(n_agents);
        Ok(())
    })
}

/// Greedy decentralised actions for the arena's current observations,
/// written to `actions` (`len >= n_agents`).
///
/// # Safety
/// Both handles must be live and `actions` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn raca_policy_act(
    policy: *mut RacaPolicy,
    arena: *const RacaArena,
    actions: *mut usize,
    len: usize,
) -> RacaStatus {
    guard(|| {
        let p = obj(policy, "policy")?;
        let a = arena.as_ref().ok_or_else(|| null("arena"))?;
        let snap = snapshot_of(a)?;
        let n = snap.observations.len();
        if p.hidden.rows() != n {
            return Err(Failure(
                RacaStatus::InvalidArgument,
                format!(
                    "hidden state holds {} agents, arena has {n}; call raca_policy_reset_hidden",
                    p.hidden.rows()
                ),
            ));
        }
        let out = out_slice(actions, len, n, "actions")?;
        let (q, h) = p.net.step(&p.params, &snap.observations, &p.hidden)?;
        for (i, m) in snap.masks.iter().enumerate() {
            out[i] = greedy(q.row(i), m).ok_or_else(|| {
                Failure(
                    RacaStatus::Runtime,
                    format!("agent {i} has no available action"),
                )
            })?;
        }
        p.hidden = h;
        Ok(())
    })
}

/// Greedy evaluation of a checkpoint's agent network on an arena given as
/// JSON.
///
/// # Safety
/// String arguments must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn raca_evaluate(
    checkpoint_path: *const c_char,
    arena_json: *const c_char,
    episodes: usize,
    seed: u64,
    out: *mut RacaEvalResult,
) -> RacaStatus {
    guard(|| {
        let out = obj(out, "out")?;
        let path = str_arg(checkpoint_path, "checkpoint_path")?;
        let cfg = ArenaConfig::from_json(str_arg(arena_json, "arena_json")?)?;
        let ck = load_checkpoint(Path::new(path), LoadScope::AgentOnly)?;
        let net = agent_net_for(&ck.config)?;
        let r = evaluate(&net, &ck.params, &cfg, episodes, seed)?;
        *out = RacaEvalResult {
            win_rate: r.win_rate,
            mean_return: r.mean_return,
            mean_length: r.mean_length,
        };
        Ok(())
    })
}
