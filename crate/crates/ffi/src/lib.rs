//! C ABI over the shield engine.
//!
//! Handles are opaque and owned by the caller, who frees them with the matching
//! `*_free` function. Every fallible call returns an [`OsStatus`]; on failure the
//! message is available from [`os_last_error`] on the same thread. Strings returned
//! through `char **` out-parameters are released with [`os_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use online_shield::arena::{gridworld_from_ascii, load_arena, Arena};
use online_shield::behavior::load_behavior;
use online_shield::harness::{behaviors_for, check, state_from_doc, StateDoc};
use online_shield::service::{parse_command, GameSession, ServerMessage, ServiceConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    /// The shield blocks the requested task.
    Blocked = 4,
    Internal = 5,
    Panic = 6,
}

/// A parsed arena.
pub struct OsArena {
    arena: Arena,
}

/// A Snake game with its online shield, driven one round at a time.
pub struct OsGame {
    session: GameSession,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

type Failure = (OsStatus, String);

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> OsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            OsStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            OsStatus::Panic
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    (OsStatus::InvalidArgument, e.to_string())
}

/// # Safety
/// `p` is null or a NUL-terminated string.
unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err((OsStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (OsStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

/// # Safety
/// `out` is null or valid for writes.
unsafe fn give_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    if out.is_null() {
        return Err((OsStatus::NullPointer, "output pointer is null".into()));
    }
    let c = CString::new(s).map_err(|e| (OsStatus::Internal, e.to_string()))?;
    *out = c.into_raw();
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success. The
/// pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn os_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `s` is null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn os_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses an ASCII gridworld ('.' corridor, '#' wall) or an arena JSON document.
///
/// # Safety
/// `map` is a NUL-terminated string; `out` is valid for writes.
#[no_mangle]
pub unsafe extern "C" fn os_arena_new(map: *const c_char, out: *mut *mut OsArena) -> OsStatus {
    guard(|| {
        if out.is_null() {
            return Err((OsStatus::NullPointer, "output pointer is null".into()));
        }
        let map = text(map, "map")?;
        let arena = if map.trim_start().starts_with('{') {
            load_arena(map.as_bytes())
        } else {
            gridworld_from_ascii(map)
        }
        .map_err(invalid)?;
        *out = Box::into_raw(Box::new(OsArena { arena }));
        Ok(())
    })
}

/// # Safety
/// `arena` is null or a handle from [`os_arena_new`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn os_arena_free(arena: *mut OsArena) {
    if !arena.is_null() {
        drop(Box::from_raw(arena));
    }
}

/// Number of locations, or 0 for a null handle.
///
/// # Safety
/// `arena` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn os_arena_num_locations(arena: *const OsArena) -> usize {
    arena.as_ref().map_or(0, |a| a.arena.num_locations())
}

/// Shield valuation of a state document, written to `out_json` as JSON with
/// `tasks` (path, value, band), `optimal`, `allowed` (task indices) and `delta`.
/// `behaviors` holds `n_behaviors` behaviour documents; adversaries without one
/// pick uniformly.
///
/// # Safety
/// `arena` is a live handle; `state_json` and each of the `n_behaviors` entries
/// of `behaviors` are NUL-terminated strings; `out_json` is valid for writes.
#[no_mangle]
pub unsafe extern "C" fn os_check(
    arena: *const OsArena,
    state_json: *const c_char,
    behaviors: *const *const c_char,
    n_behaviors: usize,
    horizon: u32,
    delta: f64,
    out_json: *mut *mut c_char,
) -> OsStatus {
    guard(|| {
        let arena = &arena
            .as_ref()
            .ok_or((OsStatus::NullPointer, "arena is null".to_string()))?
            .arena;
        let doc: StateDoc = serde_json::from_str(text(state_json, "state")?).map_err(invalid)?;
        let state = state_from_doc(arena, &doc).map_err(invalid)?;
        if n_behaviors > 0 && behaviors.is_null() {
            return Err((OsStatus::NullPointer, "behaviors is null".into()));
        }
        let mut given = Vec::with_capacity(n_behaviors);
        for i in 0..n_behaviors {
            let b = text(*behaviors.add(i), "behavior")?;
            given.push(load_behavior(arena, b.as_bytes()).map_err(invalid)?);
        }
        let behaviors = behaviors_for(arena, state.positions.len() - 1, &given).map_err(invalid)?;
        let report = check(arena, &behaviors, &state, horizon, delta).map_err(invalid)?;
        give_string(out_json, serde_json::to_string(&report).map_err(|e| (OsStatus::Internal, e.to_string()))?)
    })
}

/// New game in human mode. A null `map` selects the built-in 17×17 map.
///
/// # Safety
/// `map` is null or a NUL-terminated string; `out` is valid for writes.
#[no_mangle]
pub unsafe extern "C" fn os_game_new(
    map: *const c_char,
    seed: u64,
    horizon: u32,
    delta: f64,
    out: *mut *mut OsGame,
) -> OsStatus {
    guard(|| {
        if out.is_null() {
            return Err((OsStatus::NullPointer, "output pointer is null".into()));
        }
        let mut config = ServiceConfig {
            seed,
            horizon,
            delta,
            ..Default::default()
        };
        if !map.is_null() {
            config.map = text(map, "map")?.to_string();
        }
        let session = GameSession::new(config).map_err(invalid)?;
        *out = Box::into_raw(Box::new(OsGame { session }));
        Ok(())
    })
}

/// # Safety
/// `game` is null or a handle from [`os_game_new`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn os_game_free(game: *mut OsGame) {
    if !game.is_null() {
        drop(Box::from_raw(game));
    }
}

/// Current frame in the service's wire format.
///
/// # Safety
/// `game` is a live handle; `out_json` is valid for writes.
#[no_mangle]
pub unsafe extern "C" fn os_game_frame(game: *const OsGame, out_json: *mut *mut c_char) -> OsStatus {
    guard(|| {
        let g = game
            .as_ref()
            .ok_or((OsStatus::NullPointer, "game is null".to_string()))?;
        give_string(out_json, ServerMessage::Frame(g.session.frame()).to_json())
    })
}

/// Applies a command in the service's wire format, e.g. `{"type":"choose","task":0}`.
/// A blocked choice returns `Blocked`; other refusals `InvalidArgument`. The
/// error message is the refusal as JSON.
///
/// # Safety
/// `game` is a live handle; `command_json` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn os_game_command(game: *mut OsGame, command_json: *const c_char) -> OsStatus {
    guard(|| {
        let g = game
            .as_mut()
            .ok_or((OsStatus::NullPointer, "game is null".to_string()))?;
        let cmd = text(command_json, "command")?;
        let refused = |r: online_shield::service::Rejection| {
            let status = if r.error == "blocked" {
                OsStatus::Blocked
            } else {
                OsStatus::InvalidArgument
            };
            (status, r.to_message().to_json())
        };
        let cmd = parse_command(cmd).map_err(refused)?;
        g.session.handle(cmd).map(drop).map_err(refused)
    })
}

/// Advances one round unless the game waits for a choice, is paused or is over.
/// `advanced` (nullable) receives 1 if a round was played.
///
/// # Safety
/// `game` is a live handle; `advanced` is null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn os_game_tick(game: *mut OsGame, advanced: *mut u8) -> OsStatus {
    guard(|| {
        let g = game
            .as_mut()
            .ok_or((OsStatus::NullPointer, "game is null".to_string()))?;
        let before = g.session.game().tick();
        g.session.tick().map_err(|e| (OsStatus::Internal, e.to_string()))?;
        if !advanced.is_null() {
            *advanced = u8::from(g.session.game().tick() != before);
        }
        Ok(())
    })
}
