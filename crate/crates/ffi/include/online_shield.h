#ifndef ONLINE_SHIELD_H
#define ONLINE_SHIELD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OsStatus {
  OS_STATUS_OK = 0,
  OS_STATUS_NULL_POINTER = 1,
  OS_STATUS_INVALID_UTF8 = 2,
  OS_STATUS_INVALID_ARGUMENT = 3,
  // The shield blocks the requested task.
  OS_STATUS_BLOCKED = 4,
  OS_STATUS_INTERNAL = 5,
  OS_STATUS_PANIC = 6,
} OsStatus;

// A parsed arena.
typedef struct OsArena OsArena;

// A Snake game with its online shield, driven one round at a time.
typedef struct OsGame OsGame;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success. The
// pointer stays valid until the next call on this thread.
const char *os_last_error(void);

// # Safety
// `s` is null or a string returned by this library, not yet freed.
void os_string_free(char *s);

// Parses an ASCII gridworld ('.' corridor, '#' wall) or an arena JSON document.
//
// # Safety
// `map` is a NUL-terminated string; `out` is valid for writes.
enum OsStatus os_arena_new(const char *map, struct OsArena **out);

// # Safety
// `arena` is null or a handle from [`os_arena_new`], not yet freed.
void os_arena_free(struct OsArena *arena);

// Number of locations, or 0 for a null handle.
//
// # Safety
// `arena` is null or a live handle.
uintptr_t os_arena_num_locations(const struct OsArena *arena);

// Shield valuation of a state document, written to `out_json` as JSON with
// `tasks` (path, value, band), `optimal`, `allowed` (task indices) and `delta`.
// `behaviors` holds `n_behaviors` behaviour documents; adversaries without one
// pick uniformly.
//
// # Safety
// `arena` is a live handle; `state_json` and each of the `n_behaviors` entries
// of `behaviors` are NUL-terminated strings; `out_json` is valid for writes.
enum OsStatus os_check(const struct OsArena *arena,
                       const char *state_json,
                       const char *const *behaviors,
                       uintptr_t n_behaviors,
                       uint32_t horizon,
                       double delta,
                       char **out_json);

// New game in human mode. A null `map` selects the built-in 17×17 map.
//
// # Safety
// `map` is null or a NUL-terminated string; `out` is valid for writes.
enum OsStatus os_game_new(const char *map,
                          uint64_t seed,
                          uint32_t horizon,
                          double delta,
                          struct OsGame **out);

// # Safety
// `game` is null or a handle from [`os_game_new`], not yet freed.
void os_game_free(struct OsGame *game);

// Current frame in the service's wire format.
//
// # Safety
// `game` is a live handle; `out_json` is valid for writes.
enum OsStatus os_game_frame(const struct OsGame *game, char **out_json);

// Applies a command in the service's wire format, e.g. `{"type":"choose","task":0}`.
// A blocked choice returns `Blocked`; other refusals `InvalidArgument`. The
// error message is the refusal as JSON.
//
// # Safety
// `game` is a live handle; `command_json` is a NUL-terminated string.
enum OsStatus os_game_command(struct OsGame *game, const char *command_json);

// Advances one round unless the game waits for a choice, is paused or is over.
// `advanced` (nullable) receives 1 if a round was played.
//
// # Safety
// `game` is a live handle; `advanced` is null or valid for writes.
enum OsStatus os_game_tick(struct OsGame *game, uint8_t *advanced);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ONLINE_SHIELD_H */
