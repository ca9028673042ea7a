#ifndef RACA_H
#define RACA_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result code of every fallible call.
typedef enum RacaStatus {
  RACA_STATUS_OK = 0,
  RACA_STATUS_NULL_POINTER = 1,
  RACA_STATUS_INVALID_ARGUMENT = 2,
  RACA_STATUS_CONFIG = 3,
  RACA_STATUS_SHAPE = 4,
  RACA_STATUS_IO = 5,
  RACA_STATUS_CHECKPOINT = 6,
  RACA_STATUS_RUNTIME = 7,
  RACA_STATUS_BUFFER_TOO_SMALL = 8,
  RACA_STATUS_PANIC = 9,
} RacaStatus;

// Opaque arena handle.
typedef struct RacaArena RacaArena;

// Opaque handle to the agent network of a checkpoint, with per-agent
// recurrent state.
typedef struct RacaPolicy RacaPolicy;

// Outcome of one arena step.
typedef struct RacaStepResult {
  double reward;
  bool terminated;
  bool won;
  bool truncated;
} RacaStepResult;

// Aggregate of greedy evaluation episodes.
typedef struct RacaEvalResult {
  double win_rate;
  double mean_return;
  double mean_length;
} RacaEvalResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *raca_version(void);

// Description of the last failure on this thread, or null. The pointer is
// valid until the next call into this library on the same thread.
const char *raca_last_error_message(void);

// Creates an arena from its JSON config.
//
// # Safety
// `config_json` must be a NUL-terminated string and `out` a valid pointer.
enum RacaStatus raca_arena_new(const char *config_json, struct RacaArena **out);

// Releases an arena. Null is ignored.
//
// # Safety
// `arena` must come from [`raca_arena_new`] and not be used afterwards.
void raca_arena_free(struct RacaArena *arena);

// Starts an episode.
//
// # Safety
// `arena` must be a live handle.
enum RacaStatus raca_arena_reset(struct RacaArena *arena, uint64_t seed);

// Number of controlled agents, joint-action width and state width.
//
// # Safety
// `arena` must be a live handle; each out pointer may be null.
enum RacaStatus raca_arena_dims(const struct RacaArena *arena,
                                size_t *n_agents,
                                size_t *n_actions,
                                size_t *state_dim);

// Copies the global state into `buf`, which must hold `state_dim` values.
//
// # Safety
// `arena` must be a live handle and `buf` valid for `len` writes.
enum RacaStatus raca_arena_state(const struct RacaArena *arena, double *buf, size_t len);

// Writes agent `agent`'s availability mask (1 available, 0 not) into
// `buf`, which must hold `n_actions` bytes.
//
// # Safety
// `arena` must be a live handle and `buf` valid for `len` writes.
enum RacaStatus raca_arena_avail_actions(const struct RacaArena *arena,
                                         size_t agent,
                                         uint8_t *buf,
                                         size_t len);

// Applies one joint action (`n` entries, one per agent).
//
// # Safety
// `arena` must be a live handle, `actions` valid for `n` reads and `out`
// valid or null.
enum RacaStatus raca_arena_step(struct RacaArena *arena,
                                const size_t *actions,
                                size_t n,
                                struct RacaStepResult *out);

// Loads only the agent network of a checkpoint file.
//
// # Safety
// `checkpoint_path` must be a NUL-terminated string and `out` valid.
enum RacaStatus raca_policy_load(const char *checkpoint_path, struct RacaPolicy **out);

// Releases a policy. Null is ignored.
//
// # Safety
// `policy` must come from [`raca_policy_load`] and not be used afterwards.
void raca_policy_free(struct RacaPolicy *policy);

// Zeroes the recurrent state for a team of `n_agents`. Call at every
// episode start.
//
// # Safety
// `policy` must be a live handle.
enum RacaStatus raca_policy_reset_hidden(struct RacaPolicy *policy, size_t n_agents);

// Greedy decentralised actions for the arena's current observations,
// written to `actions` (`len >= n_agents`).
//
// # Safety
// Both handles must be live and `actions` valid for `len` writes.
enum RacaStatus raca_policy_act(struct RacaPolicy *policy,
                                const struct RacaArena *arena,
                                size_t *actions,
                                size_t len);

// Greedy evaluation of a checkpoint's agent network on an arena given as
// JSON.
//
// # Safety
// String arguments must be NUL-terminated and `out` valid.
enum RacaStatus raca_evaluate(const char *checkpoint_path,
                              const char *arena_json,
                              size_t episodes,
                              uint64_t seed,
                              struct RacaEvalResult *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RACA_H */
