#ifndef TRAJDEBUG_H
#define TRAJDEBUG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TdStatus {
  TD_STATUS_OK = 0,
  TD_STATUS_NULL_ARGUMENT = 1,
  TD_STATUS_INVALID_UTF8 = 2,
  /**
   * Malformed JSON input or a schema violation.
   */
  TD_STATUS_PARSE = 3,
  /**
   * Bad settings or an input that violates a precondition.
   */
  TD_STATUS_CONFIG = 4,
  /**
   * Model, judge, or environment failure while running.
   */
  TD_STATUS_RUNTIME = 5,
  TD_STATUS_BUDGET_EXCEEDED = 6,
  TD_STATUS_PANIC = 7,
} TdStatus;

/**
 * Opaque model client. Usage accumulates across calls.
 */
typedef struct TdClient TdClient;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message on this thread, or null. Owned by the library and
 * valid until the next call on the same thread.
 */
const char *td_last_error(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library, freed once.
 */
void td_string_free(char *s);

/**
 * Builds a scripted client from script JSON (the `--script` file format).
 *
 * # Safety
 * `script_json` must be a nul-terminated string; `out` must be writable.
 */
enum TdStatus td_client_scripted_new(const char *script_json, struct TdClient **out);

/**
 * # Safety
 * `client` must be null or a handle from `td_client_scripted_new`, freed once.
 */
void td_client_free(struct TdClient *client);

/**
 * Total tokens this client has spent, or 0 for null.
 *
 * # Safety
 * `client` must be null or a live handle.
 */
uint64_t td_client_tokens_used(const struct TdClient *client);

/**
 * Caps the client's total token spend; 0 removes the cap.
 *
 * # Safety
 * `client` must be null or a live handle.
 */
enum TdStatus td_client_set_token_budget(const struct TdClient *client, uint64_t tokens);

/**
 * Runs per-step, per-module detection. Writes the error profile as JSON.
 *
 * # Safety
 * Pointers must be valid; `out` receives a string for `td_string_free`.
 */
enum TdStatus td_detect(const struct TdClient *judge, const char *trajectory_json, char **out);

/**
 * Detect, localize, and re-roll a failed grid-world trajectory for up
 * to `budget` attempts (0 means the default). Writes the debug result
 * as JSON.
 *
 * # Safety
 * Pointers must be valid; `out` receives a string for `td_string_free`.
 */
enum TdStatus td_debug(const struct TdClient *agent,
                       const struct TdClient *judge,
                       const char *trajectory_json,
                       const char *world_json,
                       uint32_t budget,
                       char **out);

/**
 * Scores predictions against a benchmark file's contents. `micro`
 * non-zero switches to micro averaging. Writes the metrics report as JSON.
 *
 * # Safety
 * Pointers must be valid; `out` receives a string for `td_string_free`.
 */
enum TdStatus td_eval_detection(const char *benchmark_json,
                                const char *predictions_json,
                                int32_t micro,
                                char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRAJDEBUG_H */
