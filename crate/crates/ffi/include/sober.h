#ifndef SOBER_FFI_H
#define SOBER_FFI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum SoberStatus {
  SOBER_STATUS_OK = 0,
  SOBER_STATUS_NULL_POINTER = 1,
  SOBER_STATUS_INVALID_UTF8 = 2,
  SOBER_STATUS_INVALID_ARGUMENT = 3,
  SOBER_STATUS_RUN_FAILED = 4,
  SOBER_STATUS_PANIC = 5,
} SoberStatus;

/**
 * Opaque handle to a finished run.
 */
typedef struct SoberRunResult SoberRunResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent error on this thread. The pointer is
 * valid until the next failing call on the same thread; do not free it.
 */
const char *sober_last_error_message(void);

/**
 * Runs a registered benchmark function under the named policy
 * (`sober-lfi`, `sober-ts`, `random` or `batch-ts-baseline`) with the given
 * solver configuration (JSON; `{}` for defaults) and seed.
 *
 * On success writes an owned handle to `out`.
 *
 * # Safety
 * `function`, `policy` and `config_json` must be NUL-terminated strings (or
 * null, which fails cleanly); `out` must point to writable storage for one
 * pointer.
 */
enum SoberStatus sober_run_function(const char *function,
                                    const char *policy,
                                    const char *config_json,
                                    uint64_t seed,
                                    struct SoberRunResult **out);

/**
 * Number of recorded iterations; 0 for a null handle.
 *
 * # Safety
 * `result` must be null or a handle from [`sober_run_function`].
 */
uintptr_t sober_result_iterations(const struct SoberRunResult *result);

/**
 * Best observed objective value; NaN for a null handle.
 *
 * # Safety
 * `result` must be null or a handle from [`sober_run_function`].
 */
double sober_result_incumbent_value(const struct SoberRunResult *result);

/**
 * Copies the per-iteration history as CSV into a newly allocated string.
 *
 * # Safety
 * `out` must point to writable storage for one pointer; free the string
 * with [`sober_string_free`].
 */
enum SoberStatus sober_result_history_csv(const struct SoberRunResult *result, char **out);

/**
 * Copies the run summary as JSON into a newly allocated string.
 *
 * # Safety
 * `out` must point to writable storage for one pointer; free the string
 * with [`sober_string_free`].
 */
enum SoberStatus sober_result_summary_json(const struct SoberRunResult *result, char **out);

/**
 * Frees a run handle; accepts null.
 *
 * # Safety
 * `result` must have been produced by [`sober_run_function`] and not freed
 * before.
 */
void sober_result_free(struct SoberRunResult *result);

/**
 * Frees a string returned by this library; accepts null.
 *
 * # Safety
 * `text` must have been returned by one of the `_csv`/`_json` functions and
 * not freed before.
 */
void sober_string_free(char *text);

/**
 * Lists the registered benchmark functions as a JSON array of
 * `{name, dim, constraints}` objects.
 *
 * # Safety
 * `out` must point to writable storage for one pointer; free the string
 * with [`sober_string_free`].
 */
enum SoberStatus sober_list_functions(char **out);

/**
 * Evaluates a registered function at `rows` points of dimension `cols`
 * given in row-major order, writing one value per row to `out_values`.
 *
 * # Safety
 * `points` must reference `rows * cols` readable doubles and `out_values`
 * `rows` writable doubles.
 */
enum SoberStatus sober_eval_function(const char *function,
                                     const double *points,
                                     uintptr_t rows,
                                     uintptr_t cols,
                                     double *out_values);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SOBER_FFI_H */
