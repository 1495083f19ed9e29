#ifndef FULM_H
#define FULM_H

#include <stddef.h>
#include <stdint.h>

/*
 Result codes. Values below 100 mirror the library's error codes.
 */
typedef enum FulmStatus {
  FULM_STATUS_OK = 0,
  FULM_STATUS_EMPTY_INPUT = 1,
  FULM_STATUS_SHAPE_MISMATCH = 2,
  FULM_STATUS_FACTOR_SHAPE = 3,
  FULM_STATUS_NOT_RECOVERED = 4,
  FULM_STATUS_UNKNOWN_TENSOR = 5,
  FULM_STATUS_NON_FINITE = 6,
  FULM_STATUS_INVALID_THRESHOLD = 7,
  FULM_STATUS_INVALID_CONFIG = 8,
  FULM_STATUS_BAD_MAGIC = 10,
  FULM_STATUS_UNSUPPORTED_VERSION = 11,
  FULM_STATUS_CONTAINER_TRUNCATED = 12,
  FULM_STATUS_LENGTH_MISMATCH = 13,
  FULM_STATUS_MALFORMED_HEADER = 14,
  FULM_STATUS_WRONG_CONTAINER_KIND = 15,
  FULM_STATUS_IO = 16,
  FULM_STATUS_TASK_SPEC = 20,
  FULM_STATUS_EMPTY_BATCH = 21,
  FULM_STATUS_TRAINING_DIVERGED = 22,
  FULM_STATUS_FRAME_TRUNCATED = 30,
  FULM_STATUS_BAD_TAG = 31,
  FULM_STATUS_LENGTH_OVERFLOW = 32,
  FULM_STATUS_UNEXPECTED_MESSAGE = 33,
  FULM_STATUS_TIMEOUT = 34,
  FULM_STATUS_ROUND_ABORTED = 35,
  FULM_STATUS_UNKNOWN_CLIENT = 36,
  FULM_STATUS_REMOTE_ERROR = 37,
  FULM_STATUS_UNKNOWN_EXPERIMENT = 40,
  FULM_STATUS_JSON = 41,
  FULM_STATUS_NULL_POINTER = 100,
  FULM_STATUS_INVALID_UTF8 = 101,
  FULM_STATUS_PANIC = 102,
} FulmStatus;

/*
 Merge strategy selector for `fulm_merge`.
 */
typedef enum FulmStrategy {
  FULM_STRATEGY_AVG = 0,
  FULM_STRATEGY_SUM = 1,
  FULM_STRATEGY_TIES = 2,
  FULM_STRATEGY_HIERARCHICAL = 3,
} FulmStrategy;

/*
 An adapter delta.
 */
typedef struct FulmDelta FulmDelta;

/*
 Full model parameters.
 */
typedef struct FulmParams FulmParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failure on this thread, or null. The pointer stays
 valid until the next failing call on the same thread.
 */
const char *fulm_last_error_message(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *fulm_version(void);

/*
 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum FulmStatus fulm_delta_load(const char *path, struct FulmDelta **out);

/*
 # Safety
 `delta` must come from this library; `path` must be NUL-terminated.
 */
enum FulmStatus fulm_delta_save(const struct FulmDelta *delta, const char *path);

/*
 # Safety
 `delta` must come from this library and not be used afterwards. Null is
 a no-op.
 */
void fulm_delta_free(struct FulmDelta *delta);

/*
 Euclidean norm of the dense-recovered delta.

 # Safety
 `delta` must come from this library; `out` must be writable.
 */
enum FulmStatus fulm_delta_norm(const struct FulmDelta *delta, double *out);

/*
 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum FulmStatus fulm_params_load(const char *path, struct FulmParams **out);

/*
 # Safety
 `params` must come from this library; `path` must be NUL-terminated.
 */
enum FulmStatus fulm_params_save(const struct FulmParams *params, const char *path);

/*
 # Safety
 `params` must come from this library and not be used afterwards. Null
 is a no-op.
 */
void fulm_params_free(struct FulmParams *params);

/*
 Cosine similarity of two deltas (0 when either is zero).

 # Safety
 `a` and `b` must come from this library; `out` must be writable.
 */
enum FulmStatus fulm_cosine(const struct FulmDelta *a, const struct FulmDelta *b, float *out);

/*
 Merges `count` deltas. `xi` is read only by the hierarchical strategy
 and `density` only by TIES and hierarchical.

 # Safety
 `deltas` must point to `count` valid handles; `out` must be writable.
 */
enum FulmStatus fulm_merge(const struct FulmDelta *const *deltas,
                           size_t count,
                           enum FulmStrategy strategy,
                           float xi,
                           float density,
                           struct FulmDelta **out);

/*
 `θ' = θ + ∇θ` with LoRA entries recovered at their `alpha / rank`.

 # Safety
 `base` and `delta` must come from this library; `out` must be writable.
 */
enum FulmStatus fulm_apply_delta(const struct FulmParams *base,
                                 const struct FulmDelta *delta,
                                 struct FulmParams **out);

/*
 Mean of the retention values and the reversed (`1 − m`) unlearning
 values, all fractions in `[0, 1]`.

 # Safety
 `retain` and `unlearn` must point to the given number of values (may be
 null when the count is 0); `out` must be writable.
 */
enum FulmStatus fulm_overall(const double *retain,
                             size_t n_retain,
                             const double *unlearn,
                             size_t n_unlearn,
                             double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FULM_H */
