/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef LLL_H
#define LLL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes shared by every entry point.
 */
typedef enum LllStatus {
  LLL_STATUS_OK = 0,
  LLL_STATUS_NULL_POINTER = 1,
  LLL_STATUS_INVALID_UTF8 = 2,
  LLL_STATUS_INVALID_ARGUMENT = 3,
  LLL_STATUS_CHECKPOINT = 4,
  LLL_STATUS_RUNTIME = 5,
  LLL_STATUS_PANIC = 6,
} LllStatus;

/**
 * A loaded checkpoint. Create with [`lll_model_load`], release with
 * [`lll_model_free`].
 */
typedef struct LllModel LllModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread; empty if none. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *lll_last_error(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void lll_string_free(char *s);

/**
 * Loads a checkpoint written by `lll train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum LllStatus lll_model_load(const char *path, struct LllModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `m` must come from [`lll_model_load`] and not have been freed.
 */
void lll_model_free(struct LllModel *m);

/**
 * JSON object with the checkpoint's position, digest and configs.
 *
 * # Safety
 * `m` must be a live model; `out` must be writable.
 */
enum LllStatus lll_model_info(const struct LllModel *m, char **out);

/**
 * Test score (0–100) of the model on one toy task, by name.
 *
 * # Safety
 * `m` must be a live model; `task` a NUL-terminated string; `score` writable.
 */
enum LllStatus lll_model_eval(const struct LllModel *m, const char *task, double *score);

/**
 * Decodes `count` pseudo samples for a task. Writes a JSON object with the
 * samples, their parse status and the correspondence rate (`null` when
 * `count` is 0).
 *
 * # Safety
 * `m` must be a live model; `task` a NUL-terminated string; `out` writable.
 */
enum LllStatus lll_model_generate(const struct LllModel *m,
                                  const char *task,
                                  uintptr_t count,
                                  uint64_t seed,
                                  char **out);

/**
 * Pseudo samples per earlier task when learning task `t` (1-based) with
 * `d_t` real samples and sampling ratio `gamma`.
 *
 * # Safety
 * `out` must be writable.
 */
enum LllStatus lll_pseudo_count(double gamma, uintptr_t t, uintptr_t d_t, uintptr_t *out);

/**
 * Per-dimension KL of `N(mu, sigma²)` from `N(0, 1)`, averaged over rows.
 * `mu` and `sigma` are row-major `rows × dim`; `out` receives `dim` values.
 *
 * # Safety
 * `mu` and `sigma` must hold `rows * dim` values and `out` room for `dim`.
 */
enum LllStatus lll_kl_per_dimension(const double *mu,
                                    const double *sigma,
                                    uintptr_t rows,
                                    uintptr_t dim,
                                    double *out);

/**
 * Free-bits KL `Σᵢ max(rho, klᵢ)` over `d` per-dimension values.
 *
 * # Safety
 * `kl` must hold `d` values; `out` must be writable.
 */
enum LllStatus lll_free_bits_kl(const double *kl, uintptr_t d, double rho, double *out);

/**
 * Scores whitespace-tokenized `pred` against `gold` with metric `em` or
 * `nf1`, in `[0, 1]`.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` must be writable.
 */
enum LllStatus lll_score(const char *metric, const char *pred, const char *gold, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LLL_H */
