#ifndef ECGATTR_H
#define ECGATTR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EcgSignMode {
  ECG_SIGN_MODE_RAW = 0,
  ECG_SIGN_MODE_ABSOLUTE = 1,
} EcgSignMode;

typedef enum EcgStatus {
  ECG_STATUS_OK = 0,
  ECG_STATUS_NULL_POINTER = 1,
  ECG_STATUS_USAGE = 2,
  ECG_STATUS_CONFIG = 3,
  ECG_STATUS_INPUT = 4,
  ECG_STATUS_LOAD = 5,
  ECG_STATUS_IO = 6,
  ECG_STATUS_TRAINING = 7,
  ECG_STATUS_PANIC = 8,
} EcgStatus;

/**
 * Opaque network handle. Holds an inference network with batch norm folded.
 */
typedef struct EcgNetwork EcgNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ecg_version(void);

/**
 * Byte length of the calling thread's last error message (0 after success).
 */
size_t ecg_last_error_length(void);

/**
 * Copies the last error message, truncated to `capacity - 1` bytes and
 * NUL-terminated. Returns the number of bytes copied, excluding the NUL.
 *
 * # Safety
 * `buffer` must be valid for `capacity` bytes or null.
 */
size_t ecg_last_error_message(char *buffer, size_t capacity);

/**
 * Loads a checkpoint directory and folds its batch norm layers.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be valid for one write.
 */
enum EcgStatus ecg_network_load(const char *dir, struct EcgNetwork **out);

/**
 * Builds a freshly initialized network from a preset (`desk` or `paper`).
 *
 * # Safety
 * `preset` must be a NUL-terminated string; `out` must be valid for one write.
 */
enum EcgStatus ecg_network_build(const char *preset, uint64_t seed, struct EcgNetwork **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `net` must come from this library and not be used afterwards.
 */
void ecg_network_free(struct EcgNetwork *net);

/**
 * Expected signal length, or 0 for a null handle.
 *
 * # Safety
 * `net` must be a live handle or null.
 */
size_t ecg_network_input_length(const struct EcgNetwork *net);

/**
 * Number of output classes, or 0 for a null handle.
 *
 * # Safety
 * `net` must be a live handle or null.
 */
size_t ecg_network_num_classes(const struct EcgNetwork *net);

/**
 * Zero-mean, unit-variance copy of `signal` into `out` (both `len` values).
 *
 * # Safety
 * `signal` and `out` must be valid for `len` values.
 */
enum EcgStatus ecg_standardize(const float *signal, size_t len, float *out);

/**
 * Class probabilities of one signal.
 *
 * # Safety
 * `signal` must be valid for `len` values and `probs` for `probs_len`.
 */
enum EcgStatus ecg_predict(const struct EcgNetwork *net,
                           const float *signal,
                           size_t len,
                           double *probs,
                           size_t probs_len);

/**
 * Attribution map of the predicted class. `method` is a method name such as
 * `"GradCAM"`. `backgrounds` holds `n_backgrounds` signals of `len` values
 * each and is only read by DeepSHAP. The explained class is written to
 * `target` when it is non-null.
 *
 * # Safety
 * Pointers must be valid for the stated lengths; `backgrounds` may be null
 * when `n_backgrounds` is 0.
 */
enum EcgStatus ecg_attribute(const struct EcgNetwork *net,
                             const float *signal,
                             size_t len,
                             const char *method,
                             enum EcgSignMode sign_mode,
                             uint64_t seed,
                             size_t example_id,
                             const float *backgrounds,
                             size_t n_backgrounds,
                             float *out,
                             size_t out_len,
                             size_t *target);

/**
 * Localization score of `attr` against the ground-truth sample indices.
 *
 * # Safety
 * `attr` must be valid for `len` values, `gt` for `n_gt`, `out` for one write.
 */
enum EcgStatus ecg_localization_score(const float *attr,
                                      size_t len,
                                      const size_t *gt,
                                      size_t n_gt,
                                      double *out);

/**
 * Degradation score of `attr` for class `target`. `skipped` receives 1 when
 * `|p_0 - p_N| < min_gap` (the score is then 0), else 0.
 *
 * # Safety
 * `signal` and `attr` must be valid for `len` values; `score` and `skipped`
 * for one write each.
 */
enum EcgStatus ecg_degradation_score(const struct EcgNetwork *net,
                                     const float *signal,
                                     const float *attr,
                                     size_t len,
                                     size_t target,
                                     size_t window,
                                     double min_gap,
                                     double *score,
                                     int32_t *skipped);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ECGATTR_H */
