/* C interface for the divmotion diverse motion prediction library. */

#pragma once

/* Generated with cbindgen:0.29.4 */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every API call.
 */
typedef enum {
  DmStatus_Ok = 0,
  DmStatus_NullPointer = 1,
  DmStatus_InvalidArgument = 2,
  DmStatus_InvalidUtf8 = 3,
  DmStatus_RunFailed = 4,
  DmStatus_BufferTooSmall = 5,
  DmStatus_Panic = 6,
} DmStatus;

/**
 * Opaque predictor session holding the frozen models.
 */
typedef struct DmPredictor DmPredictor;

/**
 * Aggregate metrics from one evaluation run.
 */
typedef struct {
  double apd;
  double ade;
  double fde;
  double mmade;
  double mmfde;
  double ade_median;
  double fde_median;
  /**
   * Fraction of synthetic modes covered, or -1 when unavailable.
   */
  double mode_coverage;
  uintptr_t k;
} DmMetrics;

/**
 * Dimensions of the sequences a predictor consumes and produces.
 */
typedef struct {
  uintptr_t joints;
  uintptr_t coords;
  uintptr_t history_frames;
  uintptr_t future_frames;
  uintptr_t latent_dim;
} DmDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string; do not free.
 */
const char *dm_version(void);

/**
 * Last error message for this thread, or NULL if none. Free the returned
 * string with `dm_string_free`.
 */
char *dm_last_error_message(void);

/**
 * # Safety
 * `s` must have been returned by this library and not freed before.
 */
void dm_string_free(char *s);

/**
 * Generate the synthetic dataset described by the config file.
 *
 * # Safety
 * `config_path` must be a valid NUL-terminated string.
 */
DmStatus dm_generate_dataset(const char *config_path);

/**
 * Pretrain the CVAE per the config file.
 *
 * # Safety
 * `config_path` must be a valid NUL-terminated string.
 */
DmStatus dm_train_cvae(const char *config_path);

/**
 * Train the sampling stage selected by the config's `method`.
 *
 * # Safety
 * `config_path` must be a valid NUL-terminated string.
 */
DmStatus dm_train_sampler(const char *config_path);

/**
 * Evaluate `method` at `k` samples per input and write `out_metrics`.
 *
 * # Safety
 * `config_path` and `method` must be valid NUL-terminated strings;
 * `out_metrics` must point to writable memory for one `DmMetrics`.
 */
DmStatus dm_evaluate(const char *config_path,
                     const char *method,
                     uintptr_t k,
                     DmMetrics *out_metrics);

/**
 * Open a predictor session from checkpoint directories. `sampler_dir` may
 * be NULL for `method = "random"`. The handle must be released with
 * `dm_predictor_free`.
 *
 * # Safety
 * String arguments must be valid NUL-terminated strings (or NULL where
 * documented); `out` must point to writable pointer storage.
 */
DmStatus dm_predictor_open(const char *cvae_dir,
                           const char *sampler_dir,
                           const char *method,
                           uint64_t seed,
                           DmPredictor **out);

/**
 * Sequence dimensions of an open predictor.
 *
 * # Safety
 * `p` must be a live handle from `dm_predictor_open`; `out` must point to
 * writable memory for one `DmDims`.
 */
DmStatus dm_predictor_dims(const DmPredictor *p, DmDims *out);

/**
 * Sample `k` futures for one observed sequence. `observed` is row-major
 * [joints*coords, history_frames]; `out` receives k predictions of
 * [joints*coords, future_frames] back to back. `stream_id` selects the
 * random stream, so (seed, stream_id) pairs replay exactly.
 *
 * # Safety
 * `p` must be a live handle; `observed` must hold `observed_len` doubles
 * and `out` must have room for `out_capacity` doubles.
 */
DmStatus dm_predictor_sample(const DmPredictor *p,
                             const double *observed,
                             uintptr_t observed_len,
                             uintptr_t k,
                             uint64_t stream_id,
                             double *out,
                             uintptr_t out_capacity);

/**
 * Number of samples a fixed-K head produces per call, or 0 when the
 * predictor accepts any K.
 *
 * # Safety
 * `p` must be a live handle from `dm_predictor_open`.
 */
uintptr_t dm_predictor_fixed_k(const DmPredictor *p);

/**
 * Release a predictor handle.
 *
 * # Safety
 * `p` must be a handle from `dm_predictor_open`, not freed twice.
 */
void dm_predictor_free(DmPredictor *p);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus
