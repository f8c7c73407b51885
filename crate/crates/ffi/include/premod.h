#ifndef PREMOD_H
#define PREMOD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum PremodStatus {
  PREMOD_STATUS_OK = 0,
  PREMOD_STATUS_NULL_POINTER = 1,
  PREMOD_STATUS_INVALID_ARGUMENT = 2,
  PREMOD_STATUS_IO = 3,
  PREMOD_STATUS_CORRUPT = 4,
  PREMOD_STATUS_PANIC = 5,
} PremodStatus;

// Outcome of a screening cascade.
typedef struct PremodCascade PremodCascade;

// A trained classifier loaded from a checkpoint.
typedef struct PremodModel PremodModel;

// Prior shift between a training prior and a deployment prior.
typedef struct PremodRecal PremodRecal;

typedef struct PremodCascadeSummary {
  uintptr_t n_stages;
  double detected;
  double nns;
  double nns_base;
  double efficiency;
  double ppv;
} PremodCascadeSummary;

typedef struct PremodStage {
  double population;
  double prevalence;
  double cases;
  double true_positives;
  double false_positives;
  double positives;
} PremodStage;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *premod_version(void);

// Message of the last failed call on this thread, or NULL after a
// successful call. Valid until the next call on the same thread.
const char *premod_last_error(void);

// Builds a recalibration from source and target prior odds.
//
// # Safety
// `out_handle` must be a valid pointer.
enum PremodStatus premod_recal_new(double pi_src, double pi_tar, struct PremodRecal **out_handle);

// Builds a recalibration from a `1:ratio` training design and a target
// prevalence.
//
// # Safety
// `out_handle` must be a valid pointer.
enum PremodStatus premod_recal_from_ratio(double ratio,
                                          double target_prevalence,
                                          struct PremodRecal **out_handle);

// Shifts `n` probabilities in place.
//
// # Safety
// `handle` must come from a `premod_recal_*` constructor and `probs` must
// point to `n` doubles.
enum PremodStatus premod_recal_apply(const struct PremodRecal *handle, double *probs, uintptr_t n);

// Additive logit shift of the recalibration.
//
// # Safety
// `handle` and `delta` must be valid pointers.
enum PremodStatus premod_recal_delta(const struct PremodRecal *handle, double *delta);

// # Safety
// `handle` must be NULL or come from a `premod_recal_*` constructor.
void premod_recal_free(struct PremodRecal *handle);

// Area under the ROC curve with ties counted as one half. Labels are
// nonzero for cases.
//
// # Safety
// `scores` and `labels` must point to `n` elements; `result` must be valid.
enum PremodStatus premod_auroc(const double *scores,
                               const uint8_t *labels,
                               uintptr_t n,
                               double *result);

// Expected calibration error over `n_bins` equal-width bins.
//
// # Safety
// As for [`premod_auroc`].
enum PremodStatus premod_ece(const double *probs,
                             const uint8_t *labels,
                             uintptr_t n,
                             uintptr_t n_bins,
                             double *result);

// Mean squared error of probabilities against labels.
//
// # Safety
// As for [`premod_auroc`].
enum PremodStatus premod_brier(const double *probs,
                               const uint8_t *labels,
                               uintptr_t n,
                               double *result);

// Runs a built-in scenario (`premod_redmod`, `endpac`, `eus_only`).
//
// # Safety
// `name` must be a NUL-terminated string and `out_handle` valid.
enum PremodStatus premod_cascade_builtin(const char *name, struct PremodCascade **out_handle);

// Runs a scenario given as TOML text.
//
// # Safety
// `toml` must be a NUL-terminated string and `out_handle` valid.
enum PremodStatus premod_cascade_from_toml(const char *toml, struct PremodCascade **out_handle);

// # Safety
// `handle` and `summary` must be valid pointers.
enum PremodStatus premod_cascade_summary(const struct PremodCascade *handle,
                                         struct PremodCascadeSummary *summary);

// Stage `i` of the cascade, in screening order.
//
// # Safety
// `handle` and `stage` must be valid pointers.
enum PremodStatus premod_cascade_stage(const struct PremodCascade *handle,
                                       uintptr_t i,
                                       struct PremodStage *stage);

// # Safety
// `handle` must be NULL or come from a `premod_cascade_*` constructor.
void premod_cascade_free(struct PremodCascade *handle);

// Loads a checkpoint from memory.
//
// # Safety
// `bytes` must point to `len` bytes and `out_handle` must be valid.
enum PremodStatus premod_model_load(const uint8_t *bytes,
                                    uintptr_t len,
                                    struct PremodModel **out_handle);

// Loads a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string and `out_handle` valid.
enum PremodStatus premod_model_load_file(const char *path, struct PremodModel **out_handle);

// Input shape expected by the model: buckets by features.
//
// # Safety
// All pointers must be valid.
enum PremodStatus premod_model_dims(const struct PremodModel *handle,
                                    uintptr_t *n_buckets,
                                    uintptr_t *n_features);

// Scores one row-major bucket matrix (bucket 0 nearest the index day).
//
// # Safety
// `values` must point to `len` doubles; `logit` and `prob` must be valid.
enum PremodStatus premod_model_score(const struct PremodModel *handle,
                                     const double *values,
                                     uintptr_t len,
                                     double *logit,
                                     double *prob);

// # Safety
// `handle` must be NULL or come from a `premod_model_load*` function.
void premod_model_free(struct PremodModel *handle);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PREMOD_H */
