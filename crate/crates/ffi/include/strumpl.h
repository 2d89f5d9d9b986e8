/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef STRUMPL_H
#define STRUMPL_H

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes; the non-zero values below 5 match the command-line exit codes.
 */
typedef enum {
  STRUMPL_STATUS_OK = 0,
  STRUMPL_STATUS_INTERNAL = 1,
  STRUMPL_STATUS_CONFIG = 2,
  STRUMPL_STATUS_MISSING = 3,
  STRUMPL_STATUS_INCOMPATIBLE = 4,
  STRUMPL_STATUS_NULL_POINTER = 5,
  STRUMPL_STATUS_INVALID_ARGUMENT = 6,
  STRUMPL_STATUS_PANIC = 7,
} StrumplStatus;

typedef enum {
  STRUMPL_SPLIT_TRAIN = 0,
  STRUMPL_SPLIT_VAL = 1,
  STRUMPL_SPLIT_TEST = 2,
} StrumplSplit;

/**
 * A generated or loaded synthetic world.
 */
typedef struct StrumplDataset StrumplDataset;

/**
 * Trained parameters with the normalisation they were trained under.
 */
typedef struct StrumplModel StrumplModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *strumpl_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *strumpl_version(void);

/**
 * Draws the world described by the `[world]` section of `config_toml`
 * (library defaults when null).
 *
 * # Safety
 * `config_toml` must be null or a NUL-terminated string; `out` must be writable.
 */
StrumplStatus strumpl_dataset_generate(const char *config_toml, StrumplDataset **out);

/**
 * # Safety
 * `dir` must be a NUL-terminated path; `out` must be writable.
 */
StrumplStatus strumpl_dataset_load(const char *dir, StrumplDataset **out);

/**
 * # Safety
 * `ds` must come from this library; `dir` must be a NUL-terminated path.
 */
StrumplStatus strumpl_dataset_save(const StrumplDataset *ds, const char *dir);

/**
 * Patch count of one split.
 *
 * # Safety
 * `ds` must come from this library; `out` must be writable.
 */
StrumplStatus strumpl_dataset_len(const StrumplDataset *ds, StrumplSplit split, size_t *out);

/**
 * # Safety
 * `ds` must be null or come from [`strumpl_dataset_generate`] or [`strumpl_dataset_load`].
 */
void strumpl_dataset_free(StrumplDataset *ds);

/**
 * Trains one model with the sections of `config_toml` (defaults when null).
 * With a non-null `run_dir` the run directory files are written there.
 *
 * # Safety
 * `ds` must come from this library; string arguments must be null or
 * NUL-terminated; `out` must be writable.
 */
StrumplStatus strumpl_train(const StrumplDataset *ds,
                            const char *config_toml,
                            const char *run_dir,
                            StrumplModel **out);

/**
 * Loads the best checkpoint of a run directory.
 *
 * # Safety
 * `run_dir` must be a NUL-terminated path; `out` must be writable.
 */
StrumplStatus strumpl_model_load(const char *run_dir, StrumplModel **out);

/**
 * Covariate channels and output variables of a model.
 *
 * # Safety
 * `m` must come from this library; `c_in` and `k` must be writable.
 */
StrumplStatus strumpl_model_shape(const StrumplModel *m, size_t *c_in, size_t *k);

/**
 * Predicts every variable in physical units. `covariates` is `[c_in, h, w]`
 * row-major; `out` receives `[k, h, w]` and must hold `out_len` values.
 *
 * # Safety
 * `covariates` must point to `c_in*h*w` doubles and `out` to `out_len` doubles.
 */
StrumplStatus strumpl_model_predict(const StrumplModel *m,
                                    const double *covariates,
                                    size_t c_in,
                                    size_t h,
                                    size_t w,
                                    double *out,
                                    size_t out_len);

/**
 * Per-variable RMSE and bias on every pixel of the test split; both arrays
 * must hold `k` values.
 *
 * # Safety
 * `m` and `ds` must come from this library; `rmse` and `bias` must point to `k` doubles.
 */
StrumplStatus strumpl_evaluate(const StrumplModel *m,
                               const StrumplDataset *ds,
                               double *rmse,
                               double *bias,
                               size_t k);

/**
 * # Safety
 * `m` must be null or come from [`strumpl_train`] or [`strumpl_model_load`].
 */
void strumpl_model_free(StrumplModel *m);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STRUMPL_H */
