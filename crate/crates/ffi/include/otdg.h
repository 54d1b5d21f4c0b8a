#ifndef OTDG_H
#define OTDG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum OtdgStatus {
  OTDG_STATUS_OK = 0,
  OTDG_STATUS_NULL_POINTER = 1,
  OTDG_STATUS_INVALID_ARGUMENT = 2,
  OTDG_STATUS_CONFIG = 3,
  OTDG_STATUS_PARSE = 4,
  OTDG_STATUS_NUMERICAL = 5,
  OTDG_STATUS_IO = 6,
  /**
   * A Rust panic was caught at the boundary.
   */
  OTDG_STATUS_INTERNAL = 7,
} OtdgStatus;

/**
 * A weighted point cloud.
 */
typedef struct OtdgCloud OtdgCloud;

/**
 * A trained classifier loaded from a model file.
 */
typedef struct OtdgModel OtdgModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *otdg_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *otdg_version(void);

/**
 * Builds a cloud from `n` row-major points of dimension `d`. `weights` may
 * be null for uniform weights; otherwise it holds `n` non-negative values
 * that are normalized.
 *
 * # Safety
 * `points` must hold `n*d` doubles, `weights` (if not null) `n` doubles,
 * and `out` must be writable.
 */
enum OtdgStatus otdg_cloud_new(const double *points,
                               size_t n,
                               size_t d,
                               const double *weights,
                               struct OtdgCloud **out);

/**
 * Reads an `x1,...,xd,weight` CSV file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum OtdgStatus otdg_cloud_load(const char *path, struct OtdgCloud **out);

/**
 * # Safety
 * `cloud` must come from this library and not be used afterwards.
 */
void otdg_cloud_free(struct OtdgCloud *cloud);

/**
 * Number of points, or 0 for a null handle.
 *
 * # Safety
 * `cloud` must be null or a live handle.
 */
size_t otdg_cloud_len(const struct OtdgCloud *cloud);

/**
 * Point dimension, or 0 for a null handle.
 *
 * # Safety
 * `cloud` must be null or a live handle.
 */
size_t otdg_cloud_dim(const struct OtdgCloud *cloud);

/**
 * Copies the row-major points into `buf` (`len*dim` doubles) and, when
 * `weights` is not null, the weights into it (`len` doubles).
 *
 * # Safety
 * `buf` and `weights` must have room for the copied values.
 */
enum OtdgStatus otdg_cloud_copy(const struct OtdgCloud *cloud, double *buf, double *weights);

/**
 * Debiased Sinkhorn divergence at regularization `eps`.
 *
 * # Safety
 * `a`, `b` must be live handles and `out` writable.
 */
enum OtdgStatus otdg_sinkhorn_divergence(const struct OtdgCloud *a,
                                         const struct OtdgCloud *b,
                                         double eps,
                                         double *out);

/**
 * Free-support barycenter with `k` support points (0 picks the largest
 * input size). `weights` may be null for equal weights.
 *
 * # Safety
 * `clouds` must hold `count` live handles, `weights` (if not null) `count`
 * doubles, and `out` must be writable.
 */
enum OtdgStatus otdg_barycenter(const struct OtdgCloud *const *clouds,
                                size_t count,
                                const double *weights,
                                size_t k,
                                double eps,
                                uint64_t seed,
                                struct OtdgCloud **out);

/**
 * Loads a model file written by `otdg train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum OtdgStatus otdg_model_load(const char *path, struct OtdgModel **out);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void otdg_model_free(struct OtdgModel *model);

/**
 * Input dimension expected by the model, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t otdg_model_input_dim(const struct OtdgModel *model);

/**
 * Predicted class of each of `n` row-major inputs.
 *
 * # Safety
 * `x` must hold `n*input_dim` doubles and `labels` room for `n` values.
 */
enum OtdgStatus otdg_model_predict(const struct OtdgModel *model,
                                   const double *x,
                                   size_t n,
                                   uint32_t *labels);

/**
 * Runs `train`, `loo`, `ablate`, `bounds`, `ot sinkhorn` or
 * `ot barycenter` on an in-memory JSON config, writing artifacts to
 * `out_dir` (null keeps the config's choice). `exit_code` receives the
 * code the command-line tool would return.
 *
 * # Safety
 * String arguments must be NUL-terminated (or null where allowed) and
 * `exit_code` writable.
 */
enum OtdgStatus otdg_run_json(const char *command,
                              const char *config_json,
                              const char *out_dir,
                              int32_t *exit_code);

/**
 * Runs the bound sweeps for a JSON `SweepConfig` object and returns the
 * outcome as a newly allocated JSON string (free with
 * [`otdg_string_free`]).
 *
 * # Safety
 * `sweep_json` must be NUL-terminated and `out` writable.
 */
enum OtdgStatus otdg_bounds_json(const char *sweep_json, char **out);

/**
 * # Safety
 * `s` must be null or a string returned by this library.
 */
void otdg_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OTDG_H */
