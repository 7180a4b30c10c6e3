#ifndef PANDA_H
#define PANDA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum PandaStatus {
  PANDA_STATUS_OK = 0,
  /**
   * Null pointer, bad shape, non-UTF-8 string or similar caller error.
   */
  PANDA_STATUS_INVALID_ARGUMENT = 1,
  /**
   * A non-finite value was produced or supplied.
   */
  PANDA_STATUS_NUMERIC = 2,
  /**
   * A file or buffer is malformed.
   */
  PANDA_STATUS_FORMAT = 3,
  PANDA_STATUS_UNSUPPORTED_VERSION = 4,
  PANDA_STATUS_CONFIG = 5,
  PANDA_STATUS_MISSING_ARTIFACT = 6,
  PANDA_STATUS_IO = 7,
  PANDA_STATUS_INSUFFICIENT_DATA = 8,
  /**
   * The integrator stopped before the end of the requested span.
   */
  PANDA_STATUS_INTEGRATION_FAILED = 9,
  /**
   * The output buffer is too small; nothing was written.
   */
  PANDA_STATUS_BUFFER_TOO_SMALL = 10,
  /**
   * A Rust panic was caught at the boundary.
   */
  PANDA_STATUS_PANIC = 11,
  PANDA_STATUS_OTHER = 12,
} PandaStatus;

/**
 * Opaque handle to a loaded checkpoint.
 */
typedef struct PandaCheckpoint PandaCheckpoint;

/**
 * Opaque handle to a sampled trajectory.
 */
typedef struct PandaTrajectory PandaTrajectory;

/**
 * Shape of a model loaded from a checkpoint.
 */
typedef struct PandaModelInfo {
  size_t patch_size;
  size_t horizon;
  size_t d_model;
  size_t n_layers;
  size_t n_heads;
  size_t n_params;
  bool channel_attention;
} PandaModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *panda_version(void);

/**
 * Length in bytes of the last error message on this thread, excluding the
 * terminating NUL. Zero after a successful call.
 */
size_t panda_last_error_length(void);

/**
 * Copies the last error message into `buf` (NUL-terminated, truncated to
 * fit). Returns the number of bytes written excluding the NUL.
 *
 * # Safety
 * `buf` must be valid for `len` bytes or null.
 */
size_t panda_last_error_message(char *buf, size_t len);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PandaStatus panda_checkpoint_load(const char *path, struct PandaCheckpoint **out);

/**
 * Parses a checkpoint from an in-memory buffer.
 *
 * # Safety
 * `bytes` must be valid for `len` bytes; `out` must be writable.
 */
enum PandaStatus panda_checkpoint_from_bytes(const uint8_t *bytes,
                                             size_t len,
                                             struct PandaCheckpoint **out);

/**
 * Frees a checkpoint. Null is a no-op.
 *
 * # Safety
 * `ck` must come from a `panda_checkpoint_*` constructor and not be used
 * afterwards.
 */
void panda_checkpoint_free(struct PandaCheckpoint *ck);

/**
 * # Safety
 * `ck` must be a live handle; `info` must be writable.
 */
enum PandaStatus panda_checkpoint_info(const struct PandaCheckpoint *ck,
                                       struct PandaModelInfo *info);

/**
 * Reads a metadata value. Pass a null `buf` with `len` 0 to query the
 * length through `needed`.
 *
 * # Safety
 * `ck` must be live, `key` NUL-terminated, `buf` valid for `len` bytes or
 * null, `needed` writable or null.
 */
enum PandaStatus panda_checkpoint_metadata(const struct PandaCheckpoint *ck,
                                           const char *key,
                                           char *buf,
                                           size_t len,
                                           size_t *needed);

/**
 * Forecasts `horizon` steps for a context of `n_channels` × `n_time`
 * values. `out` receives `n_channels` × `horizon` values.
 *
 * # Safety
 * `context` must hold `n_channels * n_time` values and `out` `out_len`.
 */
enum PandaStatus panda_forecast(const struct PandaCheckpoint *ck,
                                const double *context,
                                size_t n_channels,
                                size_t n_time,
                                double *out,
                                size_t out_len);

/**
 * Reconstructs masked patches. `mask` holds `n_channels` ×
 * (`n_time` / patch size) bytes, nonzero meaning masked; `out` receives
 * `n_channels` × `n_time` values.
 *
 * # Safety
 * Buffers must have the stated lengths.
 */
enum PandaStatus panda_infill(const struct PandaCheckpoint *ck,
                              const double *context,
                              size_t n_channels,
                              size_t n_time,
                              const uint8_t *mask,
                              double *out,
                              size_t out_len);

/**
 * Number of built-in founder systems.
 */
size_t panda_founder_count(void);

/**
 * Name of founder `index`, copied into `buf` as with
 * [`panda_checkpoint_metadata`].
 *
 * # Safety
 * `buf` valid for `len` bytes or null; `needed` writable or null.
 */
enum PandaStatus panda_founder_name(size_t index, char *buf, size_t len, size_t *needed);

/**
 * Integrates a founder system from its default initial condition over
 * `n_points` samples at its native step.
 *
 * # Safety
 * `name` NUL-terminated; `out` writable.
 */
enum PandaStatus panda_founder_trajectory(const char *name,
                                          size_t n_points,
                                          struct PandaTrajectory **out);

/**
 * Frees a trajectory. Null is a no-op.
 *
 * # Safety
 * `tr` must come from a `panda_*_trajectory` constructor.
 */
void panda_trajectory_free(struct PandaTrajectory *tr);

/**
 * # Safety
 * `tr` must be live; the out pointers writable.
 */
enum PandaStatus panda_trajectory_shape(const struct PandaTrajectory *tr,
                                        size_t *n_channels,
                                        size_t *n_time);

/**
 * Copies the trajectory values (channels × time) into `out`.
 *
 * # Safety
 * `out` valid for `out_len` values.
 */
enum PandaStatus panda_trajectory_values(const struct PandaTrajectory *tr,
                                         double *out,
                                         size_t out_len);

/**
 * Grassberger-Procaccia correlation dimension with default settings.
 *
 * # Safety
 * `values` must hold `n_channels * n_time` values; `out` writable.
 */
enum PandaStatus panda_correlation_dimension(const double *values,
                                             size_t n_channels,
                                             size_t n_time,
                                             double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PANDA_H */
