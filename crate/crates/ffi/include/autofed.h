#ifndef AUTOFED_H
#define AUTOFED_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AutofedStatus {
  AUTOFED_STATUS_OK = 0,
  AUTOFED_STATUS_NULL_POINTER = 1,
  AUTOFED_STATUS_INVALID_ARGUMENT = 2,
  AUTOFED_STATUS_CONFIG_ERROR = 3,
  AUTOFED_STATUS_RUNTIME_ERROR = 4,
  // Output buffer too small; the required size was still written.
  AUTOFED_STATUS_BUFFER_TOO_SMALL = 5,
  AUTOFED_STATUS_NOT_FOUND = 6,
  AUTOFED_STATUS_PANIC = 7,
} AutofedStatus;

// Parsed and validated run configuration.
typedef struct AutofedConfig AutofedConfig;

// Results of a finished run.
typedef struct AutofedRun AutofedRun;

// Decoded parameter snapshot.
typedef struct AutofedSnapshot AutofedSnapshot;

typedef struct AutofedMetrics {
  double mae;
  double rmse;
  double mse;
  double mape_percent;
  double masked_fraction;
} AutofedMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the most recent failure on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *autofed_last_error(void);

// Library version as a static NUL-terminated string.
const char *autofed_version(void);

// Loads a TOML run config from `path`. Relative data paths resolve against
// the file's directory and `AUTOFED_SEED` fills a missing seed.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum AutofedStatus autofed_config_load(const char *path, struct AutofedConfig **out);

// Parses config text. Relative paths resolve against `base_dir` (the
// current directory when null). The environment seed is not consulted.
//
// # Safety
// `text` and a non-null `base_dir` must be NUL-terminated; `out` must be
// writable.
enum AutofedStatus autofed_config_parse(const char *text,
                                        const char *base_dir,
                                        struct AutofedConfig **out);

// # Safety
// `config` must be null or a handle from `autofed_config_*` not yet freed.
void autofed_config_free(struct AutofedConfig *config);

// Runs training and evaluation, writing the report and checkpoints to the
// config's output directory.
//
// # Safety
// `config` must be a live config handle; `out` must be writable.
enum AutofedStatus autofed_run(const struct AutofedConfig *config, struct AutofedRun **out);

// Path of the written report; valid while `run` lives.
//
// # Safety
// `run` must be a live run handle.
const char *autofed_run_report_path(const struct AutofedRun *run);

// # Safety
// `run` must be a live run handle.
size_t autofed_run_client_count(const struct AutofedRun *run);

// Test metrics of the client at `index` (run order). `NotFound` when the
// client had no test windows.
//
// # Safety
// `run` must be a live run handle; `client_id`, `nodes` and `metrics` must
// be writable or null.
enum AutofedStatus autofed_run_client_metrics(const struct AutofedRun *run,
                                              size_t index,
                                              size_t *client_id,
                                              size_t *nodes,
                                              struct AutofedMetrics *metrics);

// # Safety
// `run` must be null or a handle from `autofed_run` not yet freed.
void autofed_run_free(struct AutofedRun *run);

// MAE, RMSE, MSE and masked MAPE over `len` paired values. Targets with
// `|y| < mape_threshold` are left out of MAPE.
//
// # Safety
// `prediction` and `target` must point to `len` readable doubles; `out`
// must be writable.
enum AutofedStatus autofed_evaluate(const double *prediction,
                                    const double *target,
                                    size_t len,
                                    double mape_threshold,
                                    struct AutofedMetrics *out);

// Decodes a serialized parameter set (count-prefixed name/shape/f64 records).
//
// # Safety
// `bytes` must point to `len` readable bytes; `out` must be writable.
enum AutofedStatus autofed_snapshot_decode(const uint8_t *bytes,
                                           size_t len,
                                           struct AutofedSnapshot **out);

// Serializes into `buf`. `written` receives the encoded size; when
// `capacity` is too small nothing is copied and `BufferTooSmall` returned,
// so a null `buf` with zero capacity queries the size.
//
// # Safety
// `snapshot` must be live; `buf` must have `capacity` writable bytes;
// `written` must be writable.
enum AutofedStatus autofed_snapshot_encode(const struct AutofedSnapshot *snapshot,
                                           uint8_t *buf,
                                           size_t capacity,
                                           size_t *written);

// Number of named tensors.
//
// # Safety
// `snapshot` must be live.
size_t autofed_snapshot_len(const struct AutofedSnapshot *snapshot);

// Total scalar count over all tensors.
//
// # Safety
// `snapshot` must be live.
size_t autofed_snapshot_numel(const struct AutofedSnapshot *snapshot);

// Name of the tensor at `index` in ascending name order; valid while the
// snapshot lives. Null when out of range.
//
// # Safety
// `snapshot` must be live.
const char *autofed_snapshot_name(const struct AutofedSnapshot *snapshot, size_t index);

// Copies the values of tensor `name` into `values` (row-major). `numel`
// receives the element count; sizing follows `autofed_snapshot_encode`.
//
// # Safety
// `snapshot` must be live; `name` NUL-terminated; `values` must have
// `capacity` writable doubles; `numel` must be writable.
enum AutofedStatus autofed_snapshot_values(const struct AutofedSnapshot *snapshot,
                                           const char *name,
                                           double *values,
                                           size_t capacity,
                                           size_t *numel);

// # Safety
// `snapshot` must be null or a handle from `autofed_snapshot_decode` not
// yet freed.
void autofed_snapshot_free(struct AutofedSnapshot *snapshot);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AUTOFED_H */
