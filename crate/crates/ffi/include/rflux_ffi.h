#ifndef RFLUX_FFI_H
#define RFLUX_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RfluxInit {
  /**
   * All weights random.
   */
  RFLUX_INIT_DENSE = 0,
  /**
   * Modulation and output head zeroed; the model starts as the identity.
   */
  RFLUX_INIT_ADALN_ZERO = 1,
} RfluxInit;

typedef enum RfluxStatus {
  RFLUX_STATUS_OK = 0,
  RFLUX_STATUS_NULL_POINTER = 1,
  RFLUX_STATUS_INVALID_ARGUMENT = 2,
  RFLUX_STATUS_IO = 3,
  RFLUX_STATUS_NUMERIC = 4,
  RFLUX_STATUS_FORMAT = 5,
  RFLUX_STATUS_BUFFER_TOO_SMALL = 6,
  RFLUX_STATUS_PANIC = 7,
} RfluxStatus;

/**
 * Opaque model handle.
 */
typedef struct RfluxModel RfluxModel;

/**
 * Sampling request. `prompt` must be NUL-terminated UTF-8.
 */
typedef struct RfluxSampleParams {
  const char *prompt;
  size_t width;
  size_t height;
  size_t steps;
  double guidance;
  uint64_t seed;
} RfluxSampleParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Defaults matching the command-line `sample` subcommand, with an empty
 * prompt.
 */
struct RfluxSampleParams rflux_sample_params_default(void);

/**
 * Static NUL-terminated version string.
 */
const char *rflux_version(void);

/**
 * Copies the calling thread's last error message into `buf` (always
 * NUL-terminated when `len > 0`) and returns the full message length
 * excluding the terminator.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t rflux_last_error_message(char *buf, size_t len);

/**
 * Allocates a model with seeded weights for `preset` ("toy" or "tiny").
 *
 * # Safety
 * `preset` must be a NUL-terminated string; `out` must be writable.
 */
enum RfluxStatus rflux_model_new(const char *preset,
                                 enum RfluxInit init,
                                 uint64_t seed,
                                 struct RfluxModel **out);

/**
 * Loads a model for `preset` from a weight container written by
 * [`rflux_model_save`].
 *
 * # Safety
 * `preset` and `path` must be NUL-terminated strings; `out` must be
 * writable.
 */
enum RfluxStatus rflux_model_load(const char *preset, const char *path, struct RfluxModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from this library not yet freed.
 */
void rflux_model_free(struct RfluxModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out_count` must be writable.
 */
enum RfluxStatus rflux_model_param_count(const struct RfluxModel *model, uint64_t *out_count);

/**
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
enum RfluxStatus rflux_model_save(const struct RfluxModel *model, const char *path);

/**
 * Parameter count of any preset, computed from its shape without
 * allocating weights.
 *
 * # Safety
 * `preset` must be a NUL-terminated string; `out_count` must be writable.
 */
enum RfluxStatus rflux_preset_param_count(const char *preset, uint64_t *out_count);

/**
 * Samples an image into `buf` as packed row-major RGB bytes.
 *
 * `*out_written` always receives the required size (`width * height * 3`).
 * If `buf` is null or `len` is smaller, nothing is sampled and
 * `RFLUX_STATUS_BUFFER_TOO_SMALL` is returned.
 *
 * # Safety
 * `model` must be a live handle, `params` readable, `buf` null or valid
 * for `len` bytes, `out_written` writable.
 */
enum RfluxStatus rflux_sample_rgb(const struct RfluxModel *model,
                                  const struct RfluxSampleParams *params,
                                  uint8_t *buf,
                                  size_t len,
                                  size_t *out_written);

/**
 * Samples and writes `path` (binary PPM) plus `path.manifest`.
 * `out_hash` may be null; otherwise it receives the FNV-1a hash of the
 * PPM bytes.
 *
 * # Safety
 * `model` must be a live handle, `params` readable, `path` a
 * NUL-terminated string, `out_hash` null or writable.
 */
enum RfluxStatus rflux_sample_to_file(const struct RfluxModel *model,
                                      const struct RfluxSampleParams *params,
                                      const char *path,
                                      uint64_t *out_hash);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RFLUX_FFI_H */
