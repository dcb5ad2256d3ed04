#ifndef FLOWGEST_H
#define FLOWGEST_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every function.
 */
typedef enum FgStatus {
  FG_STATUS_OK = 0,
  FG_STATUS_NULL_POINTER = 1,
  FG_STATUS_INVALID_ARGUMENT = 2,
  FG_STATUS_IO = 3,
  FG_STATUS_FORMAT = 4,
  FG_STATUS_COMPUTE = 5,
  FG_STATUS_PANIC = 6,
} FgStatus;

/**
 * A loaded classifier.
 */
typedef struct FgModel FgModel;

/**
 * Dense-flow parameters; obtain defaults from [`fg_flow_params_default`].
 */
typedef struct FgFlowParams {
  double pyramid_scale;
  uint32_t levels;
  uint32_t window_size;
  uint32_t iterations;
  uint32_t poly_n;
  double poly_sigma;
} FgFlowParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *fg_version(void);

/**
 * Message of the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *fg_last_error(void);

struct FgFlowParams fg_flow_params_default(void);

/**
 * Dense flow between two 8-bit grayscale frames of `width * height` bytes.
 * Writes `width * height` values to each of `out_u` and `out_v`.
 * `params` may be null for the defaults.
 *
 * # Safety
 * All non-null pointers must reference buffers of the stated lengths.
 */
enum FgStatus fg_flow_estimate(const uint8_t *prev,
                               const uint8_t *next,
                               size_t width,
                               size_t height,
                               const struct FgFlowParams *params,
                               float *out_u,
                               float *out_v);

/**
 * Quantize `len` flow vectors to 8-bit magnitude (capped at `mag_cap`) and
 * direction codes.
 *
 * # Safety
 * All pointers must reference buffers of `len` elements.
 */
enum FgStatus fg_quantize(const float *u,
                          const float *v,
                          size_t len,
                          float mag_cap,
                          uint8_t *out_mag,
                          uint8_t *out_dir);

/**
 * Average an RGB first-layer kernel `[out_channels, 3, kh, kw]` over its
 * input channels and replicate it to `[out_channels, target_channels, kh, kw]`.
 *
 * # Safety
 * `rgb` holds `out_channels * 3 * kh * kw` floats and `out` has room for
 * `out_channels * target_channels * kh * kw`.
 */
enum FgStatus fg_cross_modality_init(const float *rgb,
                                     size_t out_channels,
                                     size_t kh,
                                     size_t kw,
                                     size_t target_channels,
                                     float *out);

/**
 * Load a checkpoint; on success `*out_model` owns a new handle.
 *
 * # Safety
 * `path` is a NUL-terminated UTF-8 string and `out_model` is writable.
 */
enum FgStatus fg_model_load(const char *path, struct FgModel **out_model);

/**
 * Release a model handle; null is ignored.
 *
 * # Safety
 * `model` came from [`fg_model_load`] and is not used afterwards.
 */
void fg_model_free(struct FgModel *model);

/**
 * Number of output classes, or 0 for a null handle.
 *
 * # Safety
 * `model` is null or a live handle.
 */
size_t fg_model_num_classes(const struct FgModel *model);

/**
 * Number of input channels, or 0 for a null handle.
 *
 * # Safety
 * `model` is null or a live handle.
 */
size_t fg_model_input_channels(const struct FgModel *model);

/**
 * Class probabilities for one chunk laid out `[channels, height, width]`.
 * `out_probs` must hold [`fg_model_num_classes`] doubles.
 *
 * # Safety
 * `model` is a live handle, `chunk` holds `channels * height * width`
 * floats and `out_probs` is large enough.
 */
enum FgStatus fg_model_predict(struct FgModel *model,
                               const float *chunk,
                               size_t height,
                               size_t width,
                               double *out_probs);

/**
 * Clip-level vote over `chunks` probability rows of `classes` entries
 * (row-major): argmax of the mean, ties to the lowest class index. Rows
 * must have one entry per gesture class (15) and sum to 1.
 *
 * # Safety
 * `probs` holds `chunks * classes` doubles; `out_label` is writable.
 */
enum FgStatus fg_vote(const double *probs, size_t chunks, size_t classes, uint32_t *out_label);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLOWGEST_H */
