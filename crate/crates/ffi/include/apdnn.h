#ifndef APDNN_H
#define APDNN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum ApdnnStatus {
  APDNN_STATUS_OK = 0,
  APDNN_STATUS_NULL_POINTER = 1,
  APDNN_STATUS_IO = 2,
  APDNN_STATUS_FORMAT = 3,
  APDNN_STATUS_PRECISION_UNAVAILABLE = 4,
  APDNN_STATUS_DIMENSION = 5,
  APDNN_STATUS_INVALID_INPUT = 6,
  APDNN_STATUS_USAGE = 7,
  APDNN_STATUS_BUFFER_TOO_SMALL = 8,
  APDNN_STATUS_PANIC = 9,
  APDNN_STATUS_OTHER = 10,
} ApdnnStatus;

/**
 * Opaque model handle.
 */
typedef struct ApdnnModel ApdnnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Most recent error message on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *apdnn_last_error(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *apdnn_version(void);

/**
 * Loads a packed model file and binds it to its widest integer bit-width.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a writable pointer.
 */
enum ApdnnStatus apdnn_model_load(const char *path, struct ApdnnModel **out);

/**
 * Loads a packed model from memory.
 *
 * # Safety
 * `data` must point to `len` readable bytes and `out` be writable.
 */
enum ApdnnStatus apdnn_model_from_bytes(const uint8_t *data, size_t len, struct ApdnnModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from a load function and not be used afterwards.
 */
void apdnn_model_free(struct ApdnnModel *model);

/**
 * Rebinds the model to `bits` (1..=8). On failure the old binding stays.
 *
 * # Safety
 * `model` must be a live handle with no concurrent users.
 */
enum ApdnnStatus apdnn_model_set_bits(struct ApdnnModel *model, uint8_t bits);

/**
 * Currently bound bit-width, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint8_t apdnn_model_bits(const struct ApdnnModel *model);

/**
 * Writes the per-sample input shape `[C, H, W]`.
 *
 * # Safety
 * `model` must be a live handle and `shape` point to three writable values.
 */
enum ApdnnStatus apdnn_model_input_shape(const struct ApdnnModel *model, size_t *shape);

/**
 * Number of output classes, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t apdnn_model_num_classes(const struct ApdnnModel *model);

/**
 * Lists the bit-widths with BatchNorm statistics (32 is full precision,
 * which a packed model cannot run). `count` always receives the total;
 * the list is written only if it fits in `capacity`.
 *
 * # Safety
 * `model` must be a live handle, `bits` hold `capacity` values, `count` be writable.
 */
enum ApdnnStatus apdnn_model_available_bits(const struct ApdnnModel *model,
                                            uint8_t *bits,
                                            size_t capacity,
                                            size_t *count);

/**
 * Logits for `batch` samples. `input` holds `batch·C·H·W` values in
 * `[0, 1]`, row-major; `logits` receives `batch·classes` values.
 *
 * # Safety
 * Buffers must hold the stated lengths; `model` must be a live handle.
 */
enum ApdnnStatus apdnn_model_infer(const struct ApdnnModel *model,
                                   const float *input,
                                   size_t input_len,
                                   size_t batch,
                                   float *logits,
                                   size_t logits_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* APDNN_H */
