#ifndef DTTN_H
#define DTTN_H

/* Generated by cbindgen from the dttn-ffi crate; edit the Rust source instead. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Anything but `Ok` leaves a message
 * readable through [`dttn_last_error`].
 */
typedef enum DttnStatus {
  /**
   * The call succeeded.
   */
  DTTN_STATUS_OK = 0,
  /**
   * A pointer was null or a size did not match the model geometry.
   */
  DTTN_STATUS_INVALID_ARGUMENT = 1,
  /**
   * The configuration text was rejected.
   */
  DTTN_STATUS_CONFIG = 2,
  /**
   * The file could not be read.
   */
  DTTN_STATUS_IO = 3,
  /**
   * The file was read but its contents did not decode.
   */
  DTTN_STATUS_FORMAT = 4,
  /**
   * Arithmetic produced a non-finite or singular result.
   */
  DTTN_STATUS_NUMERIC = 5,
  /**
   * The call is not valid in the model's current state.
   */
  DTTN_STATUS_STATE = 6,
  /**
   * An internal invariant failed.
   */
  DTTN_STATUS_INTERNAL = 7,
} DttnStatus;

/**
 * Opaque model handle; create with `dttn_model_from_config` or
 * `dttn_model_open`, release with `dttn_model_free`.
 */
typedef struct DttnModel DttnModel;

/**
 * Shape and size summary for a loaded model.
 */
typedef struct DttnModelInfo {
  /**
   * Trained parameter count.
   */
  uint64_t trainable_params;
  /**
   * Persisted parameter count including normalization statistics.
   */
  uint64_t stored_params;
  uint32_t img_channels;
  uint32_t img_height;
  uint32_t img_width;
  uint32_t classes;
  /**
   * Interaction blocks across all stages.
   */
  uint32_t blocks;
  /**
   * True once `dttn_model_fold` has absorbed the normalizations.
   */
  bool folded;
} DttnModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * ABI revision of this header; bumped on any incompatible change.
 */
uint32_t dttn_api_version(void);

/**
 * Message for the most recent failure on the calling thread, empty if the
 * last call succeeded. The pointer stays valid until the next failing
 * dttn call on the same thread.
 */
const char *dttn_last_error(void);

/**
 * Builds a freshly initialized model from configuration text: `key = value`
 * lines using the same keys as the command-line tool, empty text for the
 * defaults.
 *
 * # Safety
 * `config_text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DttnStatus dttn_model_from_config(const char *config_text, struct DttnModel **out);

/**
 * Opens a checkpoint written by the trainer and restores its model. The
 * arithmetic width recorded in the file decides the in-memory width.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DttnStatus dttn_model_open(const char *path, struct DttnModel **out);

/**
 * Releases a model handle; a null pointer is ignored.
 *
 * # Safety
 * `model` must have come from a dttn constructor and not been freed.
 */
void dttn_model_free(struct DttnModel *model);

/**
 * Fills `out` with the model's geometry and parameter counts.
 *
 * # Safety
 * Both pointers must be valid.
 */
enum DttnStatus dttn_model_info(const struct DttnModel *model, struct DttnModelInfo *out);

/**
 * Absorbs normalizations and residual gains into the surrounding weights.
 * Predictions are unchanged up to rounding; the model can no longer train.
 *
 * # Safety
 * `model` must be a valid handle.
 */
enum DttnStatus dttn_model_fold(struct DttnModel *model);

/**
 * Runs the model on `batch` images packed channel-major into `pixels` and
 * writes `batch * classes` raw scores into `logits`.
 *
 * # Safety
 * `pixels` must hold `pixel_count` readable floats and `logits`
 * `logit_count` writable floats.
 */
enum DttnStatus dttn_model_logits(const struct DttnModel *model,
                                  const float *pixels,
                                  size_t pixel_count,
                                  size_t batch,
                                  float *logits,
                                  size_t logit_count);

/**
 * Runs the model and writes the winning class per image into `labels`;
 * ties resolve to the lowest class index.
 *
 * # Safety
 * `pixels` must hold `pixel_count` readable floats and `labels`
 * `label_count` writable entries.
 */
enum DttnStatus dttn_model_predict(const struct DttnModel *model,
                                   const float *pixels,
                                   size_t pixel_count,
                                   size_t batch,
                                   uint32_t *labels,
                                   size_t label_count);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* DTTN_H */
