#ifndef PORTRAIT_FIELD_H
#define PORTRAIT_FIELD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PfStatus {
  PF_STATUS_OK = 0,
  PF_STATUS_NULL_POINTER = 1,
  PF_STATUS_INVALID_ARGUMENT = 2,
  PF_STATUS_IO = 3,
  PF_STATUS_FORMAT = 4,
  PF_STATUS_BUFFER_TOO_SMALL = 5,
  PF_STATUS_INTERNAL = 6,
  PF_STATUS_PANIC = 7,
} PfStatus;

/**
 * A loaded dataset directory.
 */
typedef struct PfDataset PfDataset;

/**
 * A loaded checkpoint.
 */
typedef struct PfModel PfModel;

typedef struct PfDatasetInfo {
  size_t width;
  size_t height;
  size_t frames;
  size_t train_frames;
  size_t test_frames;
  size_t audio_frames;
  size_t logit_dim;
} PfDatasetInfo;

typedef struct PfModelInfo {
  size_t audio_dim;
  size_t code_dim;
  size_t logit_dim;
  size_t max_samples;
  bool prune;
  bool head_trained;
  bool lips_trained;
  bool torso_trained;
  double beta;
} PfModelInfo;

typedef struct PfEvalSummary {
  size_t frames;
  double mean_psnr;
  double mean_ssim;
  /**
   * NaN when undefined.
   */
  double mouth_correlation;
  /**
   * NaN when the dataset has no eye rectangle.
   */
  double eye_spearman;
  double dynamic_ratio;
  double samples_per_ray;
} PfEvalSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *pf_version(void);

/**
 * Message of the last failure on this thread, or null. Valid until the next
 * failing call on the same thread.
 */
const char *pf_last_error(void);

/**
 * Static description of a status code.
 */
const char *pf_status_name(enum PfStatus status);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum PfStatus pf_dataset_open(const char *path, struct PfDataset **out);

/**
 * # Safety
 * `ds` must come from [`pf_dataset_open`] and not be used afterwards. Null is
 * accepted.
 */
void pf_dataset_free(struct PfDataset *ds);

/**
 * # Safety
 * `ds` must be a live handle and `out` writable.
 */
enum PfStatus pf_dataset_info(const struct PfDataset *ds, struct PfDatasetInfo *out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum PfStatus pf_model_open(const char *path, struct PfModel **out);

/**
 * # Safety
 * `model` must come from [`pf_model_open`] and not be used afterwards. Null
 * is accepted.
 */
void pf_model_free(struct PfModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum PfStatus pf_model_info(const struct PfModel *model, struct PfModelInfo *out);

/**
 * Encodes a `frames × logit_dim` row-major logits track into one
 * `code_dim` code per frame with momentum `beta` (negative: the model's
 * configured value), written row-major into `out`.
 *
 * # Safety
 * `logits` must hold `frames · logit_dim` floats and `out` `out_len` floats.
 */
enum PfStatus pf_audio_encode(const struct PfModel *model,
                              const float *logits,
                              size_t frames,
                              size_t logit_dim,
                              double beta,
                              float *out,
                              size_t out_len);

/**
 * Renders dataset frame `frame` into `out` (`width · height · 3` floats).
 * `code` is that frame's audio code (`code_dim` floats, see
 * [`pf_audio_encode`]); when null it is computed from the dataset's track.
 * `eye_ratio` overrides the frame's eye value unless it is NaN.
 *
 * # Safety
 * Handles must be live; `code` null or `code_dim` floats; `out` `out_len`
 * floats.
 */
enum PfStatus pf_render_frame(const struct PfModel *model,
                              const struct PfDataset *ds,
                              size_t frame,
                              const float *code,
                              float eye_ratio,
                              float *out,
                              size_t out_len);

/**
 * Scores the model on the dataset's test split.
 *
 * # Safety
 * Handles must be live and `out` writable.
 */
enum PfStatus pf_evaluate(const struct PfModel *model,
                          const struct PfDataset *ds,
                          struct PfEvalSummary *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PORTRAIT_FIELD_H */
