#ifndef HQM_H
#define HQM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum HqmStatus {
  HQM_STATUS_OK = 0,
  HQM_STATUS_NULL_POINTER = 1,
  HQM_STATUS_INVALID_ARGUMENT = 2,
  HQM_STATUS_CONFIG = 3,
  HQM_STATUS_SHAPE = 4,
  HQM_STATUS_CONTRACT = 5,
  HQM_STATUS_SAMPLING = 6,
  HQM_STATUS_FORMAT = 7,
  HQM_STATUS_NUMERIC = 8,
  HQM_STATUS_IO = 9,
  HQM_STATUS_PANIC = 10,
} HqmStatus;

/**
 * A loaded checkpoint.
 */
typedef struct HqmModel HqmModel;

/**
 * Center-size box in normalized image coordinates.
 */
typedef struct HqmBox {
  double cx;
  double cy;
  double w;
  double h;
} HqmBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null if none failed.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *hqm_last_error_message(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *hqm_version(void);

/**
 * # Safety
 * `a`, `b` and `out` must be valid pointers or null.
 */
enum HqmStatus hqm_box_iou(const struct HqmBox *a, const struct HqmBox *b, double *out);

/**
 * # Safety
 * `a`, `b` and `out` must be valid pointers or null.
 */
enum HqmStatus hqm_box_giou(const struct HqmBox *a, const struct HqmBox *b, double *out);

/**
 * Draws a box whose IoU with `gt` lies in `[iou_lo, iou_hi]`, using a
 * generator seeded with `seed`. Fails with `Sampling` after `max_attempts`.
 *
 * # Safety
 * `gt` and `out` must be valid pointers or null.
 */
enum HqmStatus hqm_shift_box(const struct HqmBox *gt,
                             double iou_lo,
                             double iou_hi,
                             size_t max_attempts,
                             uint64_t seed,
                             struct HqmBox *out);

/**
 * Minimum-cost assignment of `targets` columns to distinct `queries` rows.
 *
 * `cost` is row-major `queries × targets` with `targets <= queries`.
 * `out_query_for_target[t]` receives the query assigned to target `t`.
 *
 * # Safety
 * `cost` must point to `queries * targets` values and
 * `out_query_for_target` to `targets` writable slots.
 */
enum HqmStatus hqm_hungarian(const double *cost,
                             size_t queries,
                             size_t targets,
                             size_t *out_query_for_target,
                             double *out_total_cost);

/**
 * Zeroes a random `gamma` share of the `k` positions where `reference` is
 * largest, writing the masked copy of `attention` to `out`. The other
 * positions are copied bit for bit.
 *
 * # Safety
 * `attention`, `reference` and `out` must each hold `len` values.
 */
enum HqmStatus hqm_amm_mask(const double *attention,
                            const double *reference,
                            size_t len,
                            size_t k,
                            double gamma,
                            uint64_t seed,
                            double *out);

/**
 * Loads a checkpoint manifest written by `hqm train`.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum HqmStatus hqm_model_load(const char *path, struct HqmModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`hqm_model_load`] and not be used afterwards.
 */
void hqm_model_free(struct HqmModel *model);

/**
 * Mean average precision of the model on a dataset file, with the default
 * evaluation settings.
 *
 * # Safety
 * `model` must be a live handle, `dataset_path` a nul-terminated string.
 */
enum HqmStatus hqm_model_evaluate(const struct HqmModel *model,
                                  const char *dataset_path,
                                  double *out_map);

/**
 * Detections for one scene given as JSON, returned as a JSON array.
 * Release the result with [`hqm_string_free`].
 *
 * # Safety
 * `model` must be a live handle, `scene_json` a nul-terminated string and
 * `out_json` a valid pointer.
 */
enum HqmStatus hqm_model_predict_json(const struct HqmModel *model,
                                      const char *scene_json,
                                      char **out_json);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void hqm_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HQM_H */
