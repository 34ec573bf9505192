#ifndef SMALLAUG_H
#define SMALLAUG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SmallaugStatus {
  SMALLAUG_STATUS_OK = 0,
  SMALLAUG_STATUS_NULL_POINTER = 1,
  SMALLAUG_STATUS_INVALID_ARGUMENT = 2,
  SMALLAUG_STATUS_IO = 3,
  SMALLAUG_STATUS_PARSE = 4,
  SMALLAUG_STATUS_OUT_OF_RANGE = 5,
  SMALLAUG_STATUS_PANIC = 6,
} SmallaugStatus;

typedef struct SmallaugDataset SmallaugDataset;

/**
 * An RGB image with its annotations.
 */
typedef struct SmallaugImage SmallaugImage;

typedef struct SmallaugPolicySet SmallaugPolicySet;

/**
 * Ask/tell TPE over the augmentation policy space.
 */
typedef struct SmallaugTpe SmallaugTpe;

typedef struct SmallaugBox {
  double x;
  double y;
  double w;
  double h;
} SmallaugBox;

/**
 * One instance as seen from C. `category` stays valid until the owning
 * image is modified or freed. `origin` is 0 for original, 1 for pasted.
 */
typedef struct SmallaugInstance {
  struct SmallaugBox bbox;
  const char *category;
  bool difficult;
  uint32_t origin;
} SmallaugInstance;

/**
 * `op`: 0 single object, 1 multiple objects, 2 all objects.
 */
typedef struct SmallaugPolicy {
  uint32_t op;
  double p;
  uint32_t m;
} SmallaugPolicy;

typedef struct SmallaugAugmentStats {
  bool applied;
  uint64_t selected;
  uint64_t pasted;
  uint64_t skipped;
} SmallaugAugmentStats;

/**
 * AP values; NaN where a bucket has no ground truth.
 */
typedef struct SmallaugEvalSummary {
  double map;
  double map_s;
  double map_m;
  double map_l;
  uint64_t n_small;
  uint64_t n_medium;
  uint64_t n_large;
} SmallaugEvalSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread, or null. The pointer
 * stays valid until the next smallaug call on the same thread.
 */
const char *smallaug_last_error(void);

/**
 * Size bucket of a box: 0 small, 1 medium, 2 large, -1 for an invalid box.
 */
int32_t smallaug_classify_size(struct SmallaugBox b);

double smallaug_iou(struct SmallaugBox a, struct SmallaugBox b);

/**
 * Create an image from `width * height * 3` RGB bytes (row-major). `pixels`
 * may be null to start from a black image.
 *
 * # Safety
 * `id` must be a valid C string; `pixels`, if non-null, must point to
 * `pixels_len` readable bytes; `out` must be valid for writes.
 */
enum SmallaugStatus smallaug_image_new(const char *id,
                                       uint32_t width,
                                       uint32_t height,
                                       const uint8_t *pixels,
                                       uintptr_t pixels_len,
                                       struct SmallaugImage **out);

/**
 * # Safety
 * `image` must be null or a handle from this library that is not used again.
 */
void smallaug_image_free(struct SmallaugImage *image);

/**
 * Append an annotation. The box must lie inside the image.
 *
 * # Safety
 * `image` must be a live handle and `category` a valid C string.
 */
enum SmallaugStatus smallaug_image_add_instance(struct SmallaugImage *image,
                                                struct SmallaugBox bbox,
                                                const char *category,
                                                bool difficult);

/**
 * Number of annotations, or 0 for a null handle.
 *
 * # Safety
 * `image` must be null or a live handle.
 */
uintptr_t smallaug_image_instance_count(const struct SmallaugImage *image);

/**
 * # Safety
 * `image` must be a live handle and `out` valid for writes.
 */
enum SmallaugStatus smallaug_image_instance(const struct SmallaugImage *image,
                                            uintptr_t index,
                                            struct SmallaugInstance *out);

/**
 * Borrow the RGB bytes; `out_len` receives their count. Returns null for a
 * null handle. The buffer lives as long as the image handle.
 *
 * # Safety
 * `image` must be null or a live handle; `out_len` must be null or valid
 * for writes.
 */
const uint8_t *smallaug_image_pixels(const struct SmallaugImage *image, uintptr_t *out_len);

/**
 * Apply one policy to `image`, writing a new image handle to `out`. The
 * result depends only on the inputs and `seed`.
 *
 * # Safety
 * `image` must be a live handle; `policy` and `out` must be valid pointers;
 * `stats` may be null.
 */
enum SmallaugStatus smallaug_apply_policy(const struct SmallaugImage *image,
                                          const struct SmallaugPolicy *policy,
                                          uint64_t seed,
                                          uint32_t max_attempts,
                                          uint32_t margin,
                                          struct SmallaugImage **out,
                                          struct SmallaugAugmentStats *stats);

/**
 * Parse a policy file (JSON array of `{"op", "p", "m"}`).
 *
 * # Safety
 * `json` must be a valid C string and `out` valid for writes.
 */
enum SmallaugStatus smallaug_policy_set_parse(const char *json, struct SmallaugPolicySet **out);

/**
 * # Safety
 * `set` must be null or a live handle.
 */
uintptr_t smallaug_policy_set_len(const struct SmallaugPolicySet *set);

/**
 * # Safety
 * `set` must be a live handle and `out` valid for writes.
 */
enum SmallaugStatus smallaug_policy_set_get(const struct SmallaugPolicySet *set,
                                            uintptr_t index,
                                            struct SmallaugPolicy *out);

/**
 * # Safety
 * `set` must be null or a handle from this library that is not used again.
 */
void smallaug_policy_set_free(struct SmallaugPolicySet *set);

/**
 * Draw one policy from `set` uniformly and apply it.
 *
 * # Safety
 * `image` and `set` must be live handles; `out` must be valid for writes;
 * `stats` may be null.
 */
enum SmallaugStatus smallaug_apply_policy_set(const struct SmallaugImage *image,
                                              const struct SmallaugPolicySet *set,
                                              uint64_t seed,
                                              uint32_t max_attempts,
                                              uint32_t margin,
                                              struct SmallaugImage **out,
                                              struct SmallaugAugmentStats *stats);

/**
 * Load a dataset manifest (`manifest.json` plus COCO annotations).
 *
 * # Safety
 * `path` must be a valid C string and `out` valid for writes.
 */
enum SmallaugStatus smallaug_dataset_load(const char *path, struct SmallaugDataset **out);

/**
 * # Safety
 * `dataset` must be null or a live handle.
 */
uintptr_t smallaug_dataset_len(const struct SmallaugDataset *dataset);

/**
 * Decode image `index` of the dataset into a new image handle.
 *
 * # Safety
 * `dataset` must be a live handle and `out` valid for writes.
 */
enum SmallaugStatus smallaug_dataset_image(const struct SmallaugDataset *dataset,
                                           uintptr_t index,
                                           struct SmallaugImage **out);

/**
 * # Safety
 * `dataset` must be null or a handle from this library that is not used again.
 */
void smallaug_dataset_free(struct SmallaugDataset *dataset);

/**
 * Evaluate a detections JSON file against a ground-truth manifest.
 * `interp_points` is 101 or 11.
 *
 * # Safety
 * `gt_manifest` and `dets_path` must be valid C strings; `out` valid for writes.
 */
enum SmallaugStatus smallaug_evaluate_files(const char *gt_manifest,
                                            const char *dets_path,
                                            double iou_thresh,
                                            uint32_t interp_points,
                                            bool include_difficult,
                                            struct SmallaugEvalSummary *out);

/**
 * New optimizer over (op, p, m) with default settings.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum SmallaugStatus smallaug_tpe_new(uint64_t seed, struct SmallaugTpe **out);

/**
 * Propose the next policy to evaluate.
 *
 * # Safety
 * `tpe` must be a live handle and `out` valid for writes.
 */
enum SmallaugStatus smallaug_tpe_ask(struct SmallaugTpe *tpe, struct SmallaugPolicy *out);

/**
 * Record the loss observed for `policy`. The loss must be finite.
 *
 * # Safety
 * `tpe` must be a live handle and `policy` a valid pointer.
 */
enum SmallaugStatus smallaug_tpe_tell(struct SmallaugTpe *tpe,
                                      const struct SmallaugPolicy *policy,
                                      double loss);

/**
 * Number of trials told so far, or 0 for a null handle.
 *
 * # Safety
 * `tpe` must be null or a live handle.
 */
uintptr_t smallaug_tpe_trial_count(const struct SmallaugTpe *tpe);

/**
 * Lowest-loss trial so far (earliest on ties).
 *
 * # Safety
 * `tpe` must be a live handle; `out_policy` and `out_loss` valid for writes.
 */
enum SmallaugStatus smallaug_tpe_best(const struct SmallaugTpe *tpe,
                                      struct SmallaugPolicy *out_policy,
                                      double *out_loss);

/**
 * # Safety
 * `tpe` must be null or a handle from this library that is not used again.
 */
void smallaug_tpe_free(struct SmallaugTpe *tpe);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SMALLAUG_H */
