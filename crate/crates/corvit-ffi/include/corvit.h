#ifndef CORVIT_H
#define CORVIT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible entry point.
 */
typedef enum CorvitStatus {
  /**
   * The call succeeded.
   */
  CORVIT_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  CORVIT_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  CORVIT_STATUS_INVALID_UTF8 = 2,
  /**
   * The operation failed; details via `corvit_last_error_message`.
   */
  CORVIT_STATUS_RUNTIME = 3,
  /**
   * The library caught a panic; details via `corvit_last_error_message`.
   */
  CORVIT_STATUS_PANIC = 4,
} CorvitStatus;

/**
 * Opaque handle to a loaded model. Create with [`corvit_model_load`],
 * destroy with [`corvit_model_free`]. A handle must not be used from two
 * threads at once.
 */
typedef struct CorvitModel CorvitModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Most recent failure message on this thread. The pointer stays valid
 * until the next corvit call on the same thread; never free it.
 */
const char *corvit_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *corvit_version(void);

/**
 * Load a model checkpoint from `path` (NUL-terminated UTF-8) into
 * `*out_model`. On success the caller owns the handle and must release it
 * with [`corvit_model_free`].
 *
 * # Safety
 *
 * `path` must be null or point to a NUL-terminated string; `out_model`
 * must be null or point to writable storage for one pointer.
 */
enum CorvitStatus corvit_model_load(const char *path, struct CorvitModel **out_model);

/**
 * Release a handle obtained from [`corvit_model_load`]. Passing null is a
 * no-op.
 *
 * # Safety
 *
 * `model` must be null or a handle from [`corvit_model_load`] that has not
 * been freed already.
 */
void corvit_model_free(struct CorvitModel *model);

/**
 * Number of classes the model's head produces, or 0 if `model` is null.
 *
 * # Safety
 *
 * `model` must be null or a live handle from [`corvit_model_load`].
 */
uintptr_t corvit_num_classes(const struct CorvitModel *model);

/**
 * Saliency grid dimensions (tokens per side of the feature map).
 *
 * # Safety
 *
 * `model` must be null or a live handle; the out-pointers must be null or
 * point to writable `usize` storage.
 */
enum CorvitStatus corvit_saliency_grid(const struct CorvitModel *model,
                                       uintptr_t *out_grid_h,
                                       uintptr_t *out_grid_w);

/**
 * Classify a grayscale image given as `height * width` row-major doubles in
 * [0, 1]. Writes one probability per class (summing to 1) into `out_probs`,
 * which must hold [`corvit_num_classes`] doubles.
 *
 * # Safety
 *
 * `model` must be null or a live handle used by one thread at a time;
 * `pixels` must be null or `height * width` readable doubles; `out_probs`
 * must be null or writable for the class count.
 */
enum CorvitStatus corvit_classify(struct CorvitModel *model,
                                  const double *pixels,
                                  uintptr_t height,
                                  uintptr_t width,
                                  double *out_probs);

/**
 * Relevance-propagation saliency for `target_class` on one grayscale
 * image. Writes the min-max-normalized `grid_h * grid_w` map (row-major)
 * into `out_map`, sized per [`corvit_saliency_grid`].
 *
 * # Safety
 *
 * `model` must be null or a live handle used by one thread at a time;
 * `pixels` must be null or `height * width` readable doubles; `out_map`
 * must be null or writable for the saliency grid size.
 */
enum CorvitStatus corvit_saliency(struct CorvitModel *model,
                                  const double *pixels,
                                  uintptr_t height,
                                  uintptr_t width,
                                  uintptr_t target_class,
                                  double *out_map);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CORVIT_H */
