#ifndef SELFGNN_H
#define SELFGNN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum SgStatus {
  SG_STATUS_OK = 0,
  SG_STATUS_NULL_POINTER = 1,
  SG_STATUS_INVALID_ARGUMENT = 2,
  SG_STATUS_NOT_FOUND = 3,
  SG_STATUS_FORMAT = 4,
  SG_STATUS_IO = 5,
  SG_STATUS_RUNTIME = 6,
  SG_STATUS_PANIC = 7,
} SgStatus;

/**
 * Opaque handle to a loaded model and its dataset.
 */
typedef struct SgModel SgModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads `checkpoint` and rebuilds the dataset it was trained on from the
 * JSON run configuration at `config` (as echoed by the CLI). A null
 * `config` uses the built-in defaults. On success `*out` owns a handle to
 * release with [`sg_model_free`].
 *
 * # Safety
 * `checkpoint` and `config` must be null or NUL-terminated strings; `out`
 * must be a valid pointer.
 */
enum SgStatus sg_model_open(const char *checkpoint, const char *config, struct SgModel **out);

/**
 * Releases a handle from [`sg_model_open`]. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void sg_model_free(struct SgModel *model);

/**
 * Number of users and items the model covers.
 *
 * # Safety
 * `model` must be a live handle; `users` and `items` valid pointers.
 */
enum SgStatus sg_model_counts(const struct SgModel *model, size_t *users, size_t *items);

/**
 * Preference score of `user` for `item`.
 *
 * # Safety
 * `model` must be a live handle; `out` a valid pointer.
 */
enum SgStatus sg_model_score(const struct SgModel *model, size_t user, size_t item, double *out);

/**
 * Writes the `k` highest-scoring items for `user` (ties to the lower id)
 * into `items_out` and `scores_out`, both of capacity `k`, and their
 * count into `*written`. With `exclude_train`, items the user interacted
 * with in training are skipped.
 *
 * # Safety
 * `model` must be a live handle; the output arrays must hold `k` elements.
 */
enum SgStatus sg_model_top_k(const struct SgModel *model,
                             size_t user,
                             size_t k,
                             bool exclude_train,
                             size_t *items_out,
                             double *scores_out,
                             size_t *written);

/**
 * HR@n and NDCG@n over the test users of the model's split.
 *
 * # Safety
 * `model` must be a live handle; `hr` and `ndcg` valid pointers.
 */
enum SgStatus sg_model_evaluate(const struct SgModel *model, size_t n, double *hr, double *ndcg);

/**
 * Message of the last failed call on this thread, or an empty string.
 * The pointer stays valid until the next failing call on the thread.
 */
const char *sg_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sg_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SELFGNN_H */
