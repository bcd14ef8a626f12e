#ifndef SGWSOD_H
#define SGWSOD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SgwsodStatus {
  SGWSOD_STATUS_OK = 0,
  SGWSOD_STATUS_NULL_ARGUMENT = 1,
  SGWSOD_STATUS_INVALID_ARGUMENT = 2,
  SGWSOD_STATUS_IO = 3,
  SGWSOD_STATUS_VALIDATION = 4,
  SGWSOD_STATUS_NUMERICAL = 5,
  SGWSOD_STATUS_PANIC = 6,
} SgwsodStatus;

/**
 * Opaque dataset handle.
 */
typedef struct SgwsodDataset SgwsodDataset;

/**
 * Opaque model handle.
 */
typedef struct SgwsodModel SgwsodModel;

/**
 * Training settings mirrored from the library defaults by [`sgwsod_train_config_default`].
 */
typedef struct SgwsodTrainConfig {
  uint32_t epochs;
  double lr_phase1;
  double lr_phase2;
  uint32_t phase_boundary;
  double momentum;
  double lambda1;
  double lambda2;
  double lambda3;
  double sigma;
  uint64_t seed;
  bool disable_seed_losses;
  bool disable_saliency_subnet;
} SgwsodTrainConfig;

typedef struct SgwsodEvalSummary {
  /**
   * Means over classes with defined values; NaN when none is defined.
   */
  double mean_ap;
  double mean_corloc;
  double mean_classification_ap;
} SgwsodEvalSummary;

typedef struct SgwsodBox {
  uint32_t x0;
  uint32_t y0;
  uint32_t x1;
  uint32_t y1;
} SgwsodBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the next call.
 */
const char *sgwsod_last_error(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SgwsodStatus sgwsod_dataset_load(const char *path, struct SgwsodDataset **out);

/**
 * Default synthetic generator settings with the given size and seed. At most
 * `num_classes` objects are planted per image.
 *
 * # Safety
 * `out` must be writable.
 */
enum SgwsodStatus sgwsod_dataset_generate(uint32_t num_images,
                                          uint32_t num_classes,
                                          uint32_t feature_dim,
                                          uint64_t seed,
                                          struct SgwsodDataset **out);

/**
 * # Safety
 * `dataset` must come from this library; `dir` must be a NUL-terminated string.
 */
enum SgwsodStatus sgwsod_dataset_save(const struct SgwsodDataset *dataset, const char *dir);

/**
 * Number of images, or 0 for NULL.
 *
 * # Safety
 * `dataset` must be NULL or come from this library.
 */
size_t sgwsod_dataset_len(const struct SgwsodDataset *dataset);

/**
 * # Safety
 * `dataset` must be NULL or come from this library and not be used afterwards.
 */
void sgwsod_dataset_free(struct SgwsodDataset *dataset);

struct SgwsodTrainConfig sgwsod_train_config_default(void);

/**
 * Fresh model with the default layer widths sized for `dataset`.
 *
 * # Safety
 * `dataset` must come from this library; `out` must be writable.
 */
enum SgwsodStatus sgwsod_model_init(const struct SgwsodDataset *dataset,
                                    uint64_t seed,
                                    struct SgwsodModel **out);

/**
 * Trains a new model on `dataset`. Layer widths: `trunk_widths[0..num_trunk]`
 * and `saliency_hidden`; a NULL `trunk_widths` selects the defaults.
 *
 * # Safety
 * Pointers must be valid; `trunk_widths` must hold `num_trunk` entries when non-NULL.
 */
enum SgwsodStatus sgwsod_train(const struct SgwsodDataset *dataset,
                               const struct SgwsodTrainConfig *config,
                               const uint32_t *trunk_widths,
                               size_t num_trunk,
                               uint32_t saliency_hidden,
                               struct SgwsodModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SgwsodStatus sgwsod_model_load(const char *path, struct SgwsodModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be a NUL-terminated string.
 */
enum SgwsodStatus sgwsod_model_save(const struct SgwsodModel *model, const char *path);

/**
 * # Safety
 * `model` must be NULL or come from this library and not be used afterwards.
 */
void sgwsod_model_free(struct SgwsodModel *model);

/**
 * Number of classes the model scores, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or come from this library.
 */
size_t sgwsod_model_num_classes(const struct SgwsodModel *model);

/**
 * Scores `num_proposals` feature rows (row-major, `feature_dim` columns).
 * Writes Φ row-major as classes × proposals into `phi` and τ into `tau`;
 * either output may be NULL.
 *
 * # Safety
 * `features` must hold `num_proposals * feature_dim` values; `phi` must hold
 * `num_classes * num_proposals` and `tau` `num_classes` values when non-NULL.
 */
enum SgwsodStatus sgwsod_forward(const struct SgwsodModel *model,
                                 const double *features,
                                 size_t num_proposals,
                                 size_t feature_dim,
                                 double *phi,
                                 double *tau);

/**
 * Seed proposal index per class for image `index` of `dataset`: entry `c`
 * of `seeds` receives the seed of class `c`, or -1 for absent classes.
 *
 * # Safety
 * `seeds` must hold as many entries as the dataset has classes.
 */
enum SgwsodStatus sgwsod_select_seeds(const struct SgwsodDataset *dataset,
                                      size_t index,
                                      double sigma,
                                      int64_t *seeds);

/**
 * Detection AP and classification AP on `test`, CorLoc on `corloc_set`
 * (or `test` when NULL).
 *
 * # Safety
 * Handles must come from this library; `out` must be writable.
 */
enum SgwsodStatus sgwsod_evaluate(const struct SgwsodModel *model,
                                  const struct SgwsodDataset *test,
                                  const struct SgwsodDataset *corloc_set,
                                  double iou_threshold,
                                  double nms_threshold,
                                  bool eleven_point,
                                  struct SgwsodEvalSummary *out);

/**
 * IoU of two half-open boxes `{x0, y0, x1, y1}`; -1 if either is degenerate.
 */
double sgwsod_iou(struct SgwsodBox a, struct SgwsodBox b);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SGWSOD_H */
