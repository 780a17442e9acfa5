#ifndef CLUSTERHARM_H
#define CLUSTERHARM_H

#include <stddef.h>
#include <stdint.h>

typedef enum ChStatus {
  CH_STATUS_OK = 0,
  CH_STATUS_NULL_POINTER = 1,
  CH_STATUS_INVALID_ARGUMENT = 2,
  CH_STATUS_DIMENSION_MISMATCH = 3,
  CH_STATUS_NUMERICAL = 4,
  CH_STATUS_IO = 5,
  CH_STATUS_PARSE = 6,
  CH_STATUS_MODEL_MISMATCH = 7,
  CH_STATUS_PROTOCOL = 8,
  CH_STATUS_BUFFER_TOO_SMALL = 9,
  CH_STATUS_PANIC = 10,
} ChStatus;

typedef enum ChAlgorithm {
  CH_ALGORITHM_COMBAT = 1,
  CH_ALGORITHM_CLUSTER_COMBAT = 2,
  CH_ALGORITHM_DIST_COMBAT = 3,
  CH_ALGORITHM_DIST_CLUSTER_COMBAT = 4,
} ChAlgorithm;

/**
 * Opaque dataset handle.
 */
typedef struct ChDataset ChDataset;

/**
 * Opaque model handle.
 */
typedef struct ChModel ChModel;

/**
 * Options for [`ch_model_fit`]. Start from [`ch_fit_options_default`].
 */
typedef struct ChFitOptions {
  /**
   * A `ChAlgorithm` value.
   */
  int32_t algorithm;
  size_t n_clusters;
  uint64_t seed;
  size_t kmeans_restarts;
  /**
   * Nonzero floors zero residual variances instead of failing.
   */
  int32_t variance_floor;
  int32_t cluster_standardized;
  int32_t weight_by_samples;
  int32_t standardize_params;
} ChFitOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call into this library on the same thread.
 */
const char *ch_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ch_version(void);

/**
 * Builds a dataset from row-major `features` (n×g), `covariates` (n×p, may
 * be null when p = 0) and `n` NUL-terminated site ids.
 *
 * # Safety
 * Pointers must reference buffers of the stated sizes; `out` must be writable.
 */
enum ChStatus ch_dataset_new(const double *features,
                             size_t n,
                             size_t g,
                             const double *covariates,
                             size_t p,
                             const char *const *site_ids,
                             struct ChDataset **out);

/**
 * Loads a CSV file; `schema_json` is `{"site": .., "features": [..], "covariates": [..]}`.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` must be writable.
 */
enum ChStatus ch_dataset_load_csv(const char *path,
                                  const char *schema_json,
                                  struct ChDataset **out);

/**
 * Writes the row, feature, covariate and site counts; any pointer may be null.
 *
 * # Safety
 * `ds` must be a live handle; non-null outputs must be writable.
 */
enum ChStatus ch_dataset_shape(const struct ChDataset *ds,
                               size_t *n,
                               size_t *g,
                               size_t *p,
                               size_t *sites);

/**
 * # Safety
 * `ds` must be null or a handle from this library, not used afterwards.
 */
void ch_dataset_free(struct ChDataset *ds);

struct ChFitOptions ch_fit_options_default(void);

/**
 * Fits a model on `ds`.
 *
 * # Safety
 * `ds` must be a live handle, `opts` readable and `out` writable.
 */
enum ChStatus ch_model_fit(const struct ChDataset *ds,
                           const struct ChFitOptions *opts,
                           struct ChModel **out);

/**
 * # Safety
 * `path` must be NUL-terminated; `out` writable.
 */
enum ChStatus ch_model_load(const char *path, struct ChModel **out);

/**
 * # Safety
 * `model` must be a live handle; `path` NUL-terminated.
 */
enum ChStatus ch_model_save(const struct ChModel *model, const char *path);

/**
 * Serializes the model; release the string with [`ch_string_free`].
 *
 * # Safety
 * `model` must be a live handle; `out` writable.
 */
enum ChStatus ch_model_to_json(const struct ChModel *model, char **out);

/**
 * # Safety
 * `s` must be null or a string returned by this library.
 */
void ch_string_free(char *s);

/**
 * Harmonizes rows of sites seen at fit time into `out` (n×g, row-major).
 *
 * # Safety
 * Handles must be live; `out` must hold `len` doubles.
 */
enum ChStatus ch_model_harmonize(const struct ChModel *model,
                                 const struct ChDataset *ds,
                                 double *out,
                                 size_t len);

/**
 * Harmonizes rows of unseen sites without modifying the model. Only the
 * cluster variants support this.
 *
 * # Safety
 * Handles must be live; `out` must hold `len` doubles.
 */
enum ChStatus ch_model_onboard(const struct ChModel *model,
                               const struct ChDataset *ds,
                               double *out,
                               size_t len);

/**
 * # Safety
 * `model` must be null or a handle from this library, not used afterwards.
 */
void ch_model_free(struct ChModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CLUSTERHARM_H */
