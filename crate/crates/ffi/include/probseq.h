/* C interface of the probseq sequence-regression engine. */

#ifndef PROBSEQ_H
#define PROBSEQ_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum PsStatus {
  PsStatus_Ok = 0,
  /**
   * Null pointer, malformed UTF-8, index out of range.
   */
  PsStatus_InvalidArgument = 1,
  /**
   * Invalid configuration or contract violation.
   */
  PsStatus_ConfigError = 2,
  /**
   * NaN or infinity encountered during computation.
   */
  PsStatus_NumericFault = 3,
  /**
   * File system or parse failure.
   */
  PsStatus_IoError = 4,
  /**
   * Internal panic; file a bug.
   */
  PsStatus_Internal = 5,
} PsStatus;

/**
 * Opaque collection of sessions.
 */
typedef struct PsDataset PsDataset;

/**
 * Opaque trained model.
 */
typedef struct PsModel PsModel;

/**
 * Opaque prediction set.
 */
typedef struct PsPredictions PsPredictions;

/**
 * One prediction row. `nu` is meaningful only when `has_nu` is true.
 */
typedef struct PsPredictionRow {
  size_t t;
  double y;
  double mu;
  double sigma;
  double nu;
  bool has_nu;
} PsPredictionRow;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread, or null.
 * The pointer stays valid until the next failing call on the thread.
 */
const char *ps_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *ps_version(void);

/**
 * Release a string returned through a `char**` out-parameter.
 *
 * # Safety
 * `s` must have been produced by this library and not freed before.
 */
void ps_string_free(char *s);

/**
 * Load a JSON-lines dataset from a file.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `out` must be a valid
 * pointer to receive the handle.
 */
enum PsStatus ps_dataset_load(const char *path, struct PsDataset **out);

/**
 * Generate a synthetic dataset from a JSON spec. When `truth_json` is
 * non-null it receives the generator's truth records as a JSON string.
 *
 * # Safety
 * `spec_json` must be a valid NUL-terminated string; `out` must be
 * valid; `truth_json` may be null.
 */
enum PsStatus ps_dataset_generate(const char *spec_json, struct PsDataset **out, char **truth_json);

/**
 * Write a dataset back out in the JSON-lines format.
 *
 * # Safety
 * `dataset` must be a live handle; `path` a valid string.
 */
enum PsStatus ps_dataset_write(const struct PsDataset *dataset, const char *path);

/**
 * Number of sessions; 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t ps_dataset_len(const struct PsDataset *dataset);

/**
 * # Safety
 * `dataset` must be null or a live handle, freed at most once.
 */
void ps_dataset_free(struct PsDataset *dataset);

/**
 * Embedding width; 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t ps_dataset_dim(const struct PsDataset *dataset);

/**
 * Load a model checkpoint.
 *
 * # Safety
 * `path` must be a valid string; `out` a valid pointer.
 */
enum PsStatus ps_model_load(const char *path, struct PsModel **out);

/**
 * Save a model checkpoint.
 *
 * # Safety
 * `model` must be a live handle; `path` a valid string.
 */
enum PsStatus ps_model_save(const struct PsModel *model, const char *path);

/**
 * Train a fresh model on the dataset's train/dev splits. The configs
 * are JSON documents matching the CLI schema; empty strings select the
 * defaults.
 *
 * # Safety
 * `dataset` must be a live handle; config strings valid or null;
 * `out` a valid pointer.
 */
enum PsStatus ps_model_train(const struct PsDataset *dataset,
                             const char *model_config_json,
                             const char *train_config_json,
                             uint64_t seed,
                             struct PsModel **out);

/**
 * Total number of trainable parameters; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t ps_model_parameter_count(const struct PsModel *model);

/**
 * # Safety
 * `model` must be null or a live handle, freed at most once.
 */
void ps_model_free(struct PsModel *model);

/**
 * Run inference over one split ("train", "dev" or "test") and collect
 * per-position prediction records. `transform` is "log1p" or
 * "identity" and must match how the model was trained.
 *
 * # Safety
 * `model` and `dataset` must be live handles; strings valid; `out` a
 * valid pointer.
 */
enum PsStatus ps_predict(const struct PsModel *model,
                         const struct PsDataset *dataset,
                         const char *split,
                         const char *transform,
                         struct PsPredictions **out);

/**
 * Number of records; 0 for a null handle.
 *
 * # Safety
 * `predictions` must be null or a live handle.
 */
size_t ps_predictions_len(const struct PsPredictions *predictions);

/**
 * Copy record `index` into `row`.
 *
 * # Safety
 * `predictions` must be a live handle; `row` a valid pointer.
 */
enum PsStatus ps_predictions_row(const struct PsPredictions *predictions,
                                 size_t index,
                                 struct PsPredictionRow *row);

/**
 * Session id of record `index`; borrowed, valid while the handle
 * lives. Null when out of range.
 *
 * # Safety
 * `predictions` must be null or a live handle.
 */
const char *ps_predictions_session(const struct PsPredictions *predictions, size_t index);

/**
 * # Safety
 * `predictions` must be null or a live handle, freed at most once.
 */
void ps_predictions_free(struct PsPredictions *predictions);

/**
 * Full calibration report over the records, as a JSON string. Set
 * `one_sigma_at_68` for the plus-minus-one-sigma reading of the 68%
 * level instead of the exact central quantile.
 *
 * # Safety
 * `predictions` must be a live handle; `out_json` a valid pointer.
 */
enum PsStatus ps_calibration_report_json(const struct PsPredictions *predictions,
                                         bool one_sigma_at_68,
                                         char **out_json);

/**
 * Deterministic bag-of-words embedding of `text` into `dim` buckets,
 * written to `out` (which must hold `dim` doubles).
 *
 * # Safety
 * `text` must be a valid string; `out` must point to `dim` writable
 * doubles.
 */
enum PsStatus ps_toy_embed(const char *text, size_t dim, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROBSEQ_H */
