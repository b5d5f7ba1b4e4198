#ifndef ASEER_H
#define ASEER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Reference predictors available without a checkpoint.
 */
typedef enum AseerBaseline {
  ASEER_BASELINE_LAST = 0,
  ASEER_BASELINE_HISTORICAL_AVERAGE = 1,
} AseerBaseline;

/**
 * Result of every fallible call. The numeric values match the exit codes
 * of the command-line tool where they overlap.
 */
typedef enum AseerStatus {
  ASEER_STATUS_OK = 0,
  ASEER_STATUS_USAGE = 1,
  ASEER_STATUS_DATA = 2,
  ASEER_STATUS_DIVERGENCE = 3,
  ASEER_STATUS_NULL_POINTER = 4,
  ASEER_STATUS_INTERNAL = 5,
} AseerStatus;

/**
 * Sensor data plus its diffusion graph.
 */
typedef struct AseerDataset AseerDataset;

/**
 * A trained model restored from a checkpoint.
 */
typedef struct AseerModel AseerModel;

/**
 * The six evaluation metrics; NaN marks a metric with nothing to average.
 */
typedef struct AseerMetrics {
  double c_mae;
  double c_rmse;
  double c_mape;
  double f_mae;
  double f_rmse;
  double f_aae;
  /**
   * Windows evaluated.
   */
  size_t windows;
} AseerMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *aseer_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *aseer_version(void);

/**
 * Simulates a scenario. `scenario_json` may be NULL for the default scenario.
 *
 * # Safety
 * `scenario_json` must be NULL or a NUL-terminated string; `out` must be a
 * valid pointer to writable storage for one handle.
 */
enum AseerStatus aseer_dataset_generate(const char *scenario_json,
                                        uint32_t days,
                                        double epsilon_km,
                                        struct AseerDataset **out);

/**
 * Loads `dataset.csv`, `nodes.csv` and `reach.csv` from a directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum AseerStatus aseer_dataset_load(const char *dir, double epsilon_km, struct AseerDataset **out);

/**
 * Writes the dataset files into `dir`, creating it if needed.
 *
 * # Safety
 * `dataset` must be a live handle; `dir` a NUL-terminated string.
 */
enum AseerStatus aseer_dataset_export(const struct AseerDataset *dataset, const char *dir);

/**
 * # Safety
 * `dataset` must be a live handle; `out` must be writable.
 */
enum AseerStatus aseer_dataset_sensor_count(const struct AseerDataset *dataset, size_t *out);

/**
 * First and last recorded second of the dataset.
 *
 * # Safety
 * `dataset` must be a live handle; `start` and `end` must be writable.
 */
enum AseerStatus aseer_dataset_time_range(const struct AseerDataset *dataset,
                                          int64_t *start,
                                          int64_t *end);

/**
 * # Safety
 * `dataset` must be NULL or a handle not freed before.
 */
void aseer_dataset_free(struct AseerDataset *dataset);

/**
 * Restores a model from a checkpoint file written by training.
 *
 * # Safety
 * `checkpoint` must be a NUL-terminated string; `out` must be writable.
 */
enum AseerStatus aseer_model_load(const char *checkpoint, struct AseerModel **out);

/**
 * Slots the model emits per decoding step.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum AseerStatus aseer_model_step_size(const struct AseerModel *model, size_t *out);

/**
 * # Safety
 * `model` must be NULL or a handle not freed before.
 */
void aseer_model_free(struct AseerModel *model);

/**
 * Forecasts the window whose history ends at `anchor` and writes the
 * forecast CSV to `out_csv`. `slots_out` (may be NULL) receives the number
 * of rows written.
 *
 * # Safety
 * `model` and `dataset` must be live handles; `out_csv` a NUL-terminated string.
 */
enum AseerStatus aseer_forecast(const struct AseerModel *model,
                                const struct AseerDataset *dataset,
                                int64_t anchor,
                                const char *out_csv,
                                size_t *slots_out);

/**
 * Metrics of a model on the test split (last 20% of the time range).
 *
 * # Safety
 * `model` and `dataset` must be live handles; `out` must be writable.
 */
enum AseerStatus aseer_evaluate(const struct AseerModel *model,
                                const struct AseerDataset *dataset,
                                struct AseerMetrics *out);

/**
 * Metrics of a parameter-free baseline on the test split with default
 * one-hour windows.
 *
 * # Safety
 * `dataset` must be a live handle; `out` must be writable.
 */
enum AseerStatus aseer_evaluate_baseline(const struct AseerDataset *dataset,
                                         enum AseerBaseline baseline,
                                         struct AseerMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ASEER_H */
