#ifndef MSDFTVNET_H
#define MSDFTVNET_H

#include <stddef.h>
#include <stdint.h>

/**
 * Split selector values for [`msd_forecaster_evaluate`].
 */
#define MSD_SPLIT_TRAIN 0

#define MSD_SPLIT_VAL 1

#define MSD_SPLIT_TEST 2

/**
 * Result codes.
 */
typedef enum MsdStatus {
  MSD_STATUS_OK = 0,
  MSD_STATUS_NULL_POINTER = 1,
  MSD_STATUS_INVALID_ARGUMENT = 2,
  MSD_STATUS_DIMENSION = 3,
  MSD_STATUS_IO = 4,
  MSD_STATUS_FORMAT = 5,
  MSD_STATUS_NUMERIC = 6,
  MSD_STATUS_INSUFFICIENT_DATA = 7,
  MSD_STATUS_PANIC = 8,
} MsdStatus;

/**
 * Opaque trained model with its normalisation statistics.
 */
typedef struct MsdForecaster MsdForecaster;

/**
 * Training parameters; fill with [`msd_train_config_default`] first.
 */
typedef struct MsdTrainConfig {
  size_t lookback;
  size_t horizon;
  size_t scales;
  size_t embed_dim;
  size_t taps;
  /**
   * 0 selects four times `embed_dim`.
   */
  size_t hidden;
  size_t epochs;
  size_t batch_size;
  double learning_rate;
  /**
   * Gradient-norm clip; 0 or negative disables clipping.
   */
  double clip;
  uint64_t seed;
  double train_ratio;
  double val_ratio;
  double test_ratio;
} MsdTrainConfig;

typedef struct MsdModelInfo {
  size_t lookback;
  size_t horizon;
  size_t channels;
  size_t embed_dim;
  size_t scales;
  size_t parameters;
} MsdModelInfo;

typedef struct MsdEvalResult {
  double mse;
  double mae;
  size_t windows;
} MsdEvalResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static NUL-terminated string.
 */
const char *msd_version(void);

/**
 * Message of the last failed call on this thread; empty if none. Valid
 * until the next failing call on the same thread.
 */
const char *msd_last_error(void);

/**
 * Defaults: lookback 96, horizon 24, 2 scales, width 32, 3 taps,
 * 10 epochs, batch 32, learning rate 1e-4, clip 5, seed 42, split 0.7/0.1/0.2.
 *
 * # Safety
 * `out` must be null or point to writable memory for one config.
 */
enum MsdStatus msd_train_config_default(struct MsdTrainConfig *out);

/**
 * Train on `data` (a CSV path or `synthetic:...` spec) and return a new handle.
 *
 * # Safety
 * `data` must be a NUL-terminated string, `config` a valid config, and
 * `out` writable; a handle stored in `out` must be freed by the caller.
 */
enum MsdStatus msd_forecaster_train(const char *data,
                                    const struct MsdTrainConfig *config,
                                    struct MsdForecaster **out);

/**
 * Load a checkpoint written by [`msd_forecaster_save`] or the CLI.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum MsdStatus msd_forecaster_load(const char *path, struct MsdForecaster **out);

/**
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum MsdStatus msd_forecaster_save(const struct MsdForecaster *model, const char *path);

/**
 * Release a handle; null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void msd_forecaster_free(struct MsdForecaster *model);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum MsdStatus msd_forecaster_info(const struct MsdForecaster *model, struct MsdModelInfo *out);

/**
 * Forecast from a raw `lookback × channels` window into a
 * `horizon × channels` buffer, both in original units.
 *
 * # Safety
 * `window` must hold `window_len` doubles and `out` `out_len` doubles.
 */
enum MsdStatus msd_forecaster_predict(const struct MsdForecaster *model,
                                      const double *window,
                                      size_t window_len,
                                      double *out,
                                      size_t out_len);

/**
 * Score the model on one split of `data` (normalised units).
 *
 * # Safety
 * `model` must be a live handle, `data` a NUL-terminated string, `out` writable.
 */
enum MsdStatus msd_forecaster_evaluate(const struct MsdForecaster *model,
                                       const char *data,
                                       int32_t split,
                                       struct MsdEvalResult *out);

/**
 * Top-`k` periods of a `len × channels` window. Each output array holds `k` entries.
 *
 * # Safety
 * `x` must hold `len * channels` doubles; outputs must hold `k` entries each.
 */
enum MsdStatus msd_spectral_profile(const double *x,
                                    size_t len,
                                    size_t channels,
                                    size_t k,
                                    size_t *frequencies,
                                    size_t *periods,
                                    double *amplitudes);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MSDFTVNET_H */
