#ifndef SOFTSENSE_H
#define SOFTSENSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Number of finger joints and links.
 */
#define SS_JOINTS 20

/**
 * Bytes in one 64x64 RGB frame.
 */
#define SS_FRAME_BYTES 12288

/**
 * Result of every fallible call.
 */
typedef enum SsStatus {
  SS_STATUS_OK = 0,
  SS_STATUS_NULL_POINTER = 1,
  SS_STATUS_INVALID_ARGUMENT = 2,
  SS_STATUS_IO = 3,
  /**
   * A file was read but is not a valid dataset or model.
   */
  SS_STATUS_CORRUPT = 4,
  SS_STATUS_MODEL = 5,
  SS_STATUS_SIMULATION = 6,
  SS_STATUS_BUFFER_TOO_SMALL = 7,
  SS_STATUS_PANIC = 8,
} SsStatus;

typedef enum SsVariant {
  /**
   * Proprioception only.
   */
  SS_VARIANT_P1 = 1,
  /**
   * Proprioception and vision.
   */
  SS_VARIANT_P2 = 2,
} SsVariant;

typedef enum SsScenario {
  SS_SCENARIO_EMPTY = 0,
  SS_SCENARIO_CLUTTERED = 1,
} SsScenario;

/**
 * Opaque dataset handle.
 */
typedef struct SsDataset SsDataset;

/**
 * Opaque model handle.
 */
typedef struct SsModel SsModel;

/**
 * One recorded sample, in raw units.
 */
typedef struct SsSample {
  uint32_t index;
  float action[3];
  float arm_q[3];
  float finger_q[SS_JOINTS];
  float forces[SS_JOINTS];
} SsSample;

/**
 * Mean-mode prediction of the next finger angles and link forces.
 */
typedef struct SsPrediction {
  float finger_q[SS_JOINTS];
  float forces[SS_JOINTS];
} SsPrediction;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null if none failed.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *ss_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ss_version(void);

/**
 * Runs `commands` random arm commands (ten samples each) and records a
 * dataset. `scenario_code` is an [`SsScenario`] value; `config_path` may be
 * null for the built-in configuration.
 *
 * # Safety
 * `config_path` is null or a NUL-terminated string; `out` is valid for writes.
 */
enum SsStatus ss_dataset_simulate(uint32_t scenario_code,
                                  size_t commands,
                                  uint64_t seed,
                                  bool vision,
                                  const char *config_path,
                                  struct SsDataset **out);

/**
 * # Safety
 * `path` is a NUL-terminated string; `out` is valid for writes.
 */
enum SsStatus ss_dataset_load(const char *path, struct SsDataset **out);

/**
 * Writes the dataset to `path`, which must not exist yet.
 *
 * # Safety
 * `ds` comes from this library; `path` is a NUL-terminated string.
 */
enum SsStatus ss_dataset_save(const struct SsDataset *ds, const char *path);

/**
 * # Safety
 * `ds` is null or comes from this library and is not used afterwards.
 */
void ss_dataset_free(struct SsDataset *ds);

/**
 * Number of samples, or 0 for a null handle.
 *
 * # Safety
 * `ds` is null or comes from this library.
 */
size_t ss_dataset_len(const struct SsDataset *ds);

/**
 * # Safety
 * `ds` is null or comes from this library.
 */
bool ss_dataset_has_vision(const struct SsDataset *ds);

/**
 * # Safety
 * `ds` comes from this library; `out` is valid for writes.
 */
enum SsStatus ss_dataset_sample(const struct SsDataset *ds, size_t index, struct SsSample *out);

/**
 * Copies the RGB frame of sample `index` (row-major, [`SS_FRAME_BYTES`]
 * bytes) into `buf`.
 *
 * # Safety
 * `ds` comes from this library; `buf` is valid for `len` bytes of writes.
 */
enum SsStatus ss_dataset_frame(const struct SsDataset *ds, size_t index, uint8_t *buf, size_t len);

/**
 * # Safety
 * `path` is a NUL-terminated string; `out` is valid for writes.
 */
enum SsStatus ss_model_load(const char *path, struct SsModel **out);

/**
 * Builds and trains a model on `ds`. `arch` is an [`SsVariant`] value. Zero `epochs`, `batch_size` or a
 * non-positive `learning_rate` select the desk defaults (50, 256, 1e-3).
 *
 * # Safety
 * `ds` comes from this library; `out` is valid for writes.
 */
enum SsStatus ss_model_train(const struct SsDataset *ds,
                             uint32_t arch,
                             size_t latent,
                             size_t epochs,
                             size_t batch_size,
                             double learning_rate,
                             uint64_t seed,
                             struct SsModel **out);

/**
 * Writes the model to `path`, which must not exist yet.
 *
 * # Safety
 * `model` comes from this library; `path` is a NUL-terminated string.
 */
enum SsStatus ss_model_save(const struct SsModel *model, const char *path);

/**
 * # Safety
 * `model` is null or comes from this library and is not used afterwards.
 */
void ss_model_free(struct SsModel *model);

/**
 * Latent size, or 0 for a null handle.
 *
 * # Safety
 * `model` is null or comes from this library.
 */
size_t ss_model_latent(const struct SsModel *model);

/**
 * # Safety
 * `model` comes from this library; `out` is valid for writes.
 */
enum SsStatus ss_model_variant(const struct SsModel *model, enum SsVariant *out);

/**
 * Predicts sample `index + 1` from sample `index` and the action that
 * followed it, without sampling the latent.
 *
 * # Safety
 * `model` and `ds` come from this library; `out` is valid for writes.
 */
enum SsStatus ss_model_predict(const struct SsModel *model,
                               const struct SsDataset *ds,
                               size_t index,
                               struct SsPrediction *out);

/**
 * Predicted flow of transition `index` as RGB bytes (zero flow is 128).
 * With a null `model` the reference frame difference is written instead.
 *
 * # Safety
 * `model` is null or comes from this library; `ds` comes from this library;
 * `buf` is valid for `len` bytes of writes.
 */
enum SsStatus ss_flow(const struct SsModel *model,
                      const struct SsDataset *ds,
                      size_t index,
                      uint8_t *buf,
                      size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SOFTSENSE_H */
