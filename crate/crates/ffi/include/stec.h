#ifndef STEC_H
#define STEC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum StecStatus {
  STEC_STATUS_OK = 0,
  STEC_STATUS_NULL_POINTER = 1,
  STEC_STATUS_INVALID_ARGUMENT = 2,
  STEC_STATUS_CONFIG = 3,
  STEC_STATUS_IO = 4,
  /**
   * Checksum, format or version problem in a file.
   */
  STEC_STATUS_CORRUPT = 5,
  STEC_STATUS_NON_FINITE = 6,
  /**
   * A verification suite ran and failed.
   */
  STEC_STATUS_CHECK_FAILED = 7,
  /**
   * Buffer too small; the required length was written.
   */
  STEC_STATUS_BUFFER_TOO_SMALL = 8,
  STEC_STATUS_INTERNAL = 9,
} StecStatus;

/**
 * Verification suite selector.
 */
typedef enum StecSuite {
  STEC_SUITE_DECOMPOSITION = 0,
  STEC_SUITE_BOUND = 1,
  STEC_SUITE_RECOVERY = 2,
  STEC_SUITE_GRADIENTS = 3,
  STEC_SUITE_AFFINE = 4,
  STEC_SUITE_ALL = 5,
} StecSuite;

/**
 * Opaque checkpoint handle.
 */
typedef struct StecCheckpoint StecCheckpoint;

/**
 * Opaque dataset handle.
 */
typedef struct StecDataset StecDataset;

/**
 * Crop and mirror of one view on a `source_width × source_height` canvas.
 */
typedef struct StecCrop {
  size_t source_width;
  size_t source_height;
  size_t left;
  size_t top;
  size_t width;
  size_t height;
  bool mirrored;
} StecCrop;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty when none.
 * The pointer stays valid until the next failing call on this thread.
 */
const char *stec_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *stec_version(void);

/**
 * Generates a synthetic dataset.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum StecStatus stec_dataset_generate(size_t n,
                                      size_t classes,
                                      size_t resolution,
                                      uint64_t seed,
                                      struct StecDataset **out);

/**
 * Loads a dataset directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` writable.
 */
enum StecStatus stec_dataset_load(const char *dir, struct StecDataset **out);

/**
 * Writes a dataset directory.
 *
 * # Safety
 * `ds` must be a live handle and `dir` a NUL-terminated string.
 */
enum StecStatus stec_dataset_save(const struct StecDataset *ds, const char *dir);

/**
 * Number of images, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t stec_dataset_len(const struct StecDataset *ds);

/**
 * Copies the labels into `labels`, which holds `capacity` entries.
 *
 * # Safety
 * `ds` must be a live handle and `labels` valid for `capacity` writes.
 */
enum StecStatus stec_dataset_labels(const struct StecDataset *ds,
                                    uint32_t *labels,
                                    size_t capacity,
                                    size_t *written);

/**
 * Releases a dataset handle; null is ignored.
 *
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void stec_dataset_free(struct StecDataset *ds);

/**
 * Loads a checkpoint directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` writable.
 */
enum StecStatus stec_checkpoint_load(const char *dir, struct StecCheckpoint **out);

/**
 * Encoder feature dimension, or 0 for a null handle.
 *
 * # Safety
 * `ckpt` must be null or a live handle.
 */
size_t stec_checkpoint_feature_dim(const struct StecCheckpoint *ckpt);

/**
 * Training step at which the checkpoint was written, or 0 for a null handle.
 *
 * # Safety
 * `ckpt` must be null or a live handle.
 */
uint64_t stec_checkpoint_step(const struct StecCheckpoint *ckpt);

/**
 * Releases a checkpoint handle; null is ignored.
 *
 * # Safety
 * `ckpt` must be null or a handle not yet freed.
 */
void stec_checkpoint_free(struct StecCheckpoint *ckpt);

/**
 * Eval-mode encoder features of every image, row-major `N × D`, into
 * `features` of `capacity` doubles. `written` receives `N·D`.
 *
 * # Safety
 * Handles must be live, `features` valid for `capacity` writes, `written` writable.
 */
enum StecStatus stec_encode(const struct StecCheckpoint *ckpt,
                            const struct StecDataset *ds,
                            double *features,
                            size_t capacity,
                            size_t *written);

/**
 * Trains from a TOML config; `out_dir` overrides the config's when non-null.
 *
 * # Safety
 * `config_path` must be a NUL-terminated string; `out_dir` null or one.
 */
enum StecStatus stec_train(const char *config_path, const char *out_dir);

/**
 * Runs a verification suite. Returns `CheckFailed` when any check fails.
 */
enum StecStatus stec_verify(enum StecSuite suite, size_t trials, uint64_t seed);

/**
 * Egocentric action from view `x` to view `x_prime` (6 doubles) and its
 * labels under the default binning with `bins` bins (6 entries).
 *
 * # Safety
 * `x` and `x_prime` must be readable; `action` and `labels` valid for 6 writes each.
 */
enum StecStatus stec_ego_action(const struct StecCrop *x,
                                const struct StecCrop *x_prime,
                                size_t bins,
                                double *action,
                                size_t *labels);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STEC_H */
