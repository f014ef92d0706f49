#ifndef PROBADAPT_H
#define PROBADAPT_H

/* Generated with cbindgen:0.27.0 */

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes of every fallible call.
 */
typedef enum PaStatus {
  PA_STATUS_OK = 0,
  PA_STATUS_NULL_POINTER = 1,
  PA_STATUS_INVALID_ARGUMENT = 2,
  PA_STATUS_CONFIG = 3,
  PA_STATUS_IO = 4,
  PA_STATUS_CORRUPT = 5,
  PA_STATUS_SHAPE = 6,
  PA_STATUS_CONTRACT = 7,
  PA_STATUS_PANIC = 8,
} PaStatus;

/**
 * A trained or loaded model.
 */
typedef struct PaModel PaModel;

/**
 * Feature store together with its task stream.
 */
typedef struct PaStore PaStore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next failing call on the same thread.
 */
const char *pa_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pa_version(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void pa_string_free(char *s);

/**
 * Generates a synthetic store of `num_tasks × classes_per_task` classes.
 *
 * # Safety
 * `out` must be a valid pointer to write the handle to.
 */
enum PaStatus pa_store_synth(size_t num_tasks,
                             size_t classes_per_task,
                             size_t samples_per_class,
                             size_t dim,
                             double spread,
                             uint64_t seed,
                             struct PaStore **out);

/**
 * Loads a store directory and splits it into `num_tasks` tasks. Classes are
 * shuffled with `shuffle_seed` when `shuffle` is nonzero.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PaStatus pa_store_load(const char *path,
                            size_t num_tasks,
                            int32_t shuffle,
                            uint64_t shuffle_seed,
                            struct PaStore **out);

/**
 * # Safety
 * `store` must come from this library and not be used afterwards.
 */
void pa_store_free(struct PaStore *store);

/**
 * Feature width, or 0 for NULL.
 *
 * # Safety
 * `store` must be NULL or a live handle.
 */
size_t pa_store_dim(const struct PaStore *store);

/**
 * # Safety
 * `store` must be NULL or a live handle.
 */
size_t pa_store_num_tasks(const struct PaStore *store);

/**
 * # Safety
 * `store` must be NULL or a live handle.
 */
size_t pa_store_num_classes(const struct PaStore *store);

/**
 * Runs the full stream. `config_json` may be NULL for defaults or a JSON
 * object with optional `model`, `train`, `memory` and `metrics` sections.
 * On success `*out_model` receives the final model and, when
 * `out_results_json` is non-NULL, a JSON summary to free with
 * [`pa_string_free`].
 *
 * # Safety
 * `store` must be a live handle, `config_json` NULL or NUL-terminated, and
 * the out pointers valid.
 */
enum PaStatus pa_run_experiment(const struct PaStore *store,
                                const char *config_json,
                                struct PaModel **out_model,
                                char **out_results_json);

/**
 * Loads a checkpoint directory.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` valid.
 */
enum PaStatus pa_model_load(const char *path, struct PaModel **out);

/**
 * Writes a checkpoint directory.
 *
 * # Safety
 * `model` must be a live handle and `path` NUL-terminated.
 */
enum PaStatus pa_model_save(const struct PaModel *model, const char *path);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void pa_model_free(struct PaModel *model);

/**
 * Number of learned tasks, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t pa_model_num_tasks(const struct PaModel *model);

/**
 * Number of output classes, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t pa_model_num_classes(const struct PaModel *model);

/**
 * Class probabilities averaged over `samples` draws for `n` row-major
 * feature vectors of width `dim`. Text features come from `store`'s first
 * `pa_model_num_tasks` tasks. `out_probs` holds `n × num_classes` floats;
 * `out_energy`, when non-NULL, receives `n` energy scores.
 *
 * # Safety
 * Pointers must be live handles or buffers of the stated sizes.
 */
enum PaStatus pa_model_predict(const struct PaModel *model,
                               const struct PaStore *store,
                               const float *features,
                               size_t n,
                               size_t dim,
                               size_t samples,
                               uint64_t seed,
                               float *out_probs,
                               float *out_energy);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROBADAPT_H */
