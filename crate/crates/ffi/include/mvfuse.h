#ifndef MVFUSE_H
#define MVFUSE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. The nonzero values that overlap with the command-line tool's exit
 * codes carry the same meaning.
 */
typedef enum MvfStatus {
  MVF_STATUS_OK = 0,
  MVF_STATUS_INVALID_ARGUMENT = 1,
  MVF_STATUS_NUMERIC_ABORT = 2,
  MVF_STATUS_IO = 3,
  MVF_STATUS_NULL_POINTER = 4,
  MVF_STATUS_NO_GROUND_TRUTH = 5,
  MVF_STATUS_PANIC = 6,
} MvfStatus;

/**
 * Optimization settings.
 */
typedef struct MvfConfig MvfConfig;

/**
 * Outcome of one optimization run.
 */
typedef struct MvfResult MvfResult;

/**
 * Loaded or generated scene.
 */
typedef struct MvfScene MvfScene;

typedef struct MvfMetrics {
  double mpjpe;
  double pa_mpjpe;
  double mpvpe;
  double pck;
  double auc;
  double epe;
} MvfMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null if none. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *mvf_last_error(void);

/**
 * Generates a synthetic scene with default noise levels.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum MvfStatus mvf_scene_synth(uint64_t seed,
                               size_t n_views,
                               bool calibrated,
                               struct MvfScene **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` as for [`mvf_scene_synth`].
 */
enum MvfStatus mvf_scene_load(const char *path, struct MvfScene **out);

/**
 * # Safety
 * `scene` must be a live handle and `path` a NUL-terminated string.
 */
enum MvfStatus mvf_scene_save(const struct MvfScene *scene, const char *path);

/**
 * Number of views, or 0 for a null handle.
 *
 * # Safety
 * `scene` must be null or a live handle.
 */
size_t mvf_scene_n_views(const struct MvfScene *scene);

/**
 * # Safety
 * `scene` must be null or a handle not yet freed.
 */
void mvf_scene_free(struct MvfScene *scene);

/**
 * Default settings. Never null.
 */
struct MvfConfig *mvf_config_default(void);

/**
 * Parses a TOML run configuration; only its optimization settings are kept.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` as for [`mvf_scene_synth`].
 */
enum MvfStatus mvf_config_from_toml(const char *text, struct MvfConfig **out);

/**
 * Sets the step count, clamping the warm-up to it.
 *
 * # Safety
 * `config` must be a live handle.
 */
enum MvfStatus mvf_config_set_steps(struct MvfConfig *config, size_t steps);

/**
 * Sets the per-view and virtual-view learning rates.
 *
 * # Safety
 * `config` must be a live handle.
 */
enum MvfStatus mvf_config_set_learning_rates(struct MvfConfig *config,
                                             double eta,
                                             double eta_virtual);

/**
 * # Safety
 * `config` must be null or a handle not yet freed.
 */
void mvf_config_free(struct MvfConfig *config);

/**
 * Runs the optimization.
 *
 * # Safety
 * `scene` and `config` must be live handles; `out` as for [`mvf_scene_synth`].
 */
enum MvfStatus mvf_optimize(const struct MvfScene *scene,
                            const struct MvfConfig *config,
                            struct MvfResult **out);

/**
 * Number of recorded states (steps + 1), or 0 for a null handle.
 *
 * # Safety
 * `result` must be null or a live handle.
 */
size_t mvf_result_n_records(const struct MvfResult *result);

/**
 * Total loss of record `index`.
 *
 * # Safety
 * `result` must be a live handle and `out` writable.
 */
enum MvfStatus mvf_result_loss(const struct MvfResult *result, size_t index, double *out);

/**
 * Metrics of record `index`; [`MvfStatus::NoGroundTruth`] when the scene had none.
 *
 * # Safety
 * `result` must be a live handle and `out` writable.
 */
enum MvfStatus mvf_result_metrics(const struct MvfResult *result,
                                  size_t index,
                                  struct MvfMetrics *out);

/**
 * # Safety
 * `result` must be null or a handle not yet freed.
 */
void mvf_result_free(struct MvfResult *result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MVFUSE_H */
