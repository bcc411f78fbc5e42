#ifndef HYDRA_H
#define HYDRA_H

/* Generated by cbindgen from the hydra-ffi sources. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HydraBranch {
  HYDRA_BRANCH_INTERMEDIATE = 0,
  HYDRA_BRANCH_LATE = 1,
} HydraBranch;

typedef enum HydraStatus {
  HYDRA_STATUS_OK = 0,
  HYDRA_STATUS_NULL_POINTER = 1,
  HYDRA_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Configuration failed to parse or validate.
   */
  HYDRA_STATUS_CONFIG = 3,
  /**
   * The computation itself failed (I/O, report serialization).
   */
  HYDRA_STATUS_RUNTIME = 4,
  /**
   * The output buffer is too small; the required length was written.
   */
  HYDRA_STATUS_BUFFER_TOO_SMALL = 5,
  /**
   * An internal panic was caught.
   */
  HYDRA_STATUS_PANIC = 6,
} HydraStatus;

/**
 * A scenario configuration plus the report of its latest run.
 */
typedef struct HydraExperiment HydraExperiment;

/**
 * Anchor boxes and late agents collected for one anchored pose correction.
 */
typedef struct HydraPoseGraph HydraPoseGraph;

/**
 * Oriented 3D box. `class_id` is 0 vehicle, 1 pedestrian, 2 truck.
 */
typedef struct HydraBox {
  double center[3];
  /**
   * Length, width, height; all strictly positive.
   */
  double size[3];
  double yaw;
  uint8_t class_id;
  double confidence;
} HydraBox;

typedef struct HydraPose {
  double x;
  double y;
  double yaw;
} HydraPose;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next call into this library on the same thread.
 */
const char *hydra_last_error(void);

/**
 * 3D IoU of two boxes.
 *
 * # Safety
 * `a`, `b` and `out` must be valid pointers or null.
 */
enum HydraStatus hydra_iou_3d(const struct HydraBox *a, const struct HydraBox *b, double *out);

/**
 * Optimal assignment on a row-major `rows x cols` cost matrix.
 *
 * Writes `min(rows, cols)` pairs to `out_rows`/`out_cols` and their count to
 * `out_len`. When `capacity` is too small nothing but `out_len` is written.
 *
 * # Safety
 * `cost` must point to `rows * cols` doubles; the output arrays must hold
 * `capacity` elements.
 */
enum HydraStatus hydra_hungarian(const double *cost,
                                 size_t rows,
                                 size_t cols,
                                 bool maximize,
                                 size_t *out_rows,
                                 size_t *out_cols,
                                 size_t capacity,
                                 size_t *out_len);

/**
 * Domain score of one agent from its own boxes and the ego's decode of its
 * features, both in the agent's local frame. `tau` is the routing threshold.
 *
 * # Safety
 * `b_a` and `b_pred` must point to `n_a` and `n_pred` boxes; outputs must be valid.
 */
enum HydraStatus hydra_classify_agent(const struct HydraBox *b_a,
                                      size_t n_a,
                                      const struct HydraBox *b_pred,
                                      size_t n_pred,
                                      double tau,
                                      double *out_score,
                                      enum HydraBranch *out_branch);

/**
 * New empty pose graph with default settings.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum HydraStatus hydra_pose_graph_new(struct HydraPoseGraph **out);

/**
 * Overrides the association gates, the per-agent iteration budget and the
 * number of re-association rounds. A budget of 0 disables correction.
 *
 * # Safety
 * `graph` must come from [`hydra_pose_graph_new`].
 */
enum HydraStatus hydra_pose_graph_configure(struct HydraPoseGraph *graph,
                                            double gate_dist,
                                            double gate_yaw,
                                            size_t max_iters,
                                            size_t outer_rounds);

/**
 * Adds a fused box in the ego-global frame as a fixed anchor.
 *
 * # Safety
 * `graph` must come from [`hydra_pose_graph_new`]; `anchor` must be valid.
 */
enum HydraStatus hydra_pose_graph_add_anchor(struct HydraPoseGraph *graph,
                                             const struct HydraBox *anchor);

/**
 * Adds a late agent with its reported pose and its boxes in its local frame.
 *
 * # Safety
 * `graph` must come from [`hydra_pose_graph_new`]; `boxes` must point to `n` boxes.
 */
enum HydraStatus hydra_pose_graph_add_agent(struct HydraPoseGraph *graph,
                                            uint32_t agent_id,
                                            struct HydraPose pose,
                                            const struct HydraBox *boxes,
                                            size_t n);

/**
 * Corrects every agent's pose against the anchors.
 *
 * # Safety
 * `graph` must come from [`hydra_pose_graph_new`].
 */
enum HydraStatus hydra_pose_graph_optimize(struct HydraPoseGraph *graph);

/**
 * Corrected pose of one agent and the number of anchor edges it used.
 *
 * # Safety
 * `graph` must come from [`hydra_pose_graph_new`]; outputs must be valid.
 */
enum HydraStatus hydra_pose_graph_corrected_pose(const struct HydraPoseGraph *graph,
                                                 uint32_t agent_id,
                                                 struct HydraPose *out_pose,
                                                 size_t *out_edges);

/**
 * # Safety
 * `graph` must come from [`hydra_pose_graph_new`] and not be used afterwards. Null is ignored.
 */
void hydra_pose_graph_free(struct HydraPoseGraph *graph);

/**
 * Loads a scenario file, or the built-in defaults when `scenario_path` is null.
 *
 * # Safety
 * `scenario_path` must be null or a NUL-terminated string; `out` must be valid.
 */
enum HydraStatus hydra_experiment_new(const char *scenario_path, struct HydraExperiment **out);

/**
 * Applies one `dotted.key=value` override. The configuration is left
 * unchanged when the result does not validate.
 *
 * # Safety
 * `exp` must come from [`hydra_experiment_new`]; `assignment` must be a NUL-terminated string.
 */
enum HydraStatus hydra_experiment_set(struct HydraExperiment *exp, const char *assignment);

/**
 * Runs a method (null selects the configured one) and writes total AP at
 * IoU 0.3, 0.5 and 0.7 to `out_ap`. `jobs` of 0 uses the global thread pool.
 *
 * # Safety
 * `exp` must come from [`hydra_experiment_new`]; `method` must be null or a
 * NUL-terminated string; `out_ap` must hold 3 doubles.
 */
enum HydraStatus hydra_experiment_run(struct HydraExperiment *exp,
                                      const char *method,
                                      size_t jobs,
                                      double *out_ap);

/**
 * Copies the latest report as NUL-terminated JSON. `out_len` receives the
 * length without the terminator, also when the buffer is too small.
 *
 * # Safety
 * `exp` must come from [`hydra_experiment_new`]; `buf` must hold `capacity` bytes.
 */
enum HydraStatus hydra_experiment_report_json(const struct HydraExperiment *exp,
                                              char *buf,
                                              size_t capacity,
                                              size_t *out_len);

/**
 * # Safety
 * `exp` must come from [`hydra_experiment_new`] and not be used afterwards. Null is ignored.
 */
void hydra_experiment_free(struct HydraExperiment *exp);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HYDRA_H */
