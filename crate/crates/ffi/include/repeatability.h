#ifndef REPEATABILITY_H
#define REPEATABILITY_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every fallible call.
 */
typedef enum RpStatus {
  RP_STATUS_OK = 0,
  /*
   A required pointer was null.
   */
  RP_STATUS_NULL_POINTER = 1,
  RP_STATUS_INVALID_ARGUMENT = 2,
  RP_STATUS_IO = 3,
  /*
   Malformed file contents.
   */
  RP_STATUS_FORMAT = 4,
  /*
   Nothing to compute (no histograms, empty mesh).
   */
  RP_STATUS_EMPTY = 5,
  /*
   A ray missed every occupied cell.
   */
  RP_STATUS_MISS = 6,
  /*
   Internal failure; the library state is unchanged.
   */
  RP_STATUS_PANIC = 7,
} RpStatus;

/*
 Running collection of pair histograms.
 */
typedef struct RpAggregator RpAggregator;

/*
 Pair evaluator bound to one camera.
 */
typedef struct RpEvaluator RpEvaluator;

/*
 Sparse painted voxel map.
 */
typedef struct RpVoxelMap RpVoxelMap;

typedef struct RpIntrinsics {
  double fx;
  double fy;
  double cx;
  double cy;
  uint32_t width;
  uint32_t height;
} RpIntrinsics;

typedef struct RpDetection {
  uint32_t x;
  uint32_t y;
  double confidence;
} RpDetection;

/*
 Evaluation settings; [`rp_eval_params_default`] fills the published
 defaults.
 */
typedef struct RpEvalParams {
  double eps_floor_m;
  double eps_rel;
  uint32_t max_detections;
  double nms_radius;
  uint32_t max_distance;
} RpEvalParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null. Valid until the
 next call into the library on the same thread.
 */
const char *rp_last_error_message(void);

/*
 Loads an `R3DV` snapshot.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum RpStatus rp_voxel_map_load(const char *path, struct RpVoxelMap **out);

/*
 Builds a map with the given occupied cells (`3 * count` integers).

 # Safety
 `cells` must hold `3 * count` values; `out` must be writable.
 */
enum RpStatus rp_voxel_map_from_cells(double resolution,
                                      const int32_t *cells,
                                      size_t count,
                                      struct RpVoxelMap **out);

/*
 # Safety
 `path` must be a NUL-terminated string.
 */
enum RpStatus rp_voxel_map_save(const struct RpVoxelMap *map, const char *path);

/*
 # Safety
 `map` must come from this library and not have been freed; null is a no-op.
 */
void rp_voxel_map_free(struct RpVoxelMap *map);

/*
 Number of occupied cells; 0 for null.

 # Safety
 `map` must be null or a live handle.
 */
size_t rp_voxel_map_len(const struct RpVoxelMap *map);

/*
 Sum of painted confidence over all cells.

 # Safety
 `map` must be null or a live handle.
 */
double rp_voxel_map_total_score(const struct RpVoxelMap *map);

/*
 Paints one frame-detector set. Confidences are replaced by `1/count`
 before painting. Either output pointer may be null.

 # Safety
 `pose` must hold 16 values and `dets` `count` entries.
 */
enum RpStatus rp_voxel_map_paint(const struct RpVoxelMap *map,
                                 const struct RpIntrinsics *intr,
                                 const double *pose,
                                 const struct RpDetection *dets,
                                 size_t count,
                                 double max_range,
                                 size_t *painted,
                                 size_t *missed);

/*
 Counts one view for every distinct cell seen by every `stride`-th pixel.

 # Safety
 `pose` must hold 16 values.
 */
enum RpStatus rp_voxel_map_observe(const struct RpVoxelMap *map,
                                   const struct RpIntrinsics *intr,
                                   const double *pose,
                                   double max_range,
                                   uint32_t stride);

/*
 Score and view count of the first occupied cell along a ray; `Miss`
 when nothing is hit.

 # Safety
 `origin` and `direction` must hold 3 values; outputs must be writable.
 */
enum RpStatus rp_voxel_map_query(const struct RpVoxelMap *map,
                                 const double *origin,
                                 const double *direction,
                                 double max_range,
                                 double *score,
                                 uint32_t *views);

struct RpEvalParams rp_eval_params_default(void);

/*
 # Safety
 `intr` and `params` must be readable; `out` writable.
 */
enum RpStatus rp_evaluator_new(const struct RpIntrinsics *intr,
                               const struct RpEvalParams *params,
                               struct RpEvaluator **out);

/*
 # Safety
 `ev` must come from this library and not have been freed; null is a no-op.
 */
void rp_evaluator_free(struct RpEvaluator *ev);

/*
 Histogram of one (query, candidate) pair. Both detection lists are
 suppressed and capped first. `bins` receives `max_distance + 1` counts,
 the last being the unmatched bin; `visible` the number of visible
 queries.

 # Safety
 Poses hold 16 values, depth maps `width * height` values (meters, 0 =
 invalid), detection arrays their counts, `bins` `max_distance + 1` slots.
 */
enum RpStatus rp_evaluator_pair(const struct RpEvaluator *ev,
                                const double *query_pose,
                                const float *query_depth,
                                const struct RpDetection *query_dets,
                                size_t query_count,
                                const double *candidate_pose,
                                const float *candidate_depth,
                                const struct RpDetection *candidate_dets,
                                size_t candidate_count,
                                uint64_t *bins,
                                uint64_t *visible);

/*
 Per-pixel rounded distance to the nearest candidate, capped at `max_r`,
 written row-major into `out` (`width * height` bytes).

 # Safety
 `xs` and `ys` hold `count` values; `out` has `width * height` bytes.
 */
enum RpStatus rp_distance_map(const uint32_t *xs,
                              const uint32_t *ys,
                              size_t count,
                              uint32_t width,
                              uint32_t height,
                              uint8_t max_r,
                              uint8_t *out);

/*
 # Safety
 `out` must be writable.
 */
enum RpStatus rp_aggregator_new(uint32_t max_distance, struct RpAggregator **out);

/*
 # Safety
 `agg` must come from this library and not have been freed; null is a no-op.
 */
void rp_aggregator_free(struct RpAggregator *agg);

/*
 Adds one pair histogram (`max_distance + 1` bins as produced by
 [`rp_evaluator_pair`]). Rejects histograms whose bins do not sum to
 `visible`.

 # Safety
 `bins` holds `max_distance + 1` values.
 */
enum RpStatus rp_aggregator_add(struct RpAggregator *agg, const uint64_t *bins, uint64_t visible);

/*
 Number of histograms added so far; 0 for null.

 # Safety
 `agg` must be null or a live handle.
 */
size_t rp_aggregator_len(const struct RpAggregator *agg);

/*
 Mean count and mean percentage per bin (`max_distance + 1` each, last
 is unmatched). Either output may be null.

 # Safety
 Non-null outputs hold `max_distance + 1` values.
 */
enum RpStatus rp_aggregator_report(const struct RpAggregator *agg,
                                   double *mean_count,
                                   double *mean_percent);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REPEATABILITY_H */
