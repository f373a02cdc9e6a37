#ifndef CITYFABRIC_H
#define CITYFABRIC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CfPolicy {
  CF_POLICY_BEST_FIT = 0,
  CF_POLICY_WORST_FIT = 1,
} CfPolicy;

typedef enum CfStatus {
  CF_STATUS_OK = 0,
  CF_STATUS_NULL_POINTER = 1,
  CF_STATUS_INVALID_ARGUMENT = 2,
  CF_STATUS_PARSE_ERROR = 3,
  CF_STATUS_CAPACITY_EXHAUSTED = 4,
  CF_STATUS_UNKNOWN_STREAM = 5,
  CF_STATUS_ALREADY_PLACED = 6,
  CF_STATUS_BUFFER_TOO_SMALL = 7,
  CF_STATUS_PANIC = 99,
} CfStatus;

/**
 * A coarsened road graph.
 */
typedef struct CfGraph CfGraph;

/**
 * A device fleet and the streams placed on it.
 */
typedef struct CfScheduler CfScheduler;

/**
 * Fleet-level figures for the current placement.
 */
typedef struct CfMetrics {
  double active_capacity_tops;
  double utilization_pct;
  double total_power_w;
  uint64_t cumulative_fps;
  uint32_t active_devices;
  double max_device_utilization_pct;
} CfMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null if it succeeded.
 * The pointer stays valid until the next call on the same thread.
 */
const char *cf_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cf_version(void);

/**
 * Scheduler over the default testbed of five 200-FPS and four 400-FPS devices.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum CfStatus cf_scheduler_new_default(struct CfScheduler **out);

/**
 * Scheduler over a JSON array of devices, each
 * `{"id", "model", "fps_capacity", "tops", "power_idle_w", "power_per_fps_w"}`.
 *
 * # Safety
 * `devices_json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CfStatus cf_scheduler_new(const char *devices_json, struct CfScheduler **out);

/**
 * # Safety
 * `h` must be null or a handle from `cf_scheduler_new*` not yet freed.
 */
void cf_scheduler_free(struct CfScheduler *h);

/**
 * Number of devices; devices are indexed `0..n` in id order.
 *
 * # Safety
 * `h` must be a live handle and `out` a valid pointer.
 */
enum CfStatus cf_scheduler_device_count(const struct CfScheduler *h, size_t *out);

/**
 * Copies the id of device `index` into `buf` as a NUL-terminated string.
 * `BufferTooSmall` leaves `buf` untouched.
 *
 * # Safety
 * `h` must be a live handle and `buf` valid for `len` bytes.
 */
enum CfStatus cf_scheduler_device_id(const struct CfScheduler *h,
                                     uint32_t index,
                                     char *buf,
                                     size_t len);

/**
 * Places `stream` with `fps` under `policy`; writes the chosen device index.
 *
 * # Safety
 * `h` must be a live handle; `device_out` may be null.
 */
enum CfStatus cf_scheduler_assign(struct CfScheduler *h,
                                  uint32_t stream,
                                  uint32_t fps,
                                  enum CfPolicy policy,
                                  uint32_t *device_out);

/**
 * # Safety
 * `h` must be a live handle.
 */
enum CfStatus cf_scheduler_remove(struct CfScheduler *h, uint32_t stream);

/**
 * # Safety
 * `h` must be a live handle and `out` a valid pointer.
 */
enum CfStatus cf_scheduler_metrics(const struct CfScheduler *h, struct CfMetrics *out);

/**
 * Coarsens a road graph given as `{"vertices": [{"id", "camera"}], "edges": [[a, b]]}`.
 *
 * # Safety
 * `road_json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CfStatus cf_graph_from_json(const char *road_json, struct CfGraph **out);

/**
 * # Safety
 * `g` must be null or a handle from `cf_graph_from_json` not yet freed.
 */
void cf_graph_free(struct CfGraph *g);

/**
 * Coarse vertex and super-edge counts.
 *
 * # Safety
 * `g` must be a live handle; the out pointers must be valid.
 */
enum CfStatus cf_graph_size(const struct CfGraph *g, size_t *vertices, size_t *edges);

/**
 * Splits per-vertex counts over super-edges. `counts` has one entry per
 * coarse vertex, `flows_out` one per super-edge; counts at vertices without
 * super-edges go to `residue_out`.
 *
 * # Safety
 * `g` must be a live handle and the arrays valid for the given lengths.
 */
enum CfStatus cf_graph_allocate(const struct CfGraph *g,
                                const double *counts,
                                size_t n_counts,
                                double *flows_out,
                                size_t n_flows,
                                double *residue_out);

/**
 * Congestion state of a flow: 0 free flow, 1 moderate, 2 heavy.
 *
 * # Safety
 * `state_out` must be a valid pointer.
 */
enum CfStatus cf_discretize(double flow, double t1, double t2, uint8_t *state_out);

/**
 * Sample-weighted average of `k` weight vectors of length `dim`, stored
 * row-major in `weights`. Clients with zero samples carry no weight.
 *
 * # Safety
 * `weights` must hold `k * dim` values, `n_samples` `k` values and `out` `dim` values.
 */
enum CfStatus cf_fedavg(const double *weights,
                        const uint64_t *n_samples,
                        size_t k,
                        size_t dim,
                        double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CITYFABRIC_H */
