/* SPDX-License-Identifier: Apache-2.0 */

#ifndef NV_COHERENCE_H
#define NV_COHERENCE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum nvc_status {
  NVC_STATUS_OK = 0,
  NVC_STATUS_NULL_POINTER = 1,
  NVC_STATUS_CONFIG = 2,
  NVC_STATUS_NUMERICAL = 3,
  NVC_STATUS_UNRESOLVED = 4,
  NVC_STATUS_PANIC = 5,
  NVC_STATUS_BUFFER_TOO_SMALL = 6,
} nvc_status;

/**
 * Decay-time estimators accepted by [`nvc_decay_time`].
 */
typedef enum nvc_decay_method {
  NVC_DECAY_METHOD_ONE_OVER_E = 0,
  NVC_DECAY_METHOD_STRETCHED_FIT = 1,
} nvc_decay_method;

/**
 * Opaque simulation handle.
 */
typedef struct nvc_simulation nvc_simulation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Creates a simulation from a NUL-terminated JSON run configuration.
 *
 * # Safety
 * `json` must be a valid NUL-terminated string and `out` a valid pointer.
 * On success `*out` owns a handle that must be released with
 * [`nvc_simulation_free`].
 */
enum nvc_status nvc_simulation_from_json(const char *json, struct nvc_simulation **out);

/**
 * Releases a handle. Null is accepted.
 *
 * # Safety
 * `sim` must come from [`nvc_simulation_from_json`] and not be used afterwards.
 */
void nvc_simulation_free(struct nvc_simulation *sim);

/**
 * Number of nuclear spins in the simulation.
 *
 * # Safety
 * `sim` must be a live handle or null (which yields 0).
 */
size_t nvc_simulation_spin_count(const struct nvc_simulation *sim);

/**
 * Ramsey coherence `L(t)` at the configured field, written to `re_out` and
 * `im_out` (each of length `n`). Times in µs, ascending, starting at 0.
 *
 * # Safety
 * `times`, `re_out` and `im_out` must point to `n` doubles.
 */
enum nvc_status nvc_run_ramsey(const struct nvc_simulation *sim,
                               const double *times,
                               size_t n,
                               double *re_out,
                               double *im_out);

/**
 * Hahn-echo coherence `L(τ)`; `times` holds the total free evolution time.
 *
 * # Safety
 * As for [`nvc_run_ramsey`].
 */
enum nvc_status nvc_run_hahn_echo(const struct nvc_simulation *sim,
                                  const double *times,
                                  size_t n,
                                  double *re_out,
                                  double *im_out);

/**
 * Decay time of the configured protocol on a `[0, window]` grid of
 * `points` samples. Returns [`NvcStatus::Unresolved`] when the coherence
 * does not decay far enough inside the window.
 *
 * # Safety
 * `sim` must be a live handle and `t_out` a valid pointer.
 */
enum nvc_status nvc_decay_time(const struct nvc_simulation *sim,
                               double window_us,
                               size_t points,
                               enum nvc_decay_method method,
                               double *t_out);

/**
 * Clock transitions of the core system along the configured field
 * direction, scanning `b0` over `[b0_start, b0_stop]` with `points` samples.
 * Positions (G) go to `b0_out`; `*count_out` receives the number found. If
 * `capacity` is too small, nothing is written except `*count_out` and
 * [`NvcStatus::BufferTooSmall`] is returned.
 *
 * # Safety
 * `b0_out` must hold `capacity` doubles (may be null when `capacity` is 0);
 * `count_out` must be valid.
 */
enum nvc_status nvc_clock_transitions(const struct nvc_simulation *sim,
                                      double b0_start,
                                      double b0_stop,
                                      size_t points,
                                      double *b0_out,
                                      size_t capacity,
                                      size_t *count_out);

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *nvc_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *nvc_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NV_COHERENCE_H */
