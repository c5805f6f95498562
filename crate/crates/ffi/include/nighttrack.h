#ifndef NIGHTTRACK_H
#define NIGHTTRACK_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum NtStatus {
  NT_STATUS_OK = 0,
  NT_STATUS_NULL_POINTER = 1,
  NT_STATUS_INVALID_ARGUMENT = 2,
  NT_STATUS_IO = 3,
  NT_STATUS_RUNTIME = 4,
  NT_STATUS_PANIC = 5,
} NtStatus;

/**
 * Opaque tracker: weights plus the state of the sequence being tracked.
 */
typedef struct NtTracker NtTracker;

/**
 * Box as center and size.
 */
typedef struct NtBox {
  double cx;
  double cy;
  double w;
  double h;
} NtBox;

typedef struct NtMetrics {
  double precision;
  double norm_precision;
  double success;
  double mean_iou;
} NtMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (always NUL
 * terminated when `len > 0`). Returns the full message length in bytes,
 * excluding the terminator.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t nt_last_error_message(char *buf, size_t len);

/**
 * Loads a tracker from a directory written by training (`checkpoint/`
 * or the run directory that contains it).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum NtStatus nt_tracker_load(const char *path, struct NtTracker **out);

/**
 * Releases a tracker. Null is ignored.
 *
 * # Safety
 * `tracker` must come from [`nt_tracker_load`] and not be used afterwards.
 */
void nt_tracker_free(struct NtTracker *tracker);

/**
 * Starts a sequence. `frame` is planar RGB (`3 × height × width`, values
 * in `[0, 1]`); `init` is the target box in pixels.
 *
 * # Safety
 * `tracker` must be live; `frame` must hold `3 * height * width` floats.
 */
enum NtStatus nt_tracker_start(struct NtTracker *tracker,
                               const float *frame,
                               size_t height,
                               size_t width,
                               struct NtBox init);

/**
 * Tracks one more frame and writes the box (pixels) to `out`.
 *
 * # Safety
 * As for [`nt_tracker_start`]; `out` must be writable.
 */
enum NtStatus nt_tracker_update(struct NtTracker *tracker,
                                const float *frame,
                                size_t height,
                                size_t width,
                                struct NtBox *out);

/**
 * Curriculum sampling ratios for `count` datasets at `epoch`.
 * `is_night[i] != 0` marks night datasets.
 *
 * # Safety
 * `sizes`, `is_night` and `out` must each hold `count` values.
 */
enum NtStatus nt_sampling_ratios(const uint64_t *sizes,
                                 const uint8_t *is_night,
                                 size_t count,
                                 size_t epoch,
                                 double theta,
                                 double *out);

/**
 * `ω = ln(N_max / N_j) + 0.5`.
 *
 * # Safety
 * `out` must be writable.
 */
enum NtStatus nt_omega_weight(uint64_t n_max, uint64_t n_j, double *out);

/**
 * Mean ADB loss over `n` samples.
 *
 * # Safety
 * `u` and `omega` must hold `n` values; `out` must be writable.
 */
enum NtStatus nt_adb_loss(const double *u, const double *omega, size_t n, double *out);

/**
 * Precision@20px, normalized precision and success for one trajectory.
 * Boxes are normalized to a `width × height` frame.
 *
 * # Safety
 * `pred` and `gt` must hold `n` boxes; `out` must be writable.
 */
enum NtStatus nt_compute_metrics(const struct NtBox *pred,
                                 const struct NtBox *gt,
                                 size_t n,
                                 double width,
                                 double height,
                                 struct NtMetrics *out);

/**
 * Multiplies an `s × s` score map by the separable Hanning window.
 *
 * # Safety
 * `cls` and `out` must hold `s * s` values.
 */
enum NtStatus nt_hanning_penalty(const double *cls, size_t s, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NIGHTTRACK_H */
