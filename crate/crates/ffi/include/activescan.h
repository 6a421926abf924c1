#ifndef ACTIVESCAN_H
#define ACTIVESCAN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every exported function.
 */
typedef enum AsStatus {
  AS_OK = 0,
  AS_REJECTED_INPUT = 1,
  AS_MODEL_STATE = 2,
  AS_NUMERICAL = 3,
  AS_TRAINING = 4,
  AS_CONFIG = 5,
  AS_IO = 6,
  AS_TENSOR = 7,
  AS_NULL_POINTER = 8,
  AS_BUFFER_TOO_SMALL = 9,
  AS_PANIC = 10,
} AsStatus;

/**
 * Polar grid geometry.
 */
typedef struct AsGrid AsGrid;

/**
 * Loaded decoder/encoder pair plus the policy state of one acquisition.
 */
typedef struct AsSession AsSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Static description of a status code. Never null.
 */
const char *as_status_name(enum AsStatus status);

/**
 * Length in bytes of the last error message on this thread, without the NUL.
 */
size_t as_last_error_length(void);

/**
 * Copy the last error message into `buf` (truncated, always NUL-terminated
 * when `cap > 0`). Returns the full message length.
 *
 * # Safety
 * `buf` must point to `cap` writable bytes or be null with `cap == 0`.
 */
size_t as_last_error_message(char *buf, size_t cap);

/**
 * Create a grid. Angles in radians, `r_max` and image sizes in Cartesian pixels.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum AsStatus as_grid_new(size_t n_r,
                          size_t n_gamma,
                          double gamma_min,
                          double gamma_max,
                          double r_max,
                          size_t cart_h,
                          size_t cart_w,
                          struct AsGrid **out);

/**
 * Create the default 64 x 64 grid.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum AsStatus as_grid_default(struct AsGrid **out);

/**
 * # Safety
 * `grid` must come from `as_grid_new`/`as_grid_default`/`as_session_grid` and not be freed twice.
 */
void as_grid_free(struct AsGrid *grid);

/**
 * Dimensions of a grid. Any output pointer may be null.
 *
 * # Safety
 * `grid` must be a live handle.
 */
enum AsStatus as_grid_shape(const struct AsGrid *grid,
                            size_t *n_r,
                            size_t *n_gamma,
                            size_t *cart_h,
                            size_t *cart_w);

/**
 * Scan-convert a polar frame onto the Cartesian raster.
 *
 * # Safety
 * Buffers must hold the stated number of `f64`s.
 */
enum AsStatus as_polar_to_cartesian(const struct AsGrid *grid,
                                    const double *polar,
                                    size_t polar_len,
                                    double *out,
                                    size_t out_len);

/**
 * Resample a Cartesian image onto the polar grid.
 *
 * # Safety
 * Buffers must hold the stated number of `f64`s.
 */
enum AsStatus as_cartesian_to_polar(const struct AsGrid *grid,
                                    const double *image,
                                    size_t image_len,
                                    double *out,
                                    size_t out_len);

/**
 * Pick `lines` scan lines maximising the summed per-line `scores`, no two
 * selected lines closer than `exclusion_radius + 1`. Writes the sorted line
 * indices to `out_lines`.
 *
 * # Safety
 * `scores` must hold `n_gamma` values and `out_lines` at least `out_cap`.
 */
enum AsStatus as_trace_policy(const double *scores,
                              size_t n_gamma,
                              size_t lines,
                              size_t exclusion_radius,
                              size_t *out_lines,
                              size_t out_cap);

/**
 * Load a decoder and an encoder checkpoint and set up a policy by name
 * (`covariance`, `trace`, `uniform`, `variable_density`, `equispaced`, `full`).
 * `noise_std` is the channel noise the policies assume.
 *
 * # Safety
 * Strings must be NUL-terminated; `out` must be a valid handle slot.
 */
enum AsStatus as_session_open(const char *generative_path,
                              const char *inference_path,
                              const char *policy,
                              size_t lines,
                              double noise_std,
                              uint64_t seed,
                              struct AsSession **out);

/**
 * # Safety
 * `session` must come from `as_session_open` and not be freed twice.
 */
void as_session_free(struct AsSession *session);

/**
 * Copy of the session's polar grid, to be freed with `as_grid_free`.
 *
 * # Safety
 * `session` must be live and `out` a valid handle slot.
 */
enum AsStatus as_session_grid(const struct AsSession *session, struct AsGrid **out);

/**
 * Number of lines the session acquires per frame.
 *
 * # Safety
 * `session` must be live; `lines` valid.
 */
enum AsStatus as_session_lines(const struct AsSession *session, size_t *lines);

/**
 * Restart the acquisition and write the mask for the first frame.
 *
 * # Safety
 * `session` must be live; `out_lines` must hold `out_cap` values.
 */
enum AsStatus as_session_reset(struct AsSession *session,
                               size_t *out_lines,
                               size_t out_cap,
                               size_t *out_len);

/**
 * One acquisition step. `measured` holds the acquired columns, row-major
 * `n_r x n_lines`, column `k` belonging to `mask_lines[k]` (sorted,
 * distinct). Writes the polar reconstruction (`n_r x n_gamma`) and the
 * lines to acquire next.
 *
 * # Safety
 * Buffers must hold the stated number of elements; `next_len` must be valid.
 */
enum AsStatus as_session_step(struct AsSession *session,
                              const size_t *mask_lines,
                              size_t n_lines,
                              const double *measured,
                              size_t measured_len,
                              double *recon,
                              size_t recon_len,
                              size_t *next_lines,
                              size_t next_cap,
                              size_t *next_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ACTIVESCAN_H */
