#ifndef MGMAR_H
#define MGMAR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MgmarStatus {
  MGMAR_STATUS_OK = 0,
  MGMAR_STATUS_NULL_POINTER = 1,
  MGMAR_STATUS_INVALID_ARGUMENT = 2,
  MGMAR_STATUS_CONFIG = 3,
  MGMAR_STATUS_MISSING_ARTIFACT = 4,
  MGMAR_STATUS_STRICT_FAILURE = 5,
  MGMAR_STATUS_IO = 6,
  MGMAR_STATUS_INTERNAL = 7,
  MGMAR_STATUS_PANIC = 8,
} MgmarStatus;

/**
 * Opaque pipeline bound to one configuration and output directory.
 */
typedef struct MgmarPipeline MgmarPipeline;

/**
 * Opaque projector for one image/sinogram geometry.
 */
typedef struct MgmarProjector MgmarProjector;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread, or NULL. The pointer
 * stays valid until the next mgmar call on the same thread.
 */
const char *mgmar_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mgmar_version(void);

/**
 * Builds a projector for an `n`×`n` image over `fov_mm`, with a curved fan
 * detector when `fan` is true and parallel beams otherwise.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum MgmarStatus mgmar_projector_new(size_t n,
                                     double fov_mm,
                                     size_t views,
                                     size_t bins,
                                     bool fan,
                                     struct MgmarProjector **out);

/**
 * # Safety
 * `p` must be NULL or a handle from `mgmar_projector_new` not yet freed.
 */
void mgmar_projector_free(struct MgmarProjector *p);

/**
 * Number of image pixels and of sinogram entries (views × bins).
 *
 * # Safety
 * `p` must be a live handle; `n_pixels` and `n_rays` valid for writes.
 */
enum MgmarStatus mgmar_projector_dims(const struct MgmarProjector *p,
                                      size_t *n_pixels,
                                      size_t *n_rays);

/**
 * Line integrals of a row-major image into a view-major sinogram.
 *
 * # Safety
 * `p` must be a live handle; `img` and `sino_out` must hold the given lengths.
 */
enum MgmarStatus mgmar_forward_project(const struct MgmarProjector *p,
                                       const float *img,
                                       size_t img_len,
                                       float *sino_out,
                                       size_t sino_len);

/**
 * Filtered backprojection of a view-major sinogram.
 *
 * # Safety
 * `p` must be a live handle; `sino` and `img_out` must hold the given lengths.
 */
enum MgmarStatus mgmar_fbp(const struct MgmarProjector *p,
                           const float *sino,
                           size_t sino_len,
                           float *img_out,
                           size_t img_len);

/**
 * Metal trace of a binary mask (nonzero bytes are metal): a sinogram-sized
 * array of 0/1 bytes, set where the metal path exceeds `tau_mm`.
 *
 * # Safety
 * `p` must be a live handle; `mask` and `trace_out` must hold the given lengths.
 */
enum MgmarStatus mgmar_metal_trace(const struct MgmarProjector *p,
                                   const uint8_t *mask,
                                   size_t mask_len,
                                   double tau_mm,
                                   uint8_t *trace_out,
                                   size_t trace_len);

/**
 * Prior-normalized interpolation of the traced entries of `sino`.
 *
 * # Safety
 * `p` must be a live handle; the arrays must each hold `sino_len` values.
 */
enum MgmarStatus mgmar_nmar_complete(const struct MgmarProjector *p,
                                     const float *sino,
                                     const float *prior,
                                     const uint8_t *trace,
                                     size_t sino_len,
                                     double eps_floor,
                                     float *out);

/**
 * RMSE, PSNR and SSIM of `img` against `reference`, both `rows`×`cols`.
 * A `data_range` of zero or less uses the range of the reference.
 *
 * # Safety
 * `img` and `reference` must hold `rows * cols` values; the outputs must be
 * valid for writes.
 */
enum MgmarStatus mgmar_image_metrics(const float *img,
                                     const float *reference,
                                     size_t rows,
                                     size_t cols,
                                     double data_range,
                                     double *rmse_out,
                                     double *psnr_out,
                                     double *ssim_out);

/**
 * Loads `config_path` (NULL for the desk preset), then applies `out_dir`
 * and `seed` when given (NULL and a negative seed keep the config values).
 *
 * # Safety
 * Strings must be NULL or NUL-terminated; `out` valid for one write.
 */
enum MgmarStatus mgmar_pipeline_new(const char *config_path,
                                    const char *out_dir,
                                    int64_t seed,
                                    struct MgmarPipeline **out);

/**
 * Applies `section.key=value` overrides to a pipeline's configuration.
 * Several may be given on separate lines; they are validated together and
 * either all apply or none do.
 *
 * # Safety
 * `p` must be a live handle and `assignment` NUL-terminated.
 */
enum MgmarStatus mgmar_pipeline_set(struct MgmarPipeline *p, const char *assignment);

/**
 * # Safety
 * `p` must be NULL or a handle from `mgmar_pipeline_new` not yet freed.
 */
void mgmar_pipeline_free(struct MgmarPipeline *p);

/**
 * # Safety
 * `p` must be a live handle.
 */
enum MgmarStatus mgmar_pipeline_gen_data(const struct MgmarPipeline *p);

/**
 * Trains the prior stages and the residual network; `meta` also trains the
 * meta-learned baseline initialization.
 *
 * # Safety
 * `p` must be a live handle.
 */
enum MgmarStatus mgmar_pipeline_pretrain(const struct MgmarPipeline *p, bool meta);

/**
 * Corrects one case (`case_id`) or the validation split (NULL). `stages` is
 * a comma-separated subset of prior,nmar,residual (NULL for all); a negative
 * `n_iter` keeps the configured refinement length.
 *
 * # Safety
 * `p` must be a live handle; strings NULL or NUL-terminated.
 */
enum MgmarStatus mgmar_pipeline_run(const struct MgmarPipeline *p,
                                    const char *case_id,
                                    const char *stages,
                                    int64_t n_iter);

/**
 * Writes metrics.csv and report.md. With `strict`, a failed ordering check
 * returns `MGMAR_STATUS_STRICT_FAILURE` after the files are written.
 *
 * # Safety
 * `p` must be a live handle; `n_failures` NULL or valid for one write.
 */
enum MgmarStatus mgmar_pipeline_eval(const struct MgmarPipeline *p,
                                     bool strict,
                                     size_t *n_failures);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MGMAR_H */
