/* C interface for the recon multi-view reconstruction library. */

#ifndef RECON_H
#define RECON_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum ReconStatus {
  /**
   * Success.
   */
  RECON_STATUS_OK = 0,
  /**
   * A null handle, null buffer, or out-of-range argument.
   */
  RECON_STATUS_INVALID_ARGUMENT = 1,
  /**
   * The file could not be read or parsed.
   */
  RECON_STATUS_IO_ERROR = 2,
  /**
   * The operation itself failed.
   */
  RECON_STATUS_RUNTIME_ERROR = 3,
} ReconStatus;

/**
 * Opaque pinhole camera.
 */
typedef struct ReconCamera ReconCamera;

/**
 * Opaque point cloud.
 */
typedef struct ReconCloud ReconCloud;

/**
 * Opaque trained voxel-SDF grid.
 */
typedef struct ReconGrid ReconGrid;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *recon_last_error(void);

/**
 * Load a grid checkpoint (`.sdfg`) from disk.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be a valid pointer.
 */
enum ReconStatus recon_grid_load(const char *path, struct ReconGrid **out);

/**
 * Release a grid handle. Null is ignored.
 *
 * # Safety
 * `grid` must come from `recon_grid_load` and not be freed twice.
 */
void recon_grid_free(struct ReconGrid *grid);

/**
 * Grid resolution (vertices per axis).
 *
 * # Safety
 * All pointers must be valid.
 */
enum ReconStatus recon_grid_resolution(const struct ReconGrid *grid,
                                       uint32_t *nx,
                                       uint32_t *ny,
                                       uint32_t *nz);

/**
 * Density scale beta of the grid.
 *
 * # Safety
 * `grid` must be a valid handle (null returns NaN).
 */
double recon_grid_beta(const struct ReconGrid *grid);

/**
 * Trilinearly interpolated signed distance at a world point. Points
 * outside the grid bounds return the forced exterior value.
 *
 * # Safety
 * `grid` and `out_sdf` must be valid pointers.
 */
enum ReconStatus recon_grid_sdf_at(const struct ReconGrid *grid,
                                   double x,
                                   double y,
                                   double z,
                                   double *out_sdf);

/**
 * Load a camera from its JSON description.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be a valid pointer.
 */
enum ReconStatus recon_camera_load(const char *path, struct ReconCamera **out);

/**
 * Release a camera handle. Null is ignored.
 *
 * # Safety
 * `camera` must come from `recon_camera_load` and not be freed twice.
 */
void recon_camera_free(struct ReconCamera *camera);

/**
 * Image size of a camera.
 *
 * # Safety
 * All pointers must be valid.
 */
enum ReconStatus recon_camera_size(const struct ReconCamera *camera,
                                   uint32_t *width,
                                   uint32_t *height);

/**
 * Render an expected-depth map from the grid into `out_depth`
 * (row-major, `width * height` floats; invalid pixels are 0).
 *
 * # Safety
 * `out_depth` must point to at least `len` floats.
 */
enum ReconStatus recon_render_depth(const struct ReconGrid *grid,
                                    const struct ReconCamera *camera,
                                    uint32_t n_samples,
                                    double depth_min,
                                    double depth_max,
                                    float *out_depth,
                                    uintptr_t len);

/**
 * Load a binary PLY point cloud.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be a valid pointer.
 */
enum ReconStatus recon_cloud_load(const char *path, struct ReconCloud **out);

/**
 * Release a point-cloud handle. Null is ignored.
 *
 * # Safety
 * `cloud` must come from `recon_cloud_load` and not be freed twice.
 */
void recon_cloud_free(struct ReconCloud *cloud);

/**
 * Number of points in a cloud (0 for a null handle).
 *
 * # Safety
 * `cloud` must be a valid handle or null.
 */
uintptr_t recon_cloud_len(const struct ReconCloud *cloud);

/**
 * Symmetric Chamfer distance between two clouds: accuracy (a -> b),
 * completeness (b -> a), and their mean.
 *
 * # Safety
 * All pointers must be valid.
 */
enum ReconStatus recon_chamfer(const struct ReconCloud *a,
                               const struct ReconCloud *b,
                               double *out_accuracy,
                               double *out_completeness,
                               double *out_mean);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RECON_H */
