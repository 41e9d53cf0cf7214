#ifndef GEOSEG_H
#define GEOSEG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum GsStatus {
  GS_STATUS_OK = 0,
  GS_STATUS_NULL_POINTER = 1,
  GS_STATUS_INVALID_ARGUMENT = 2,
  GS_STATUS_SHAPE = 3,
  GS_STATUS_NON_FINITE = 4,
  GS_STATUS_IO = 5,
  GS_STATUS_FORMAT = 6,
  // A metric is undefined for the inputs (for example an empty surface).
  GS_STATUS_UNDEFINED = 7,
  GS_STATUS_INTERNAL = 8,
} GsStatus;

// Opaque trained network.
typedef struct GsNetwork GsNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the next failing call.
const char *gs_last_error_message(void);

// Loads a checkpoint file. On success `*out` owns a new handle.
//
// # Safety
// `path` must be a nul-terminated string and `out` a valid pointer.
enum GsStatus gs_network_load(const char *path, struct GsNetwork **out);

// Releases a handle from `gs_network_load`. Null is ignored.
//
// # Safety
// `net` must come from `gs_network_load` and not be used afterwards.
void gs_network_free(struct GsNetwork *net);

// Number of spatial axes the network expects.
//
// # Safety
// Pointers must be valid.
enum GsStatus gs_network_spatial_rank(const struct GsNetwork *net, size_t *out);

// Foreground probabilities from tiled inference. `window` and `stride` have
// `rank` entries; `out` holds as many values as `image`.
//
// # Safety
// Arrays must be valid for the sizes implied by `shape` and `rank`.
enum GsStatus gs_sliding_window(const struct GsNetwork *net,
                                const double *image,
                                const size_t *shape,
                                size_t rank,
                                const size_t *window,
                                const size_t *stride,
                                double *out);

// Single forward pass over the whole volume (extents must suit the network).
//
// # Safety
// Arrays must be valid for the sizes implied by `shape` and `rank`.
enum GsStatus gs_network_predict(const struct GsNetwork *net,
                                 const double *image,
                                 const size_t *shape,
                                 size_t rank,
                                 double *out);

// Signed distance map of a binary mask (values 0 or 1). With `normalize`
// non-zero the map is scaled into `[-1, 1]`. `degenerate` may be null.
//
// # Safety
// Arrays must be valid for the sizes implied by `shape` and `rank`.
enum GsStatus gs_signed_distance_map(const uint8_t *mask,
                                     const size_t *shape,
                                     size_t rank,
                                     int normalize,
                                     double *out,
                                     int *degenerate);

// `exp(-rho |d|)` for `n` distances.
//
// # Safety
// `sdm` and `out` must hold `n` values.
enum GsStatus gs_boundary_weights(const double *sdm, size_t n, double rho, double *out);

// Logistic map of distances to foreground probability; `literal` non-zero uses
// `sigma(k z)`, otherwise `sigma(-k z)`.
//
// # Safety
// `z` and `out` must hold `n` values.
enum GsStatus gs_approx_inverse(const double *z, size_t n, double k, int literal, double *out);

// Dice and Jaccard overlap of two binary masks of the same shape.
//
// # Safety
// Arrays must be valid for the sizes implied by `shape` and `rank`.
enum GsStatus gs_dice_jaccard(const uint8_t *pred,
                              const uint8_t *truth,
                              const size_t *shape,
                              size_t rank,
                              double *dice,
                              double *jaccard);

// Symmetric average and 95th-percentile surface distances in voxels.
// Returns `Undefined` when either mask has no surface.
//
// # Safety
// Arrays must be valid for the sizes implied by `shape` and `rank`.
enum GsStatus gs_surface_distances(const uint8_t *pred,
                                   const uint8_t *truth,
                                   const size_t *shape,
                                   size_t rank,
                                   double *asd,
                                   double *hd95);

// Consistency weight `lambda_max * exp(-5 (1 - t / t_max)^power)`.
double gs_ramp_up(size_t t, size_t t_max, double lambda_max, uint32_t power);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GEOSEG_H */
