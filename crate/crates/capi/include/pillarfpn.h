#ifndef PILLARFPN_H
#define PILLARFPN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum PfpnStatus {
  PFPN_STATUS_OK = 0,
  PFPN_STATUS_INVALID_ARGUMENT = 1,
  PFPN_STATUS_IO_ERROR = 2,
  PFPN_STATUS_INTERNAL = 3,
} PfpnStatus;

/**
 * Opaque detector handle.
 */
typedef struct PfpnDetector PfpnDetector;

/**
 * One detection in the LIDAR frame. Sizes are full extents in meters,
 * yaw in radians about +z.
 */
typedef struct PfpnDetection {
  double x;
  double y;
  double z;
  double w;
  double l;
  double h;
  double yaw;
  double score;
  int32_t class_id;
} PfpnDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Create a detector. `config_json` may be null (desk preset defaults) or
 * point to a NUL-terminated experiment-config JSON document. On success
 * writes the handle to `out` and returns Ok.
 *
 * # Safety
 * `out` must be a valid pointer; `config_json`, when non-null, must be a
 * valid NUL-terminated string.
 */
enum PfpnStatus pfpn_detector_new(const char *config_json, struct PfpnDetector **out);

/**
 * Load checkpoint weights into the detector.
 *
 * # Safety
 * `detector` must come from `pfpn_detector_new`; `path` must be a valid
 * NUL-terminated string.
 */
enum PfpnStatus pfpn_detector_load_checkpoint(struct PfpnDetector *detector, const char *path);

/**
 * Run inference over a packed (x, y, z, reflectance) f32 point array.
 * At most `capacity` detections are written to `detections`; the total
 * produced is stored in `n_out` (callers can re-invoke with a larger
 * buffer if `*n_out > capacity`).
 *
 * # Safety
 * `points` must hold `4 * n_points` f32 values; `detections` must hold
 * `capacity` entries; `n_out` must be valid.
 */
enum PfpnStatus pfpn_detector_infer(struct PfpnDetector *detector,
                                    const float *points,
                                    uintptr_t n_points,
                                    struct PfpnDetection *detections,
                                    uintptr_t capacity,
                                    uintptr_t *n_out);

/**
 * Last error message recorded on this handle, or null. The pointer is
 * valid until the next failing call on the same handle.
 *
 * # Safety
 * `detector` must come from `pfpn_detector_new`.
 */
const char *pfpn_last_error(const struct PfpnDetector *detector);

/**
 * Destroy a detector handle. Null is a no-op.
 *
 * # Safety
 * `detector` must come from `pfpn_detector_new` and not be used after.
 */
void pfpn_detector_free(struct PfpnDetector *detector);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PILLARFPN_H */
