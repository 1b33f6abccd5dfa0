#ifndef SEBSFV_H
#define SEBSFV_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code of every call.
 */
typedef enum SbfvStatus {
  SBFV_STATUS_OK = 0,
  SBFV_STATUS_NULL_POINTER = 1,
  SBFV_STATUS_INVALID_ARGUMENT = 2,
  SBFV_STATUS_IO = 3,
  SBFV_STATUS_FORMAT = 4,
  SBFV_STATUS_NUMERICAL = 5,
  SBFV_STATUS_BUFFER_TOO_SMALL = 6,
  SBFV_STATUS_PANIC = 7,
} SbfvStatus;

/**
 * Opaque frame sequence.
 */
typedef struct SbfvVideo SbfvVideo;

/**
 * Pipeline settings; obtain defaults from [`sbfv_config_default`].
 */
typedef struct SbfvConfig {
  size_t chunk;
  size_t k;
  double eta;
  /**
   * 0 selects the rank automatically.
   */
  size_t rank;
  double forgetting;
  bool carry_state;
  bool swap_roles;
  uint64_t seed;
} SbfvConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *sbfv_version(void);

/**
 * Copies the calling thread's last error message (NUL-terminated, truncated
 * to `len`) into `buf` and returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t sbfv_last_error(char *buf, size_t len);

struct SbfvConfig sbfv_config_default(void);

/**
 * Loads a directory of PGM frames (with optional `.mask.pgm` companions).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SbfvStatus sbfv_video_load_dir(const char *path, struct SbfvVideo **out);

/**
 * Builds a video from `width * height * frames` column-major intensities.
 * `valid` may be null (all pixels valid) or point to as many bytes, non-zero
 * meaning valid.
 *
 * # Safety
 * `data` (and `valid` when non-null) must point to `width * height * frames`
 * readable elements; `out` must be writable.
 */
enum SbfvStatus sbfv_video_from_frames(size_t width,
                                       size_t height,
                                       size_t frames,
                                       const double *data,
                                       const uint8_t *valid,
                                       struct SbfvVideo **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `video` must come from this library and not be used afterwards.
 */
void sbfv_video_free(struct SbfvVideo *video);

/**
 * # Safety
 * `video` must be a live handle; output pointers may be null.
 */
enum SbfvStatus sbfv_video_dims(const struct SbfvVideo *video,
                                size_t *width,
                                size_t *height,
                                size_t *frames);

/**
 * Copies the column-major intensities into `out` (`len` elements).
 * Invalid pixels are copied as stored.
 *
 * # Safety
 * `video` must be a live handle; `out` must point to `len` writable doubles.
 */
enum SbfvStatus sbfv_video_copy_data(const struct SbfvVideo *video, double *out, size_t len);

/**
 * Copies the validity mask (1 valid, 0 invalid) into `out` (`len` bytes).
 *
 * # Safety
 * `video` must be a live handle; `out` must point to `len` writable bytes.
 */
enum SbfvStatus sbfv_video_copy_mask(const struct SbfvVideo *video, uint8_t *out, size_t len);

/**
 * Writes the video as numbered PGM frames into `dir`.
 *
 * # Safety
 * `video` must be a live handle; `dir` a NUL-terminated string.
 */
enum SbfvStatus sbfv_video_save_dir(const struct SbfvVideo *video, const char *dir);

/**
 * Registers every frame to the first frame of its `chunk`.
 *
 * # Safety
 * `video` must be a live handle; `out` must be writable.
 */
enum SbfvStatus sbfv_register(const struct SbfvVideo *video, size_t chunk, struct SbfvVideo **out);

/**
 * Streaming enhancement followed by the per-chunk ADMM clean-up. `config`
 * may be null for defaults.
 *
 * # Safety
 * `video` must be a live handle; `config` null or valid; `out` writable.
 */
enum SbfvStatus sbfv_enhance(const struct SbfvVideo *video,
                             const struct SbfvConfig *config,
                             struct SbfvVideo **out);

/**
 * Shannon entropy in bits of the quantized valid pixels of one frame.
 *
 * # Safety
 * `video` must be a live handle; `out` must be writable.
 */
enum SbfvStatus sbfv_entropy(const struct SbfvVideo *video, size_t frame, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEBSFV_H */
