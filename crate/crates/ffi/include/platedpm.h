#ifndef PLATEDPM_H
#define PLATEDPM_H

/* Generated with cbindgen:0.27.0 */

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum PdpmStatus {
  PDPM_STATUS_OK = 0,
  PDPM_STATUS_NULL_ARGUMENT = 1,
  PDPM_STATUS_INVALID_ARGUMENT = 2,
  PDPM_STATUS_IO = 3,
  PDPM_STATUS_MODEL_FORMAT = 4,
  PDPM_STATUS_DECODE = 5,
  PDPM_STATUS_PRECONDITION = 6,
  PDPM_STATUS_OUT_OF_RANGE = 7,
  PDPM_STATUS_INTERNAL = 8,
} PdpmStatus;

/**
 * Loaded character models.
 */
typedef struct PdpmModel PdpmModel;

/**
 * One plate reading.
 */
typedef struct PdpmReading PdpmReading;

/**
 * A kept character of a reading, in plate pixel coordinates.
 */
typedef struct PdpmCharacter {
  /**
   * Unicode scalar value of the character.
   */
  uint32_t codepoint;
  double score;
  double x;
  double y;
  double width;
  double height;
} PdpmCharacter;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *pdpm_version(void);

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into the library from the same thread.
 */
const char *pdpm_last_error_message(void);

/**
 * Loads a model file written by `platedpm train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PdpmStatus pdpm_model_load(const char *path, struct PdpmModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`pdpm_model_load`] and not be used afterwards.
 */
void pdpm_model_free(struct PdpmModel *model);

/**
 * Number of character classes in the model, 0 for null.
 *
 * # Safety
 * `model` must be null or a live model handle.
 */
size_t pdpm_model_num_classes(const struct PdpmModel *model);

/**
 * Reads a plate crop given as interleaved `f32` pixels in `[0, 1]` with 1
 * or 3 channels, row-major without padding.
 *
 * # Safety
 * `pixels` must point to `width * height * channels` floats; `model` must
 * be a live handle and `out` a valid pointer.
 */
enum PdpmStatus pdpm_recognize_plate(const struct PdpmModel *model,
                                     const float *pixels,
                                     size_t width,
                                     size_t height,
                                     size_t channels,
                                     double threshold,
                                     struct PdpmReading **out);

/**
 * Decodes a PNG or JPEG plate crop and reads it.
 *
 * # Safety
 * `path` must be a NUL-terminated string, `model` a live handle and `out`
 * a valid pointer.
 */
enum PdpmStatus pdpm_recognize_file(const struct PdpmModel *model,
                                    const char *path,
                                    double threshold,
                                    struct PdpmReading **out);

/**
 * Releases a reading. Null is ignored.
 *
 * # Safety
 * `reading` must come from a recognize call and not be used afterwards.
 */
void pdpm_reading_free(struct PdpmReading *reading);

/**
 * The plate string, owned by the reading. Null for a null handle.
 *
 * # Safety
 * `reading` must be null or a live handle.
 */
const char *pdpm_reading_text(const struct PdpmReading *reading);

/**
 * Number of kept characters.
 *
 * # Safety
 * `reading` must be null or a live handle.
 */
size_t pdpm_reading_len(const struct PdpmReading *reading);

/**
 * False when the digit-position rule could not be satisfied.
 *
 * # Safety
 * `reading` must be null or a live handle.
 */
bool pdpm_reading_valid(const struct PdpmReading *reading);

/**
 * Copies character `index` (left to right) into `out`.
 *
 * # Safety
 * `reading` must be a live handle and `out` a valid pointer.
 */
enum PdpmStatus pdpm_reading_char(const struct PdpmReading *reading,
                                  size_t index,
                                  struct PdpmCharacter *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PLATEDPM_H */
