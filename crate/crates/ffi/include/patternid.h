#ifndef PATTERNID_H
#define PATTERNID_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum {
  PID_STATUS_OK = 0,
  PID_STATUS_NULL_POINTER = 1,
  PID_STATUS_INVALID_ARGUMENT = 2,
  PID_STATUS_IO = 3,
  PID_STATUS_FORMAT = 4,
  PID_STATUS_FINGERPRINT_MISMATCH = 5,
  PID_STATUS_DIMENSION_MISMATCH = 6,
  PID_STATUS_DUPLICATE = 7,
  PID_STATUS_OUT_OF_RANGE = 8,
  PID_STATUS_BUFFER_TOO_SMALL = 9,
  PID_STATUS_INTERNAL = 10,
} PidStatus;

/**
 * Opaque database handle.
 */
typedef struct PidDatabase PidDatabase;

/**
 * Opaque model handle.
 */
typedef struct PidModel PidModel;

/**
 * One ranked candidate individual. `record` indexes the database record
 * that represents it (its nearest image).
 */
typedef struct {
  size_t rank;
  size_t record;
  double distance;
} PidMatch;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread ("" after a success).
 * Valid until the next call on the same thread.
 */
const char *pid_last_error(void);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
PidStatus pid_model_load(const char *path, PidModel **out);

/**
 * # Safety
 * `model` must come from [`pid_model_load`] or be null.
 */
void pid_model_free(PidModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out` writable.
 */
PidStatus pid_model_embedding_dim(const PidModel *model, size_t *out);

/**
 * FNV-1a 64 of the checkpoint bytes; databases record it.
 *
 * # Safety
 * `model` must be a live handle; `out` writable.
 */
PidStatus pid_model_fingerprint(const PidModel *model, uint64_t *out);

/**
 * Embeds one row-major 8-bit grayscale image into `out`, which must hold
 * `out_len >= embedding_dim` floats.
 *
 * # Safety
 * `pixels` must point to `width * height` bytes; `out` to `out_len` floats.
 */
PidStatus pid_model_embed(const PidModel *model,
                          const uint8_t *pixels,
                          size_t width,
                          size_t height,
                          float *out,
                          size_t out_len);

/**
 * Empty database for embeddings of the given dimension produced by the
 * model with the given fingerprint.
 *
 * # Safety
 * `out` must be writable.
 */
PidStatus pid_db_new(size_t embedding_dim, uint64_t fingerprint, PidDatabase **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
PidStatus pid_db_load(const char *path, PidDatabase **out);

/**
 * Writes the database atomically (temporary file, then rename).
 *
 * # Safety
 * `db` must be a live handle; `path` a NUL-terminated string.
 */
PidStatus pid_db_save(const PidDatabase *db, const char *path);

/**
 * # Safety
 * `db` must come from [`pid_db_new`] / [`pid_db_load`] or be null.
 */
void pid_db_free(PidDatabase *db);

/**
 * # Safety
 * `db` must be a live handle; `out` writable.
 */
PidStatus pid_db_len(const PidDatabase *db, size_t *out);

/**
 * # Safety
 * `db` must be a live handle; `out` writable.
 */
PidStatus pid_db_fingerprint(const PidDatabase *db, uint64_t *out);

/**
 * Appends one record; `out_index` (nullable) receives its index.
 *
 * # Safety
 * String arguments must be NUL-terminated; `vector` must hold `len` floats.
 */
PidStatus pid_db_add(PidDatabase *db,
                     const char *individual_id,
                     const char *image_id,
                     const float *vector,
                     size_t len,
                     size_t *out_index);

/**
 * Copies a record's individual id into `buf` (NUL-terminated). `needed`
 * (nullable) receives the required capacity, also on `BufferTooSmall`.
 *
 * # Safety
 * `buf` must be writable for `cap` bytes.
 */
PidStatus pid_db_record_individual(const PidDatabase *db,
                                   size_t index,
                                   char *buf,
                                   size_t cap,
                                   size_t *needed);

/**
 * Same as [`pid_db_record_individual`] for the image id.
 *
 * # Safety
 * `buf` must be writable for `cap` bytes.
 */
PidStatus pid_db_record_image(const PidDatabase *db,
                              size_t index,
                              char *buf,
                              size_t cap,
                              size_t *needed);

/**
 * Ranks the k nearest individuals to `query`. Writes at most `capacity`
 * matches to `out` and their number to `out_count`.
 *
 * # Safety
 * `query` must hold `len` floats; `out` must be writable for `capacity`
 * entries.
 */
PidStatus pid_db_match(const PidDatabase *db,
                       const float *query,
                       size_t len,
                       size_t k,
                       PidMatch *out,
                       size_t capacity,
                       size_t *out_count);

/**
 * Embeds an image with `model` and ranks it against `db`, checking that
 * the two belong together.
 *
 * # Safety
 * As [`pid_model_embed`] and [`pid_db_match`].
 */
PidStatus pid_match_image(const PidModel *model,
                          const PidDatabase *db,
                          const uint8_t *pixels,
                          size_t width,
                          size_t height,
                          size_t k,
                          PidMatch *out,
                          size_t capacity,
                          size_t *out_count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PATTERNID_H */
