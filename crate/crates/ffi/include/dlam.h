#ifndef DLAM_H
#define DLAM_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Values are stable.
 */
typedef enum {
  DLAM_STATUS_OK = 0,
  DLAM_STATUS_NULL_POINTER = 1,
  DLAM_STATUS_INVALID_UTF8 = 2,
  DLAM_STATUS_BUFFER_TOO_SMALL = 3,
  DLAM_STATUS_INVALID_ALGORITHM = 4,
  DLAM_STATUS_PANIC = 5,
  DLAM_STATUS_EMPTY_INPUT = 10,
  DLAM_STATUS_MALFORMED_DIGEST = 11,
  DLAM_STATUS_INPUT_TOO_SHORT = 12,
  DLAM_STATUS_INPUT_TOO_LONG = 13,
  DLAM_STATUS_INSUFFICIENT_VARIATION = 14,
  DLAM_STATUS_MIXED_ALGORITHMS = 15,
  DLAM_STATUS_IO_FAILURE = 16,
  DLAM_STATUS_SCHEMA_MISMATCH = 17,
  DLAM_STATUS_VERSION_MISMATCH = 18,
  DLAM_STATUS_SHAPE_MISMATCH = 19,
  DLAM_STATUS_INVALID_CONFIG = 20,
  /**
   * Any other toolkit error; see the message.
   */
  DLAM_STATUS_OTHER = 99,
} DlamStatus;

/**
 * A parsed or computed fuzzy digest.
 */
typedef struct DlamDigest DlamDigest;

/**
 * A trained classifier loaded from a checkpoint file.
 */
typedef struct DlamModel DlamModel;

/**
 * `DLAM_ALGO_SSDEEP` or `DLAM_ALGO_TLSH`.
 */
typedef uint32_t DlamAlgo;

#define DLAM_ALGO_SSDEEP 0

#define DLAM_ALGO_TLSH 1

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *dlam_version(void);

/**
 * Static name of a status code, e.g. "MalformedDigest".
 */
const char *dlam_status_name(DlamStatus status);

/**
 * Message of the last failed call on this thread, or NULL. Valid until
 * the next dlam call on the same thread.
 */
const char *dlam_last_error(void);

/**
 * Hashes `len` bytes at `data`.
 *
 * # Safety
 * `data` must point to `len` readable bytes (it may be NULL when `len` is
 * 0) and `out_digest` must be a valid pointer.
 */
DlamStatus dlam_digest_hash(DlamAlgo algorithm,
                            const uint8_t *data,
                            size_t len,
                            DlamDigest **out_digest);

/**
 * Parses a digest in its canonical text form.
 *
 * # Safety
 * `digest_text` must be NUL-terminated and `out_digest` a valid pointer.
 */
DlamStatus dlam_digest_parse(DlamAlgo algorithm, const char *digest_text, DlamDigest **out_digest);

/**
 * Algorithm code of a digest.
 *
 * # Safety
 * `d` must be a live handle and `out_algo` a valid pointer.
 */
DlamStatus dlam_digest_algorithm(const DlamDigest *d, DlamAlgo *out_algo);

/**
 * Writes the canonical text into `buf`. With a NULL or short buffer the
 * call fails with `BufferTooSmall` and `needed` tells the size to use.
 *
 * # Safety
 * `d` must be a live handle, `buf` must have `cap` writable bytes and
 * `needed` must be NULL or valid.
 */
DlamStatus dlam_digest_to_string(const DlamDigest *d, char *buf, size_t cap, size_t *needed);

/**
 * ssdeep score (0..=100) or TLSH distance of two digests of the same
 * algorithm.
 *
 * # Safety
 * Both handles must be live and `out_score` valid.
 */
DlamStatus dlam_digest_compare(const DlamDigest *a, const DlamDigest *b, uint32_t *out_score);

/**
 * # Safety
 * `d` must be NULL or a handle not yet freed.
 */
void dlam_digest_free(DlamDigest *d);

/**
 * Loads a checkpoint written by `dlam train`.
 *
 * # Safety
 * `path` must be NUL-terminated and `out_model` valid.
 */
DlamStatus dlam_model_load(const char *path, DlamModel **out_model);

/**
 * Algorithm of the digests the model reads.
 *
 * # Safety
 * `m` must be a live handle and `out_algo` valid.
 */
DlamStatus dlam_model_algorithm(const DlamModel *m, DlamAlgo *out_algo);

/**
 * Anomaly probability of one digest; `label` is 1 iff it exceeds 0.5.
 * Either output may be NULL.
 *
 * # Safety
 * Handles must be live; outputs NULL or valid.
 */
DlamStatus dlam_model_predict(const DlamModel *m,
                              const DlamDigest *d,
                              float *probability,
                              uint8_t *label);

/**
 * # Safety
 * `m` must be NULL or a handle not yet freed.
 */
void dlam_model_free(DlamModel *m);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DLAM_H */
