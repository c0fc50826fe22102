#ifndef LAS_H
#define LAS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes; zero is success.
typedef enum LasStatus {
  LAS_STATUS_OK = 0,
  LAS_STATUS_NULL_POINTER = 1,
  LAS_STATUS_INVALID_UTF8 = 2,
  LAS_STATUS_IO = 3,
  LAS_STATUS_FORMAT = 4,
  LAS_STATUS_INVALID_ARGUMENT = 5,
  LAS_STATUS_NUMERIC = 6,
  LAS_STATUS_BUFFER_TOO_SMALL = 7,
  LAS_STATUS_PANIC = 8,
} LasStatus;

// A loaded n-gram language model.
typedef struct LasLm LasLm;

// A loaded model checkpoint.
typedef struct LasModel LasModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty if none. The pointer
// stays valid until the next failing call on the same thread.
const char *las_last_error(void);

// Loads a checkpoint file into `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum LasStatus las_model_load(const char *path, struct LasModel **out);

// Releases a model; null is ignored.
//
// # Safety
// `model` must come from [`las_model_load`] and not be used afterwards.
void las_model_free(struct LasModel *model);

// Feature dimension the model expects per frame.
//
// # Safety
// `model` and `out` must be valid pointers.
enum LasStatus las_model_input_dim(const struct LasModel *model, size_t *out);

// Beam-decodes a row-major `frames x dim` feature matrix and writes the best
// transcript, NUL-terminated, into `buf`. `*written` receives the transcript
// length in bytes without the terminator; when `buf_len` is too small it still
// receives the length and `LAS_STATUS_BUFFER_TOO_SMALL` is returned.
//
// # Safety
// `features` must point to `frames * dim` floats and `buf` to `buf_len` bytes.
enum LasStatus las_decode(const struct LasModel *model,
                          const float *features,
                          size_t frames,
                          size_t dim,
                          uint32_t beam,
                          char *buf,
                          size_t buf_len,
                          size_t *written);

// Loads an n-gram model file into `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum LasStatus las_lm_load(const char *path, struct LasLm **out);

// Releases a language model; null is ignored.
//
// # Safety
// `lm` must come from [`las_lm_load`] and not be used afterwards.
void las_lm_free(struct LasLm *lm);

// Natural-log probability of a normalized sentence.
//
// # Safety
// `lm` and `out` must be valid; `text` NUL-terminated.
enum LasStatus las_lm_log_prob(const struct LasLm *lm, const char *text, double *out);

// Word error rate in percent of `hyp` against `reference`.
//
// # Safety
// Both strings must be NUL-terminated and `out` valid.
enum LasStatus las_wer(const char *reference, const char *hyp, double *out);

// Library version as a static NUL-terminated string.
const char *las_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LAS_H */
