#ifndef QUAD_H
#define QUAD_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define QUAD_LABEL_REAL 0

#define QUAD_LABEL_FAKE 1

typedef enum QuadStatus {
  QUAD_STATUS_OK = 0,
  QUAD_STATUS_NULL_POINTER = 1,
  QUAD_STATUS_INVALID_INPUT = 2,
  QUAD_STATUS_LABELS_REQUIRED = 3,
  QUAD_STATUS_MISSING_METADATA = 4,
  QUAD_STATUS_NUMERICAL = 5,
  QUAD_STATUS_PARSE = 6,
  QUAD_STATUS_IO = 7,
  QUAD_STATUS_INVALID_UTF8 = 8,
  QUAD_STATUS_PANIC = 9,
} QuadStatus;

// Opaque handle to a fitted calibration model.
typedef struct QuadModel QuadModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. The pointer is
// valid until the next failing call on the same thread.
const char *quad_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *quad_version(void);

// Parses and validates a model from its JSON document.
//
// # Safety
// `json` must be a NUL-terminated string; `out_model` must be writable.
enum QuadStatus quad_model_from_json(const char *json, struct QuadModel **out_model);

// Loads a model JSON file.
//
// # Safety
// `path` must be a NUL-terminated string; `out_model` must be writable.
enum QuadStatus quad_model_load(const char *path, struct QuadModel **out_model);

// Serializes a model; free the result with `quad_string_free`.
//
// # Safety
// `model` must come from this library; `out_json` must be writable.
enum QuadStatus quad_model_to_json(const struct QuadModel *model, char **out_json);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void quad_model_free(struct QuadModel *model);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be used afterwards.
void quad_string_free(char *s);

// Min-max normalizes a raw quality with the model's range, clamped to [0, 1].
//
// # Safety
// `model` must come from this library; `out_q` must be writable.
enum QuadStatus quad_normalize_quality(const struct QuadModel *model,
                                       double quality,
                                       double *out_q);

// Corrected logit of one instance given its raw quality.
//
// # Safety
// `model` must come from this library; `out_value` must be writable.
enum QuadStatus quad_corrected_logit(const struct QuadModel *model,
                                     double logit,
                                     double quality,
                                     double *out_value);

// Fused score of one query set of `n` instances; `out_decision` receives
// the label code (fake iff score > 0).
//
// # Safety
// `logits` and `qualities` must point to `n` values; outputs must be writable.
enum QuadStatus quad_fuse(const struct QuadModel *model,
                          const double *logits,
                          const double *qualities,
                          size_t n,
                          double *out_score,
                          uint8_t *out_decision);

// Fits a first-order model on `n` labeled instances.
//
// # Safety
// The three arrays must point to `n` values; `out_model` must be writable.
enum QuadStatus quad_fit(const double *logits,
                         const double *qualities,
                         const uint8_t *labels,
                         size_t n,
                         struct QuadModel **out_model);

// Balanced accuracy of `n` predicted vs true label codes.
//
// # Safety
// Both arrays must point to `n` values; `out_value` must be writable.
enum QuadStatus quad_balanced_accuracy(const uint8_t *predicted,
                                       const uint8_t *truth,
                                       size_t n,
                                       double *out_value);

// Mean negative log-likelihood of true label codes under logistic scores.
//
// # Safety
// Both arrays must point to `n` values; `out_value` must be writable.
enum QuadStatus quad_nll(const double *scores, const uint8_t *truth, size_t n, double *out_value);

// Default degradation-tree manifest as JSON; free with `quad_string_free`.
//
// # Safety
// `source_id` must be a NUL-terminated string; `out_json` must be writable.
enum QuadStatus quad_generate_tree_json(const char *source_id,
                                        uint8_t label_code,
                                        uint64_t seed,
                                        char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QUAD_H */
