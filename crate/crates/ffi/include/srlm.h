#ifndef SRLM_H
#define SRLM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SrlmStatus {
  SRLM_STATUS_OK = 0,
  SRLM_STATUS_NULL_POINTER = 1,
  SRLM_STATUS_INVALID_UTF8 = 2,
  SRLM_STATUS_INVALID_ARGUMENT = 3,
  SRLM_STATUS_NOT_FOUND = 4,
  SRLM_STATUS_NO_ANSWERS = 5,
  SRLM_STATUS_CONFIG_ERROR = 6,
  SRLM_STATUS_PANIC = 7,
} SrlmStatus;

/**
 * Values accepted by [`srlm_candidates_new`].
 */
typedef enum SrlmRule {
  SRLM_RULE_ARGMAX_JOINT = 0,
  SRLM_RULE_ARGMIN_JOINT = 1,
} SrlmRule;

/**
 * Candidate set for one task. Opaque to C.
 */
typedef struct SrlmCandidates SrlmCandidates;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL after a success.
 * Valid until the next call into this library on the same thread.
 */
const char *srlm_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *srlm_version(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library and not yet freed.
 */
void srlm_string_free(char *s);

/**
 * Canonical form of an answer. `SRLM_STATUS_NOT_FOUND` when nothing is
 * left after normalization.
 *
 * # Safety
 * `raw` must be a NUL-terminated string; `out` must be writable.
 */
enum SrlmStatus srlm_canonicalize_answer(const char *raw, char **out);

/**
 * The last confidence report in a completion, clamped into (0, 100].
 *
 * # Safety
 * `completion` must be a NUL-terminated string; `out` must be writable.
 */
enum SrlmStatus srlm_parse_confidence(const char *completion, double *out);

/**
 * Final-answer text from a completion. `multiple_markers` may be NULL.
 *
 * # Safety
 * `completion` must be a NUL-terminated string; `out` must be writable;
 * `multiple_markers` must be NULL or writable.
 */
enum SrlmStatus srlm_extract_final_answer(const char *completion,
                                          char **out,
                                          bool *multiple_markers);

/**
 * Σ ln(ν/100) over `n` step confidences. NaN entries count as missing.
 *
 * # Safety
 * `confidences` must point to `n` readable doubles (may be NULL when `n` is
 * 0); `out` must be writable.
 */
enum SrlmStatus srlm_verbalized_confidence(const double *confidences,
                                           size_t n,
                                           double neutral,
                                           double *out);

/**
 * 0.75^|gold − predicted|.
 */
double srlm_oolong_numeric_score(double gold, double predicted);

/**
 * OOLONG partial credit for a free-text prediction against a numeric gold.
 * Predictions with no number score 0.
 *
 * # Safety
 * `prediction` must be a NUL-terminated string; `out` must be writable.
 */
enum SrlmStatus srlm_oolong_score(const char *prediction, double gold, double *out);

/**
 * 1 or 0 for a multiple-choice prediction against `gold_letter` (A to D).
 *
 * # Safety
 * `prediction` must be a NUL-terminated string; `out` must be writable.
 */
enum SrlmStatus srlm_mcq_score(const char *prediction, char gold_letter, double *out);

/**
 * The judge prompt for one graded response.
 *
 * # Safety
 * The three inputs must be NUL-terminated strings; `out` must be writable.
 */
enum SrlmStatus srlm_render_judge_prompt(const char *question,
                                         const char *response,
                                         const char *correct_answer,
                                         char **out);

/**
 * Loads a TOML run config and returns the effective config as JSON.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out_json` must be writable.
 */
enum SrlmStatus srlm_config_validate(const char *path, char **out_json);

/**
 * New empty candidate set, or NULL for an unknown rule.
 */
struct SrlmCandidates *srlm_candidates_new(uint32_t rule);

/**
 * # Safety
 * `set` must be NULL or a handle from [`srlm_candidates_new`] not yet freed.
 */
void srlm_candidates_free(struct SrlmCandidates *set);

/**
 * Number of candidates pushed so far, 0 for NULL.
 *
 * # Safety
 * `set` must be NULL or a live handle.
 */
size_t srlm_candidates_len(const struct SrlmCandidates *set);

/**
 * Adds trajectory `k` with its final answer (NULL when it gave none), its
 * verbalized confidence and its trace length. Answers are grouped by their
 * canonical form.
 *
 * # Safety
 * `set` must be a live handle; `answer` must be NULL or a NUL-terminated
 * string.
 */
enum SrlmStatus srlm_candidates_push(struct SrlmCandidates *set,
                                     uint32_t k,
                                     const char *answer,
                                     double vc,
                                     uint64_t len);

/**
 * Picks the best-scored member of the plurality answer group. Writes the
 * push-order index and, if `out_answer` is not NULL, a copy of its answer.
 * `SRLM_STATUS_NO_ANSWERS` when no candidate answered.
 *
 * # Safety
 * `set` must be a live handle; `out_index` must be writable;
 * `out_answer` must be NULL or writable.
 */
enum SrlmStatus srlm_candidates_select(const struct SrlmCandidates *set,
                                       size_t *out_index,
                                       char **out_answer);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SRLM_H */
