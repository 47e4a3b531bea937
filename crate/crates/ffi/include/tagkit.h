#ifndef TAGKIT_H
#define TAGKIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TagkitStatus {
  TAGKIT_STATUS_OK = 0,
  TAGKIT_STATUS_NULL_ARGUMENT = 1,
  TAGKIT_STATUS_INVALID_UTF8 = 2,
  TAGKIT_STATUS_PARSE = 3,
  TAGKIT_STATUS_INVALID_ARGUMENT = 4,
  TAGKIT_STATUS_NOT_FOUND = 5,
  TAGKIT_STATUS_IO = 6,
  TAGKIT_STATUS_PANIC = 7,
} TagkitStatus;

/**
 * Parsed architecture.
 */
typedef struct TagkitArch TagkitArch;

/**
 * Per-tag calibration table.
 */
typedef struct TagkitTable TagkitTable;

typedef struct TagkitComplexity {
  uint64_t total_ops;
  uint64_t total_params;
  size_t layers;
  size_t conv_layers;
} TagkitComplexity;

typedef struct TagkitSuggestion {
  double bias;
  double window_precision;
  double window_posterior;
  size_t judged_in_window;
  /**
   * Judgments never cross the target; `bias` is the end of the scanned range.
   */
  bool unconstrained;
} TagkitSuggestion;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a success.
 * Valid until the next call on the same thread.
 */
const char *tagkit_last_error(void);

/**
 * Library version, statically allocated.
 */
const char *tagkit_version(void);

/**
 * # Safety
 * `s` is null or a string returned by this library, not yet freed.
 */
void tagkit_string_free(char *s);

/**
 * Parses an architecture file (`name: notation`).
 *
 * # Safety
 * `text` is a nul-terminated string; `out` is writable.
 */
enum TagkitStatus tagkit_arch_parse(const char *text, struct TagkitArch **out);

/**
 * Looks up a built-in architecture such as `yfnet_a` or `ctc_j`.
 *
 * # Safety
 * `name` is a nul-terminated string; `out` is writable.
 */
enum TagkitStatus tagkit_arch_builtin(const char *name, struct TagkitArch **out);

/**
 * Canonical file text for `arch`; free with [`tagkit_string_free`].
 *
 * # Safety
 * `arch` is a live handle; `out` is writable.
 */
enum TagkitStatus tagkit_arch_render(const struct TagkitArch *arch, char **out);

/**
 * Totals for `arch` on an `height`×`width`×`channels` input with the
 * standard head (SPP 6/3/2/1, two 4096-wide layers) and `num_classes` outputs.
 *
 * # Safety
 * `arch` is a live handle; `out` is writable.
 */
enum TagkitStatus tagkit_arch_complexity(const struct TagkitArch *arch,
                                         size_t height,
                                         size_t width,
                                         size_t channels,
                                         size_t num_classes,
                                         struct TagkitComplexity *out);

/**
 * # Safety
 * `arch` is null or a handle from this library, not yet freed.
 */
void tagkit_arch_free(struct TagkitArch *arch);

/**
 * Non-interpolated average precision of `n` scored items.
 *
 * # Safety
 * `scores` and `relevant` hold `n` elements; `out` is writable.
 */
enum TagkitStatus tagkit_average_precision(const double *scores,
                                           const bool *relevant,
                                           size_t n,
                                           double *out);

double tagkit_posterior(double logit, double bias);

/**
 * Logit of probability `p`; the inverse of [`tagkit_posterior`] at zero bias.
 */
double tagkit_logit(double p);

/**
 * Bias that calibrates `n` judged items within the posterior window
 * `[p - width, p + width]`.
 *
 * # Safety
 * `logits` and `correct` hold `n` elements; `out` is writable.
 */
enum TagkitStatus tagkit_suggest_bias(const double *logits,
                                      const bool *correct,
                                      size_t n,
                                      double p,
                                      double width,
                                      struct TagkitSuggestion *out);

/**
 * # Safety
 * `path` is a nul-terminated string; `out` is writable.
 */
enum TagkitStatus tagkit_table_load(const char *path, struct TagkitTable **out);

/**
 * Number of tags in `table`, 0 for null.
 *
 * # Safety
 * `table` is null or a live handle.
 */
size_t tagkit_table_len(const struct TagkitTable *table);

/**
 * # Safety
 * `table` is a live handle; `tag` is a nul-terminated string; `bias` and
 * `enabled` are writable.
 */
enum TagkitStatus tagkit_table_get(const struct TagkitTable *table,
                                   const char *tag,
                                   double *bias,
                                   bool *enabled);

/**
 * Sets the bias of a tag already in the table.
 *
 * # Safety
 * `table` is a live handle; `tag` is a nul-terminated string.
 */
enum TagkitStatus tagkit_table_set_bias(struct TagkitTable *table, const char *tag, double bias);

/**
 * Writes `table` to `path` atomically.
 *
 * # Safety
 * `table` is a live handle; `path` is a nul-terminated string.
 */
enum TagkitStatus tagkit_table_save(const struct TagkitTable *table, const char *path);

/**
 * # Safety
 * `table` is null or a handle from this library, not yet freed.
 */
void tagkit_table_free(struct TagkitTable *table);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TAGKIT_H */
