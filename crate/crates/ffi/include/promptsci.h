#ifndef PROMPTSCI_H
#define PROMPTSCI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes shared by every fallible function.
 */
typedef enum PsStatus {
  PS_STATUS_OK = 0,
  PS_STATUS_NULL_POINTER = 1,
  PS_STATUS_INVALID_ARGUMENT = 2,
  /*
   The coefficient is undefined for this data (for example, no variation).
   */
  PS_STATUS_UNDEFINED = 3,
  /*
   The matrix has no item with two or more labels.
   */
  PS_STATUS_EMPTY_MATRIX = 4,
  /*
   Input could not be parsed as a bundle or fixture.
   */
  PS_STATUS_MALFORMED = 5,
  /*
   The simulation realized a different trajectory than its fixture expects.
   */
  PS_STATUS_DEVIATION = 6,
  /*
   The bundle has violations or otherwise refuses to render.
   */
  PS_STATUS_VIOLATIONS = 7,
  PS_STATUS_INTERNAL = 99,
} PsStatus;

/*
 A parsed or freshly exported audit bundle.
 */
typedef struct PsBundle PsBundle;

/*
 An items × raters matrix of category indices.
 */
typedef struct PsLabelMatrix PsLabelMatrix;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread; empty when none. The
 pointer stays valid until the next failing call on the same thread.
 */
const char *ps_last_error(void);

/*
 Releases a string returned by this library. NULL is ignored.

 # Safety
 `s` must come from this library and not have been freed.
 */
void ps_string_free(char *s);

/*
 Creates an empty matrix over categories `0..n_categories`. `ordinal`
 non-zero ranks categories by index. Returns NULL on invalid sizes.
 */
struct PsLabelMatrix *ps_matrix_new(size_t n_items,
                                    size_t n_raters,
                                    size_t n_categories,
                                    int32_t ordinal);

/*
 Sets one cell; `category < 0` leaves it missing.

 # Safety
 `matrix` must be a live handle from [`ps_matrix_new`].
 */
enum PsStatus ps_matrix_set(struct PsLabelMatrix *matrix,
                            size_t item,
                            size_t rater,
                            int32_t category);

/*
 # Safety
 `matrix` must be NULL or a live handle from [`ps_matrix_new`].
 */
void ps_matrix_free(struct PsLabelMatrix *matrix);

/*
 Cohen's kappa; the matrix must have exactly two raters.

 # Safety
 `matrix` must be a live handle; `out` must point to writable memory.
 */
enum PsStatus ps_cohens_kappa(const struct PsLabelMatrix *matrix, double *out);

/*
 Krippendorff's alpha with nominal or, for ordinal matrices, ordinal distance.

 # Safety
 `matrix` must be a live handle; `out` must point to writable memory.
 */
enum PsStatus ps_krippendorff_alpha(const struct PsLabelMatrix *matrix, double *out);

/*
 Mean pairwise percent agreement.

 # Safety
 `matrix` must be a live handle; `out` must point to writable memory.
 */
enum PsStatus ps_percent_agreement(const struct PsLabelMatrix *matrix, double *out);

/*
 Runs a simulation in replay mode and exports its audit bundle.

 `fixture` is a bundled fixture name or a fixture JSON document.
 `seed` overrides the fixture seed when `use_seed` is non-zero. On a
 trajectory deviation the bundle is still returned, with status
 `Deviation`.

 # Safety
 `fixture` must be a NUL-terminated string; `out` must be writable.
 */
enum PsStatus ps_simulate(const char *fixture,
                          uint64_t seed,
                          int32_t use_seed,
                          struct PsBundle **out);

/*
 Parses a serialized audit bundle.

 # Safety
 `json` must be a NUL-terminated string; `out` must be writable.
 */
enum PsStatus ps_bundle_parse(const char *json, struct PsBundle **out);

/*
 Serializes a bundle to its canonical JSON text.

 # Safety
 `bundle` must be a live handle; `out` must be writable.
 */
enum PsStatus ps_bundle_to_json(const struct PsBundle *bundle, char **out);

/*
 Verifies a bundle. Writes the violation count and, when `violations` is
 not NULL, a JSON array of violation messages. Returns `Violations` when
 the count is non-zero.

 # Safety
 `bundle` must be a live handle; `count` must be writable; `violations`
 may be NULL.
 */
enum PsStatus ps_bundle_verify(const struct PsBundle *bundle, size_t *count, char **violations);

/*
 Renders the markdown report; refuses bundles with violations.

 # Safety
 `bundle` must be a live handle; `out` must be writable.
 */
enum PsStatus ps_bundle_report(const struct PsBundle *bundle, char **out);

/*
 # Safety
 `bundle` must be NULL or a live handle.
 */
void ps_bundle_free(struct PsBundle *bundle);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* PROMPTSCI_H */
