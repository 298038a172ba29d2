#ifndef GJEVAL_H
#define GJEVAL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GjStatus {
  GJ_STATUS_OK = 0,
  GJ_STATUS_NULL_POINTER = 1,
  GJ_STATUS_INVALID_ARGUMENT = 2,
  GJ_STATUS_PARSE = 3,
  GJ_STATUS_DEGENERATE = 4,
  GJ_STATUS_PANIC = 5,
} GjStatus;

typedef enum GjLevel {
  GJ_LEVEL_IMAGE = 0,
  GJ_LEVEL_PATIENT = 1,
  GJ_LEVEL_WEIGHTED = 2,
} GjLevel;

// Parsed prediction file.
typedef struct GjDataset GjDataset;

// Fusion-head parameters.
typedef struct GjHead GjHead;

// Metrics of one evaluation.
typedef struct GjReport GjReport;

typedef struct GjTest {
  double statistic;
  // Degrees of freedom; 0 for normal-based tests.
  uint32_t df;
  double p;
  // Nonzero when the test fell back to its degenerate answer.
  uint8_t degenerate;
} GjTest;

typedef struct GjDeLong {
  double auc_a;
  double auc_b;
  struct GjTest test;
} GjDeLong;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer stays
// valid until the next call into this library on the same thread.
const char *gj_last_error(void);

// # Safety
// `s` must be null or a string returned by this library, freed once.
void gj_string_free(char *s);

// Upper-tail probability of a chi-square variable with `df` degrees of
// freedom.
double gj_chi2_sf(double x, uint32_t df);

double gj_normal_cdf(double x);

// 95% Wald interval of a proportion, clipped to [0, 1].
//
// # Safety
// `lo` and `hi` must be valid for writes.
enum GjStatus gj_wald_ci(double p, double n, double *lo, double *hi);

// Cohen's kappa of a row-major 3x3 table (rows: first rater).
//
// # Safety
// `cm` must point to 9 doubles; `out` must be valid for writes.
enum GjStatus gj_kappa(const double *cm, double *out);

// McNemar-Bowker test of a row-major 3x3 paired table. Empty off-diagonal
// pairs are dropped from the statistic and the degrees of freedom.
//
// # Safety
// `t` must point to 9 doubles; `out` must be valid for writes.
enum GjStatus gj_bowker(const double *t, struct GjTest *out);

// Paired DeLong test. `labels[i]` is nonzero for positives.
//
// # Safety
// Each array must hold `n` elements; `out` must be valid for writes.
enum GjStatus gj_delong(const double *scores_a,
                        const double *scores_b,
                        const uint8_t *labels,
                        size_t n,
                        struct GjDeLong *out);

// Parses a predictions CSV held in memory.
//
// # Safety
// `csv` must be a NUL-terminated string; `out` must be valid for writes.
enum GjStatus gj_dataset_from_csv(const char *csv, uint8_t strict, struct GjDataset **out);

// Number of images, or 0 for a null handle.
//
// # Safety
// `ds` must be null or a live handle.
size_t gj_dataset_len(const struct GjDataset *ds);

// # Safety
// `ds` must be null or a handle from [`gj_dataset_from_csv`], freed once.
void gj_dataset_free(struct GjDataset *ds);

// # Safety
// `ds` must be a live handle; `out` must be valid for writes.
enum GjStatus gj_evaluate(const struct GjDataset *ds, enum GjLevel level, struct GjReport **out);

// Overall accuracy and its interval.
//
// # Safety
// `r` must be a live handle; the outputs must be valid for writes.
enum GjStatus gj_report_accuracy(const struct GjReport *r, double *value, double *lo, double *hi);

// Full report as JSON; free the string with [`gj_string_free`].
//
// # Safety
// `r` must be a live handle; `out` must be valid for writes.
enum GjStatus gj_report_json(const struct GjReport *r, char **out);

// # Safety
// `r` must be null or a handle from [`gj_evaluate`], freed once.
void gj_report_free(struct GjReport *r);

// Freshly initialized head.
//
// # Safety
// `out` must be valid for writes.
enum GjStatus gj_head_init(size_t c,
                           size_t c_res,
                           size_t hidden,
                           double dropout,
                           uint64_t seed,
                           struct GjHead **out);

// Loads parameters written by `fusion-demo` (`params.json`).
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be valid for writes.
enum GjStatus gj_head_from_json(const char *json, struct GjHead **out);

// # Safety
// `h` must be a live handle; `out` must be valid for writes.
enum GjStatus gj_head_to_json(const struct GjHead *h, char **out);

// Class probabilities (A-EGJA, E-EGJA, control) for pooled feature vectors:
// `dino` of length `c` (class token plus mean patch token) and `res` of
// length `c_res`.
//
// # Safety
// `h` must be a live handle, the arrays must hold the stated lengths and
// `probs` must point to 3 writable doubles.
enum GjStatus gj_head_predict(const struct GjHead *h,
                              const double *dino,
                              size_t c,
                              const double *res,
                              size_t c_res,
                              double *probs);

// # Safety
// `h` must be null or a handle from this library, freed once.
void gj_head_free(struct GjHead *h);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GJEVAL_H */
