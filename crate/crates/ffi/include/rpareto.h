#ifndef RPARETO_H
#define RPARETO_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RpStatus {
  RP_STATUS_OK = 0,
  RP_STATUS_NULL_POINTER = 1,
  RP_STATUS_INVALID_ARGUMENT = 2,
  RP_STATUS_NOT_PSD = 3,
  RP_STATUS_UNSUPPORTED_RISK = 4,
  RP_STATUS_NON_DIFFERENTIABLE_WEIGHT = 5,
  RP_STATUS_REJECTION_EXHAUSTED = 6,
  RP_STATUS_NO_CONVERGENCE = 7,
  RP_STATUS_DEGENERATE = 8,
  RP_STATUS_IO = 9,
  RP_STATUS_PANIC = 10,
} RpStatus;

typedef enum RpFamily {
  RP_FAMILY_POWER = 0,
  RP_FAMILY_BOUNDED_EXPONENTIAL = 1,
} RpFamily;

typedef enum RpObjective {
  RP_OBJECTIVE_LOG_LIK = 0,
  RP_OBJECTIVE_GRAD_SCORE = 1,
} RpObjective;

/*
 Opaque Brown–Resnick field: variogram plus sites, with cached factors.
 */
typedef struct RpField RpField;

/*
 Opaque site set.
 */
typedef struct RpSites RpSites;

/*
 Result of [`rp_fit`].
 */
typedef struct RpFitResult {
  double beta;
  double alpha;
  double objective_value;
  size_t iterations;
  bool converged;
} RpFitResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread; empty after a success.
 The pointer stays valid until the next call on the same thread.
 */
const char *rp_last_error(void);

/*
 Sites from `n` coordinate pairs `xy = [x0, y0, x1, y1, ...]`, ids `1..n`.

 # Safety
 `xy` must point to `2n` doubles and `out_sites` must be writable.
 */
enum RpStatus rp_sites_new(const double *xy, size_t n, struct RpSites **out_sites);

/*
 Unit-spaced `nx × ny` grid, x varying fastest.

 # Safety
 `out_sites` must be writable.
 */
enum RpStatus rp_sites_grid(size_t nx, size_t ny, struct RpSites **out_sites);

/*
 Number of sites, 0 for a null handle.

 # Safety
 `sites` must be null or a live handle.
 */
size_t rp_sites_len(const struct RpSites *sites);

/*
 # Safety
 `sites` must be null or a handle not yet freed.
 */
void rp_sites_free(struct RpSites *sites);

/*
 Semivariogram `γ(h)`.

 # Safety
 `out_value` must be writable.
 */
enum RpStatus rp_semivariogram(enum RpFamily family,
                               double beta,
                               double alpha,
                               double h,
                               double *out_value);

/*
 Extremogram `χ(h) = 2Φ(−√(γ(h)/2))`.

 # Safety
 `out_value` must be writable.
 */
enum RpStatus rp_chi(enum RpFamily family, double beta, double alpha, double h, double *out_value);

/*
 Builds a field on a copy of `sites`.

 # Safety
 `sites` must be a live handle and `out_field` writable.
 */
enum RpStatus rp_field_new(const struct RpSites *sites,
                           enum RpFamily family,
                           double beta,
                           double alpha,
                           struct RpField **out_field);

/*
 Number of sites of the field, 0 for a null handle.

 # Safety
 `field` must be null or a live handle.
 */
size_t rp_field_dim(const struct RpField *field);

/*
 # Safety
 `field` must be null or a handle not yet freed.
 */
void rp_field_free(struct RpField *field);

/*
 Draws `n` episodes for the risk spec (`mean`, `max`, `site:<id>`, ...).
 Episode `i` uses random stream `i` of `seed`, so results do not depend on
 `n` or on threading. Writes radii to `out_r[n]` and fields row-major to
 `out_z[n × D]`.

 # Safety
 `risk` must be a NUL-terminated string; output buffers must hold the
 stated number of doubles.
 */
enum RpStatus rp_field_sample(const struct RpField *field,
                              const char *risk,
                              uint64_t seed,
                              size_t n,
                              uint64_t max_iters,
                              double *out_r,
                              double *out_z);

/*
 Log of the exponent-measure intensity at `z[D]`.

 # Safety
 `z` must hold `D` doubles and `out_value` be writable.
 */
enum RpStatus rp_log_intensity(const struct RpField *field, const double *z, double *out_value);

/*
 Gradient score of `n` episodes `z[n × D]` (row-major) under the field,
 with marginal weights `1 − exp(−(z/u − 1))` above `u_weight`.

 # Safety
 `z` must hold `n × D` doubles and `out_value` be writable.
 */
enum RpStatus rp_gradient_score(const struct RpField *field,
                                const double *z,
                                size_t n,
                                double u_weight,
                                double *out_value);

/*
 Fits the variogram to `n` episodes `z[n × D]` exceeding 1 under `risk`.
 Gradient-score fits use the command-line default weights for the risk.

 # Safety
 `sites` must be a live handle, `risk` a NUL-terminated string, `z` must
 hold `n × D` doubles and `out_result` be writable.
 */
enum RpStatus rp_fit(const struct RpSites *sites,
                     const double *z,
                     size_t n,
                     const char *risk,
                     enum RpObjective objective,
                     enum RpFamily family,
                     double init_beta,
                     double init_alpha,
                     struct RpFitResult *out_result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RPARETO_H */
