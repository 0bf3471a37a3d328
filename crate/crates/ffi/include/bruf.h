#ifndef BRUF_H
#define BRUF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every fallible call.
 */
typedef enum BrufStatus {
  BRUF_STATUS_OK = 0,
  BRUF_STATUS_NULL_POINTER = 1,
  BRUF_STATUS_INVALID_ARGUMENT = 2,
  BRUF_STATUS_DIMENSION_MISMATCH = 3,
  BRUF_STATUS_NOT_POSITIVE_DEFINITE = 4,
  /*
   A step controller, line search or integration failed.
   */
  BRUF_STATUS_NUMERICAL_FAILURE = 5,
  BRUF_STATUS_BUFFER_TOO_SMALL = 6,
  /*
   A Rust panic was caught at the boundary.
   */
  BRUF_STATUS_INTERNAL = 99,
} BrufStatus;

/*
 Pseudo-time schedule of the fixed-step recursive updates.
 */
typedef enum BrufSchedule {
  BRUF_SCHEDULE_UNIFORM = 0,
  BRUF_SCHEDULE_VARIABLE = 1,
} BrufSchedule;

typedef struct BrufBelief BrufBelief;

typedef struct BrufEnsemble BrufEnsemble;

typedef struct BrufModel BrufModel;

typedef struct BrufRng BrufRng;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread; empty after a success.
 Valid until the next call on the same thread.
 */
const char *bruf_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *bruf_version(void);

/*
 Creates a Gaussian belief from a mean of length `dim` and a row-major
 `dim × dim` covariance, which must be symmetric positive semi-definite.

 # Safety
 `mean` and `cov` must point to `dim` and `dim * dim` readable doubles.
 */
enum BrufStatus bruf_belief_new(size_t dim,
                                const double *mean,
                                const double *cov,
                                struct BrufBelief **out);

/*
 # Safety
 `belief` must be null or a handle from this library, not yet freed.
 */
void bruf_belief_free(struct BrufBelief *belief);

/*
 State dimension, or 0 for a null handle.

 # Safety
 `belief` must be null or a live handle.
 */
size_t bruf_belief_dim(const struct BrufBelief *belief);

/*
 Copies the mean into `out` (capacity `len`).

 # Safety
 `belief` must be a live handle and `out` writable for `len` doubles.
 */
enum BrufStatus bruf_belief_mean(const struct BrufBelief *belief, double *out, size_t len);

/*
 Copies the row-major covariance into `out` (capacity `len`).

 # Safety
 `belief` must be a live handle and `out` writable for `len` doubles.
 */
enum BrufStatus bruf_belief_cov(const struct BrufBelief *belief, double *out, size_t len);

/*
 Linear model `y = H x + v`, `v ~ N(0, R)`, with row-major `H` (`m × n`)
 and `R` (`m × m`).

 # Safety
 `h` and `r` must point to `m * n` and `m * m` readable doubles.
 */
enum BrufStatus bruf_model_linear_new(size_t n,
                                      size_t m,
                                      const double *h,
                                      const double *r,
                                      struct BrufModel **out);

/*
 Range from the origin of a 2-D state with noise variance `noise_var`.

 # Safety
 `out` must be writable.
 */
enum BrufStatus bruf_model_range_new(double noise_var, struct BrufModel **out);

/*
 Radar range and direction cosines of the `[x, vx, y, vy, z, vz]` state.

 # Safety
 `out` must be writable.
 */
enum BrufStatus bruf_model_ruv_new(double sigma_r,
                                   double sigma_u,
                                   double sigma_v,
                                   struct BrufModel **out);

/*
 Power measurement `x_i |x_i|^(γ−1) / f^(γ−1)` of the listed state indices
 with noise `noise_var · I`.

 # Safety
 `indices` must point to `count` readable values.
 */
enum BrufStatus bruf_model_power_new(size_t n,
                                     const size_t *indices,
                                     size_t count,
                                     double scale,
                                     double gamma,
                                     double noise_var,
                                     struct BrufModel **out);

/*
 # Safety
 `model` must be null or a live handle.
 */
void bruf_model_free(struct BrufModel *model);

/*
 # Safety
 `model` must be null or a live handle.
 */
size_t bruf_model_state_dim(const struct BrufModel *model);

/*
 # Safety
 `model` must be null or a live handle.
 */
size_t bruf_model_measurement_dim(const struct BrufModel *model);

/*
 Evaluates the noise-free measurement `h(x)`.

 # Safety
 `x` must hold the model's state dimension, `out` `len` doubles.
 */
enum BrufStatus bruf_model_observe(const struct BrufModel *model,
                                   const double *x,
                                   size_t x_len,
                                   double *out,
                                   size_t len);

/*
 Extended Kalman filter update.

 # Safety
 Handles must be live; `y` must hold `y_len` doubles; `out` writable.
 */
enum BrufStatus bruf_kalman_update(const struct BrufBelief *prior,
                                   const struct BrufModel *model,
                                   const double *y,
                                   size_t y_len,
                                   struct BrufBelief **out);

/*
 Fixed-schedule recursive update with `n` steps. `steps` (nullable)
 receives the number of steps taken.

 # Safety
 As for [`bruf_kalman_update`]; `steps` may be null.
 */
enum BrufStatus bruf_recursive_update(const struct BrufBelief *prior,
                                      const struct BrufModel *model,
                                      const double *y,
                                      size_t y_len,
                                      enum BrufSchedule kind,
                                      size_t n,
                                      struct BrufBelief **out,
                                      size_t *steps);

/*
 Recursive update with error-controlled pseudo-time steps, starting from
 `1 / initial_steps`. `steps` (nullable) receives the accepted step count.

 # Safety
 As for [`bruf_kalman_update`]; `steps` may be null.
 */
enum BrufStatus bruf_ec_update(const struct BrufBelief *prior,
                               const struct BrufModel *model,
                               const double *y,
                               size_t y_len,
                               double atol,
                               double rtol,
                               size_t initial_steps,
                               struct BrufBelief **out,
                               size_t *steps);

/*
 Iterated EKF update.

 # Safety
 As for [`bruf_kalman_update`].
 */
enum BrufStatus bruf_iekf_update(const struct BrufBelief *prior,
                                 const struct BrufModel *model,
                                 const double *y,
                                 size_t y_len,
                                 size_t max_iters,
                                 double tol,
                                 bool line_search,
                                 struct BrufBelief **out);

/*
 # Safety
 `out` must be writable.
 */
enum BrufStatus bruf_rng_new(uint64_t seed, struct BrufRng **out);

/*
 # Safety
 `rng` must be null or a live handle.
 */
void bruf_rng_free(struct BrufRng *rng);

/*
 Draws `count` members from `belief`.

 # Safety
 Handles must be live; `out` writable.
 */
enum BrufStatus bruf_ensemble_sample(const struct BrufBelief *belief,
                                     size_t count,
                                     struct BrufRng *rng,
                                     struct BrufEnsemble **out);

/*
 Builds an ensemble from `count` member-major states of length `dim`.

 # Safety
 `states` must hold `dim * count` doubles; `out` writable.
 */
enum BrufStatus bruf_ensemble_new(size_t dim,
                                  size_t count,
                                  const double *states,
                                  struct BrufEnsemble **out);

/*
 # Safety
 `ens` must be null or a live handle.
 */
void bruf_ensemble_free(struct BrufEnsemble *ens);

/*
 # Safety
 `ens` must be null or a live handle.
 */
size_t bruf_ensemble_size(const struct BrufEnsemble *ens);

/*
 # Safety
 `ens` must be null or a live handle.
 */
size_t bruf_ensemble_dim(const struct BrufEnsemble *ens);

/*
 Copies the member-major states into `out` (capacity `len`).

 # Safety
 `ens` must be live and `out` writable for `len` doubles.
 */
enum BrufStatus bruf_ensemble_states(const struct BrufEnsemble *ens, double *out, size_t len);

/*
 Copies the ensemble mean into `out` (capacity `len`).

 # Safety
 `ens` must be live and `out` writable for `len` doubles.
 */
enum BrufStatus bruf_ensemble_mean(const struct BrufEnsemble *ens, double *out, size_t len);

/*
 Linearized EnKF update with inflation `alpha`. With `perturb` false the
 predicted measurements are not perturbed.

 # Safety
 Handles must be live; `y` must hold `y_len` doubles; `out` writable.
 */
enum BrufStatus bruf_enkf_update(const struct BrufEnsemble *ens,
                                 const struct BrufModel *model,
                                 const double *y,
                                 size_t y_len,
                                 double alpha,
                                 bool perturb,
                                 struct BrufRng *rng,
                                 struct BrufEnsemble **out);

/*
 Recursive ensemble update over `n` fixed steps.

 # Safety
 As for [`bruf_enkf_update`].
 */
enum BrufStatus bruf_recursive_ensemble_update(const struct BrufEnsemble *ens,
                                               const struct BrufModel *model,
                                               const double *y,
                                               size_t y_len,
                                               enum BrufSchedule kind,
                                               size_t n,
                                               double alpha,
                                               bool perturb,
                                               struct BrufRng *rng,
                                               struct BrufEnsemble **out);

/*
 Recursive ensemble update with error-controlled steps. `steps` (nullable)
 receives the accepted step count.

 # Safety
 As for [`bruf_enkf_update`]; `steps` may be null.
 */
enum BrufStatus bruf_ec_ensemble_update(const struct BrufEnsemble *ens,
                                        const struct BrufModel *model,
                                        const double *y,
                                        size_t y_len,
                                        double atol,
                                        double rtol,
                                        double alpha,
                                        bool perturb,
                                        struct BrufRng *rng,
                                        struct BrufEnsemble **out,
                                        size_t *steps);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BRUF_H */
