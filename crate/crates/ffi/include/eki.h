/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef EKI_H
#define EKI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every function.
typedef enum EkiStatus {
  EKI_STATUS_OK = 0,
  EKI_STATUS_NULL_POINTER = 1,
  EKI_STATUS_INVALID_ARGUMENT = 2,
  EKI_STATUS_DIMENSION_MISMATCH = 3,
  EKI_STATUS_NOT_POSITIVE_DEFINITE = 4,
  EKI_STATUS_NUMERICAL = 5,
  EKI_STATUS_CONFIG = 6,
  EKI_STATUS_IO = 7,
  EKI_STATUS_CHECK_FAILED = 8,
  EKI_STATUS_PANIC = 9,
} EkiStatus;

// Opaque flow handle: forward problem, prior and `alpha`.
typedef struct EkiFlow EkiFlow;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Create a flow for `y = A u + noise` (`A` is `m x n`, `Gamma` is `m x m`)
// with prior moments `(m0, C0)` and `alpha >= 1`.
//
// # Safety
// Input pointers must reference arrays of the stated sizes; `out` must be
// writable. Release the handle with [`eki_flow_free`].
enum EkiStatus eki_flow_new(size_t n,
                            size_t m,
                            const double *a,
                            const double *gamma,
                            const double *y,
                            const double *m0,
                            const double *c0,
                            double alpha,
                            struct EkiFlow **out);

// # Safety
// `flow` must come from [`eki_flow_new`] and not be used afterwards. Null is ignored.
void eki_flow_free(struct EkiFlow *flow);

// Parameter dimension `n`, or 0 for a null handle.
//
// # Safety
// `flow` must be null or a live handle.
size_t eki_flow_dim(const struct EkiFlow *flow);

// Covariance `C(t)`, `n x n`.
//
// # Safety
// `flow` must be a live handle and `out` must hold `out_len` doubles.
enum EkiStatus eki_covariance_at(const struct EkiFlow *flow, double t, double *out, size_t out_len);

// Mean `m(t)` started from the prior mean, length `n`.
//
// # Safety
// `flow` must be a live handle and `out` must hold `out_len` doubles.
enum EkiStatus eki_mean_at(const struct EkiFlow *flow, double t, double *out, size_t out_len);

// Long-time limits: covariance `n x n` and mean `n`. Either output may be null.
//
// # Safety
// `flow` must be a live handle; non-null outputs must hold their stated lengths.
enum EkiStatus eki_limit(const struct EkiFlow *flow,
                         double *cov_out,
                         size_t cov_len,
                         double *mean_out,
                         size_t mean_len);

// Asymptotic profile `lim t (C(t) - C_inf)`, `n x n`.
//
// # Safety
// `flow` must be a live handle and `out` must hold `out_len` doubles.
enum EkiStatus eki_profile(const struct EkiFlow *flow, double *out, size_t out_len);

// Exact Gaussian posterior of the prior and data held by `flow`.
//
// # Safety
// `flow` must be a live handle; `mean_out` holds `n`, `cov_out` holds `n * n` doubles.
enum EkiStatus eki_posterior(const struct EkiFlow *flow,
                             double *mean_out,
                             size_t mean_len,
                             double *cov_out,
                             size_t cov_len);

// Tikhonov-regularized estimate with regularization time `t`.
//
// # Safety
// `flow` must be a live handle and `out` must hold `out_len` doubles.
enum EkiStatus eki_map(const struct EkiFlow *flow, double t, double *out, size_t out_len);

// Eigenvalues of `C(t)`, descending, from the eigenvalue/eigenvector flow
// integrated with step `dt`.
//
// # Safety
// `flow` must be a live handle and `out` must hold `out_len` doubles.
enum EkiStatus eki_eigenvalues(const struct EkiFlow *flow,
                               double t,
                               double dt,
                               double *out,
                               size_t out_len);

// Run the experiment in the JSON config at `config_path`. `output_dir` may
// be null to use the configured directory. Returns `EKI_STATUS_CHECK_FAILED`
// when the run completes but a check fails; `passed` (nullable) receives 1 or 0.
//
// # Safety
// Strings must be NUL-terminated; `passed` must be null or writable.
enum EkiStatus eki_run_experiment(const char *config_path, const char *output_dir, int *passed);

// Message for the last failure on this thread; empty after a success. The
// pointer stays valid until the next call into the library on this thread.
const char *eki_last_error(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EKI_H */
