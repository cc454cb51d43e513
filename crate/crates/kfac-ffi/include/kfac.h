/* C interface to the Kronecker-factored gradient preconditioner. */

#ifndef KFAC_H
#define KFAC_H

/* Generated from the kfac-ffi crate by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call in this interface. `KFAC_STATUS_OK` is zero, so
 * any nonzero return means failure; `kfac_last_error_message` then holds a
 * human-readable description of the most recent failure on this thread.
 */
typedef enum KfacStatus {
  /**
   * The call succeeded.
   */
  KFAC_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  KFAC_STATUS_NULL_POINTER = 1,
  /**
   * A scalar argument or matrix entry is out of contract: zero dimension,
   * non-finite entry, averaging weight outside (0, 1], negative damping.
   */
  KFAC_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Buffer shapes do not conform to the handle's factors.
   */
  KFAC_STATUS_DIMENSION_MISMATCH = 3,
  /**
   * A matrix was singular to working precision.
   */
  KFAC_STATUS_SINGULAR_MATRIX = 4,
  /**
   * The call needs earlier steps that have not happened yet (update
   * factors before decomposing; decompose before applying).
   */
  KFAC_STATUS_NOT_READY = 5,
  /**
   * Any other internal failure.
   */
  KFAC_STATUS_INTERNAL = 6,
} KfacStatus;

/**
 * Per-layer preconditioner state: the two running curvature factors and
 * their cached eigendecompositions. Opaque; create with
 * `kfac_preconditioner_new` and release with `kfac_preconditioner_free`.
 */
typedef struct KfacPreconditioner KfacPreconditioner;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Allocate a fresh preconditioner handle and store it in `*out`.
 *
 * The handle starts empty: feed it covariance estimates with
 * `kfac_preconditioner_update_factors`, cache their eigendecompositions
 * with `kfac_preconditioner_decompose`, then transform gradients with
 * `kfac_preconditioner_apply`. Release it with `kfac_preconditioner_free`.
 *
 * # Safety
 * `out` must be a valid pointer to a `KfacPreconditioner*`.
 */
enum KfacStatus kfac_preconditioner_new(struct KfacPreconditioner **out);

/**
 * Release a handle created by `kfac_preconditioner_new`. Passing null is a
 * harmless no-op; passing the same handle twice is undefined behavior.
 *
 * # Safety
 * `p`, when non-null, must be an unreleased pointer from
 * `kfac_preconditioner_new`.
 */
void kfac_preconditioner_free(struct KfacPreconditioner *p);

/**
 * Blend one batch's covariance estimates into the running factors.
 *
 * `input_cov` is the symmetric `input_dim x input_dim` covariance of layer
 * inputs (with the bias column folded in, when the layer has one) and
 * `output_cov` the symmetric `output_dim x output_dim` covariance of
 * output gradients, both row-major. `weight` in (0, 1] is the exponential
 * moving-average coefficient given to the new estimates; the first call
 * adopts them outright. Factor shapes are fixed by the first call.
 *
 * # Safety
 * `p` must be a live handle; the buffers must hold `input_dim*input_dim`
 * and `output_dim*output_dim` readable doubles respectively.
 */
enum KfacStatus kfac_preconditioner_update_factors(struct KfacPreconditioner *p,
                                                   const double *input_cov,
                                                   size_t input_dim,
                                                   const double *output_cov,
                                                   size_t output_dim,
                                                   double weight);

/**
 * Recompute and cache the eigendecompositions of both running factors.
 * Call after one or more factor updates; `kfac_preconditioner_apply` uses
 * the most recent decomposition until this is called again.
 *
 * # Safety
 * `p` must be a live handle.
 */
enum KfacStatus kfac_preconditioner_decompose(struct KfacPreconditioner *p);

/**
 * Transform one layer gradient through the cached eigendecompositions:
 * rotate into the factors' eigenbasis, divide by the damped eigenvalue
 * products, and rotate back. `gradient` and `preconditioned_out` are
 * row-major `output_dim x input_dim` buffers matching the factor shapes;
 * `damping` must be >= 0. The two buffers may not alias.
 *
 * Requires a prior `kfac_preconditioner_decompose`.
 *
 * # Safety
 * `p` must be a live handle; both buffers must hold
 * `output_dim * input_dim` doubles (readable and writable respectively).
 */
enum KfacStatus kfac_preconditioner_apply(const struct KfacPreconditioner *p,
                                          const double *gradient,
                                          size_t output_dim,
                                          size_t input_dim,
                                          double damping,
                                          double *preconditioned_out);

/**
 * Like `kfac_preconditioner_apply`, but solves through explicitly damped
 * factor inverses instead of the eigendecompositions: each factor gets
 * `damping` added to its diagonal and is inverted directly. With zero
 * damping the two paths agree to rounding; with positive damping they are
 * intentionally different operators. Requires factors but no prior
 * decomposition.
 *
 * # Safety
 * Same contract as `kfac_preconditioner_apply`.
 */
enum KfacStatus kfac_preconditioner_apply_factored(const struct KfacPreconditioner *p,
                                                   const double *gradient,
                                                   size_t output_dim,
                                                   size_t input_dim,
                                                   double damping,
                                                   double *preconditioned_out);

/**
 * Decompose a symmetric `dim x dim` matrix as `Q diag(lambda) Q^T`.
 *
 * `matrix` is row-major and must be symmetric to within rounding noise.
 * `eigenvectors_out` receives the orthonormal basis `Q` row-major (column
 * `j` is the eigenvector paired with `eigenvalues_out[j]`) and
 * `eigenvalues_out` the eigenvalues in descending order. Identical input
 * bits always give identical output bits.
 *
 * # Safety
 * `matrix` and `eigenvectors_out` must hold `dim * dim` doubles (readable
 * and writable respectively) and `eigenvalues_out` must hold `dim`
 * writable doubles.
 */
enum KfacStatus kfac_sym_eig(const double *matrix,
                             size_t dim,
                             double *eigenvectors_out,
                             double *eigenvalues_out);

/**
 * Short static name for a status code, e.g. `"ok"` or `"not ready"`. Never
 * null; the string must not be freed.
 */
const char *kfac_status_name(enum KfacStatus status);

/**
 * Description of the most recent failure on the calling thread, or an
 * empty string if nothing has failed yet. The pointer stays valid until
 * the next failing call on the same thread; copy the string to keep it.
 */
const char *kfac_last_error_message(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KFAC_H */
