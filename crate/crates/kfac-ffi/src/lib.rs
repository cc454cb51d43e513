//! C interface to the Kronecker-factored gradient preconditioner.
//!
//! The surface is a per-layer opaque handle plus a standalone symmetric
//! eigensolver. All matrix buffers are dense row-major `double` arrays owned
//! by the caller; no function takes ownership of an input buffer or
//! allocates an output buffer. Every call returns a [`KfacStatus`]; on
//! failure, [`kfac_last_error_message`] describes what went wrong.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use kfac_core::kfac::LayerKfacState;
use kfac_core::linalg::{sym_eig, Matrix};
use kfac_core::Error;

/// Result code of every call in this interface. `KFAC_STATUS_OK` is zero, so
/// any nonzero return means failure; `kfac_last_error_message` then holds a
/// human-readable description of the most recent failure on this thread.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KfacStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A scalar argument or matrix entry is out of contract: zero dimension,
    /// non-finite entry, averaging weight outside (0, 1], negative damping.
    InvalidArgument = 2,
    /// Buffer shapes do not conform to the handle's factors.
    DimensionMismatch = 3,
    /// A matrix was singular to working precision.
    SingularMatrix = 4,
    /// The call needs earlier steps that have not happened yet (update
    /// factors before decomposing; decompose before applying).
    NotReady = 5,
    /// Any other internal failure.
    Internal = 6,
}

/// Per-layer preconditioner state: the two running curvature factors and
/// their cached eigendecompositions. Opaque; create with
/// `kfac_preconditioner_new` and release with `kfac_preconditioner_free`.
pub struct KfacPreconditioner {
    state: LayerKfacState,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn record_error(status: KfacStatus, message: &str) -> KfacStatus {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
    status
}

fn status_of(err: &Error) -> KfacStatus {
    match err {
        Error::Dimension(_) => KfacStatus::DimensionMismatch,
        Error::Value(_) | Error::Config(_) | Error::ConfigLine { .. } => {
            KfacStatus::InvalidArgument
        }
        Error::Singular { .. } => KfacStatus::SingularMatrix,
        Error::State(_) => KfacStatus::NotReady,
        _ => KfacStatus::Internal,
    }
}

fn report(err: Error) -> KfacStatus {
    record_error(status_of(&err), &err.to_string())
}

fn null_arg(name: &str) -> KfacStatus {
    record_error(KfacStatus::NullPointer, &format!("{name} must not be null"))
}

/// Run a body that already performs its own error reporting, converting any
/// panic into a plain status so unwinding never crosses the C boundary.
fn guard(body: impl FnOnce() -> KfacStatus) -> KfacStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => record_error(KfacStatus::Internal, "internal panic"),
    }
}

/// Copy a row-major `rows x cols` buffer into a checked matrix.
///
/// # Safety
/// `ptr` must point to at least `rows * cols` readable doubles.
unsafe fn read_matrix(
    name: &str,
    ptr: *const f64,
    rows: usize,
    cols: usize,
) -> Result<Matrix, KfacStatus> {
    if ptr.is_null() {
        return Err(null_arg(name));
    }
    if rows == 0 || cols == 0 {
        return Err(record_error(
            KfacStatus::InvalidArgument,
            &format!("{name}: dimensions must be positive, got {rows}x{cols}"),
        ));
    }
    let Some(len) = rows.checked_mul(cols) else {
        return Err(record_error(
            KfacStatus::InvalidArgument,
            &format!("{name}: {rows}x{cols} overflows the address space"),
        ));
    };
    let src = unsafe { std::slice::from_raw_parts(ptr, len) };
    let mut m = Matrix::zeros(rows, cols);
    m.as_mut_slice().copy_from_slice(src);
    if !m.all_finite() {
        return Err(record_error(
            KfacStatus::InvalidArgument,
            &format!("{name}: every entry must be finite"),
        ));
    }
    Ok(m)
}

/// Copy a matrix into a caller-owned row-major buffer of the same size.
///
/// # Safety
/// `ptr` must point to at least `m.rows() * m.cols()` writable doubles.
unsafe fn write_matrix(ptr: *mut f64, m: &Matrix) {
    let dst = unsafe { std::slice::from_raw_parts_mut(ptr, m.rows() * m.cols()) };
    dst.copy_from_slice(m.as_slice());
}

/// Allocate a fresh preconditioner handle and store it in `*out`.
///
/// The handle starts empty: feed it covariance estimates with
/// `kfac_preconditioner_update_factors`, cache their eigendecompositions
/// with `kfac_preconditioner_decompose`, then transform gradients with
/// `kfac_preconditioner_apply`. Release it with `kfac_preconditioner_free`.
///
/// # Safety
/// `out` must be a valid pointer to a `KfacPreconditioner*`.
#[no_mangle]
pub unsafe extern "C" fn kfac_preconditioner_new(
    out: *mut *mut KfacPreconditioner,
) -> KfacStatus {
    if out.is_null() {
        return null_arg("out");
    }
    guard(|| {
        let handle = Box::new(KfacPreconditioner { state: LayerKfacState::new(0) });
        unsafe { *out = Box::into_raw(handle) };
        KfacStatus::Ok
    })
}

/// Release a handle created by `kfac_preconditioner_new`. Passing null is a
/// harmless no-op; passing the same handle twice is undefined behavior.
///
/// # Safety
/// `p`, when non-null, must be an unreleased pointer from
/// `kfac_preconditioner_new`.
#[no_mangle]
pub unsafe extern "C" fn kfac_preconditioner_free(p: *mut KfacPreconditioner) {
    if !p.is_null() {
        drop(unsafe { Box::from_raw(p) });
    }
}

/// Blend one batch's covariance estimates into the running factors.
///
/// `input_cov` is the symmetric `input_dim x input_dim` covariance of layer
/// inputs (with the bias column folded in, when the layer has one) and
/// `output_cov` the symmetric `output_dim x output_dim` covariance of
/// output gradients, both row-major. `weight` in (0, 1] is the exponential
/// moving-average coefficient given to the new estimates; the first call
/// adopts them outright. Factor shapes are fixed by the first call.
///
/// # Safety
/// `p` must be a live handle; the buffers must hold `input_dim*input_dim`
/// and `output_dim*output_dim` readable doubles respectively.
#[no_mangle]
pub unsafe extern "C" fn kfac_preconditioner_update_factors(
    p: *mut KfacPreconditioner,
    input_cov: *const f64,
    input_dim: usize,
    output_cov: *const f64,
    output_dim: usize,
    weight: f64,
) -> KfacStatus {
    if p.is_null() {
        return null_arg("preconditioner");
    }
    guard(|| {
        let a = match unsafe { read_matrix("input_cov", input_cov, input_dim, input_dim) } {
            Ok(m) => m,
            Err(status) => return status,
        };
        let g = match unsafe { read_matrix("output_cov", output_cov, output_dim, output_dim) } {
            Ok(m) => m,
            Err(status) => return status,
        };
        let handle = unsafe { &mut *p };
        match handle.state.update_factors_from_batch(a, g, weight) {
            Ok(()) => KfacStatus::Ok,
            Err(e) => report(e),
        }
    })
}

/// Recompute and cache the eigendecompositions of both running factors.
/// Call after one or more factor updates; `kfac_preconditioner_apply` uses
/// the most recent decomposition until this is called again.
///
/// # Safety
/// `p` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn kfac_preconditioner_decompose(p: *mut KfacPreconditioner) -> KfacStatus {
    if p.is_null() {
        return null_arg("preconditioner");
    }
    guard(|| {
        let handle = unsafe { &mut *p };
        match handle.state.decompose() {
            Ok(()) => KfacStatus::Ok,
            Err(e) => report(e),
        }
    })
}

/// Transform one layer gradient through the cached eigendecompositions:
/// rotate into the factors' eigenbasis, divide by the damped eigenvalue
/// products, and rotate back. `gradient` and `preconditioned_out` are
/// row-major `output_dim x input_dim` buffers matching the factor shapes;
/// `damping` must be >= 0. The two buffers may not alias.
///
/// Requires a prior `kfac_preconditioner_decompose`.
///
/// # Safety
/// `p` must be a live handle; both buffers must hold
/// `output_dim * input_dim` doubles (readable and writable respectively).
#[no_mangle]
pub unsafe extern "C" fn kfac_preconditioner_apply(
    p: *const KfacPreconditioner,
    gradient: *const f64,
    output_dim: usize,
    input_dim: usize,
    damping: f64,
    preconditioned_out: *mut f64,
) -> KfacStatus {
    if p.is_null() {
        return null_arg("preconditioner");
    }
    if preconditioned_out.is_null() {
        return null_arg("preconditioned_out");
    }
    guard(|| {
        let grad = match unsafe { read_matrix("gradient", gradient, output_dim, input_dim) } {
            Ok(m) => m,
            Err(status) => return status,
        };
        let handle = unsafe { &*p };
        match handle.state.precondition_eigen(&grad, damping) {
            Ok(update) => {
                unsafe { write_matrix(preconditioned_out, &update) };
                KfacStatus::Ok
            }
            Err(e) => report(e),
        }
    })
}

/// Like `kfac_preconditioner_apply`, but solves through explicitly damped
/// factor inverses instead of the eigendecompositions: each factor gets
/// `damping` added to its diagonal and is inverted directly. With zero
/// damping the two paths agree to rounding; with positive damping they are
/// intentionally different operators. Requires factors but no prior
/// decomposition.
///
/// # Safety
/// Same contract as `kfac_preconditioner_apply`.
#[no_mangle]
pub unsafe extern "C" fn kfac_preconditioner_apply_factored(
    p: *const KfacPreconditioner,
    gradient: *const f64,
    output_dim: usize,
    input_dim: usize,
    damping: f64,
    preconditioned_out: *mut f64,
) -> KfacStatus {
    if p.is_null() {
        return null_arg("preconditioner");
    }
    if preconditioned_out.is_null() {
        return null_arg("preconditioned_out");
    }
    guard(|| {
        let grad = match unsafe { read_matrix("gradient", gradient, output_dim, input_dim) } {
            Ok(m) => m,
            Err(status) => return status,
        };
        let handle = unsafe { &*p };
        match handle.state.precondition_factored_inverse(&grad, damping) {
            Ok(update) => {
                unsafe { write_matrix(preconditioned_out, &update) };
                KfacStatus::Ok
            }
            Err(e) => report(e),
        }
    })
}

/// Decompose a symmetric `dim x dim` matrix as `Q diag(lambda) Q^T`.
///
/// `matrix` is row-major and must be symmetric to within rounding noise.
/// `eigenvectors_out` receives the orthonormal basis `Q` row-major (column
/// `j` is the eigenvector paired with `eigenvalues_out[j]`) and
/// `eigenvalues_out` the eigenvalues in descending order. Identical input
/// bits always give identical output bits.
///
/// # Safety
/// `matrix` and `eigenvectors_out` must hold `dim * dim` doubles (readable
/// and writable respectively) and `eigenvalues_out` must hold `dim`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn kfac_sym_eig(
    matrix: *const f64,
    dim: usize,
    eigenvectors_out: *mut f64,
    eigenvalues_out: *mut f64,
) -> KfacStatus {
    if eigenvectors_out.is_null() {
        return null_arg("eigenvectors_out");
    }
    if eigenvalues_out.is_null() {
        return null_arg("eigenvalues_out");
    }
    guard(|| {
        let m = match unsafe { read_matrix("matrix", matrix, dim, dim) } {
            Ok(m) => m,
            Err(status) => return status,
        };
        match sym_eig(&m) {
            Ok(eig) => {
                unsafe {
                    write_matrix(eigenvectors_out, &eig.q);
                    std::slice::from_raw_parts_mut(eigenvalues_out, dim)
                        .copy_from_slice(&eig.lambda);
                }
                KfacStatus::Ok
            }
            Err(e) => report(e),
        }
    })
}

/// Short static name for a status code, e.g. `"ok"` or `"not ready"`. Never
/// null; the string must not be freed.
#[no_mangle]
pub extern "C" fn kfac_status_name(status: KfacStatus) -> *const c_char {
    let name: &'static [u8] = match status {
        KfacStatus::Ok => b"ok\0",
        KfacStatus::NullPointer => b"null pointer\0",
        KfacStatus::InvalidArgument => b"invalid argument\0",
        KfacStatus::DimensionMismatch => b"dimension mismatch\0",
        KfacStatus::SingularMatrix => b"singular matrix\0",
        KfacStatus::NotReady => b"not ready\0",
        KfacStatus::Internal => b"internal error\0",
    };
    name.as_ptr() as *const c_char
}

/// Description of the most recent failure on the calling thread, or an
/// empty string if nothing has failed yet. The pointer stays valid until
/// the next failing call on the same thread; copy the string to keep it.
#[no_mangle]
pub extern "C" fn kfac_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}
