"""Shared dense linear-algebra kernels.

All helpers assume float64 and go through raw LAPACK/BLAS handles. The
Python-level scipy wrappers cost tens of microseconds per call, which is
real money in the optimizer hot path at small d, and the gemm-based inverse
keeps the cubic work in a BLAS3 kernel with flat efficiency across sizes.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import get_blas_funcs, get_lapack_funcs

__all__ = [
    "NotPositiveDefiniteError",
    "chol_lower",
    "try_chol_lower",
    "chol_solve",
    "logdet_from_chol",
    "spd_inverse",
    "spd_solve",
    "symmetrize",
    "gram",
    "tri_inverse_lower",
]

_probe = np.empty((1, 1), dtype=np.float64)
_potrf, _trtri, _potrs = get_lapack_funcs(("potrf", "trtri", "potrs"), (_probe,))
_gemm, _syrk = get_blas_funcs(("gemm", "syrk"), (_probe,))


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Cholesky factorization hit a non-positive pivot.

    ``pivot`` is the 1-based index of the failing leading minor, straight
    from LAPACK's info code.
    """

    def __init__(self, pivot: int, context: str = ""):
        self.pivot = int(pivot)
        msg = "not positive definite (failing pivot %d)" % self.pivot
        if context:
            msg = context + ": " + msg
        super().__init__(msg)


def _as_f64(A: np.ndarray) -> np.ndarray:
    A = np.asarray(A)
    if A.dtype != np.float64:
        A = A.astype(np.float64)
    return A


def chol_lower(A: np.ndarray, context: str = "") -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive definite matrix."""
    L, info = _potrf(_as_f64(A), lower=1, overwrite_a=0, clean=1)
    if info != 0:
        raise NotPositiveDefiniteError(info, context)
    return L


def try_chol_lower(A: np.ndarray) -> np.ndarray | None:
    """Like :func:`chol_lower` but returns None instead of raising.

    Used as a cheap positive-definiteness certificate; the upper triangle
    of the result is left unclean, so only the diagonal and lower part are
    meaningful.
    """
    L, info = _potrf(_as_f64(A), lower=1, overwrite_a=0, clean=0)
    if info != 0:
        return None
    return L


def logdet_from_chol(L: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diagonal(L))))


def spd_inverse(A: np.ndarray) -> np.ndarray:
    """Dense inverse of an SPD matrix via potrf + trtri + gemm.

    The result is exactly symmetric: it is formed as Li^T @ Li by one gemm,
    whose (i, j) and (j, i) entries sum identical products in the same order.
    """
    # clean=1 zeroes the upper triangle; gemm below reads the full array
    L, info = _potrf(_as_f64(A), lower=1, overwrite_a=0, clean=1)
    if info != 0:
        raise NotPositiveDefiniteError(info)
    Li, info = _trtri(L, lower=1, unitdiag=0, overwrite_c=1)
    if info != 0:
        raise NotPositiveDefiniteError(info, "triangular inverse")
    return _gemm(1.0, Li, Li, trans_a=1)


def chol_solve(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve A X = B given the lower Cholesky factor L of A."""
    b = _as_f64(B)
    squeeze = b.ndim == 1
    if squeeze:
        b = b[:, None]
    X, info = _potrs(L, b, lower=1)
    if info != 0:
        raise np.linalg.LinAlgError("potrs failed with info %d" % info)
    return X[:, 0] if squeeze else X


def tri_inverse_lower(L: np.ndarray) -> np.ndarray:
    """Inverse of a lower-triangular matrix."""
    Li, info = _trtri(_as_f64(L), lower=1, unitdiag=0, overwrite_c=0)
    if info != 0:
        raise np.linalg.LinAlgError("trtri failed with info %d" % info)
    return Li


def spd_solve(A: np.ndarray, B: np.ndarray, context: str = "") -> np.ndarray:
    """Solve A X = B for SPD A. B may be a vector or a matrix."""
    L = chol_lower(A, context)
    b = _as_f64(B)
    squeeze = b.ndim == 1
    if squeeze:
        b = b[:, None]
    X, info = _potrs(L, b, lower=1)
    if info != 0:
        raise np.linalg.LinAlgError("potrs failed with info %d" % info)
    return X[:, 0] if squeeze else X


def symmetrize(A: np.ndarray) -> np.ndarray:
    return (A + A.T) * 0.5


def gram(Z: np.ndarray) -> np.ndarray:
    """Z^T Z as a full symmetric matrix (syrk + mirror)."""
    U = _syrk(1.0, _as_f64(Z), trans=1, lower=0)
    # syrk fills the upper triangle only; mirror it
    return np.triu(U) + np.triu(U, 1).T
