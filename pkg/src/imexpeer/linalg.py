"""Small dense matrix kernel: pivoted LU solves, eigenvalues, spectral radii.

Tableau-scale matrices (s <= 4) and moderately sized Newton matrices go
through the same entry points.  Factorizations are delegated to LAPACK via
scipy; the pivot threshold that declares singularity is applied on top.
"""

from __future__ import annotations

import warnings

import numpy as np
import scipy.linalg

PIVOT_RTOL = 1e-14
MAX_EIG_DIM = 16


class SingularMatrixError(np.linalg.LinAlgError):
    pass


class EigenvalueError(np.linalg.LinAlgError):
    pass


def _as_matrix(A) -> np.ndarray:
    A = np.asarray(A)
    if A.ndim != 2:
        raise ValueError(f"expected a 2-d array, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    return A


class LUFactor:
    """Partial-pivoting LU factorization of a square matrix.

    Raises :class:`SingularMatrixError` if any pivot of ``U`` is smaller than
    ``PIVOT_RTOL * ||A||_inf``.
    """

    def __init__(self, A):
        A = _as_matrix(A)
        n, k = A.shape
        if n != k:
            raise ValueError(f"LU needs a square matrix, got {A.shape}")
        self.n = n
        norm = np.abs(A).sum(axis=1).max() if n else 0.0
        with warnings.catch_warnings():
            # singularity is reported through SingularMatrixError below
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            self._lu, self._piv = scipy.linalg.lu_factor(A, check_finite=False)
        pivots = np.abs(np.diag(self._lu))
        if n and (norm == 0.0 or pivots.min() < PIVOT_RTOL * norm):
            raise SingularMatrixError(
                f"matrix is singular to working precision "
                f"(min pivot {pivots.min():.3e}, ||A||_inf {norm:.3e})")

    def solve(self, B) -> np.ndarray:
        B = np.asarray(B)
        if B.shape[0] != self.n:
            raise ValueError(f"right-hand side has {B.shape[0]} rows, expected {self.n}")
        return scipy.linalg.lu_solve((self._lu, self._piv), B, check_finite=False)


def lu_solve(A, B) -> np.ndarray:
    """Solve ``A X = B`` by LU with partial pivoting."""
    return LUFactor(A).solve(B)


def inv(A) -> np.ndarray:
    A = _as_matrix(A)
    return lu_solve(A, np.eye(A.shape[0], dtype=A.dtype))


def eigenvalues(A) -> np.ndarray:
    """All eigenvalues of a small square matrix, with multiplicity.

    Hessenberg reduction followed by shifted QR (LAPACK ``geev``).
    """
    A = _as_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"eigenvalues need a square matrix, got {A.shape}")
    if A.shape[0] > MAX_EIG_DIM:
        raise ValueError(f"dimension {A.shape[0]} exceeds tableau-scale limit {MAX_EIG_DIM}")
    try:
        return np.linalg.eigvals(A).astype(complex)
    except np.linalg.LinAlgError as exc:
        raise EigenvalueError(f"QR iteration did not converge: {exc}") from exc


def spectral_radius(A) -> float:
    lam = eigenvalues(A)
    return float(np.abs(lam).max()) if lam.size else 0.0


def batched_spectral_radius(A, B=None) -> np.ndarray:
    """Spectral radii of a stack of matrices, or of ``A^{-1} B`` stacked.

    ``A`` and ``B`` have shape ``(..., s, s)``.  Entries whose system matrix
    is singular (or produces non-finite values) get radius ``inf``.
    """
    A = np.asarray(A)
    if B is not None:
        with np.errstate(all="ignore"):
            try:
                M = np.linalg.solve(A, B)
            except np.linalg.LinAlgError:
                M = _solve_each(A, B)
    else:
        M = A
    out = np.full(M.shape[:-2], np.inf)
    good = np.all(np.isfinite(M), axis=(-2, -1))
    if np.any(good):
        with np.errstate(all="ignore"):
            out[good] = np.abs(np.linalg.eigvals(M[good])).max(axis=-1)
    return out


def _solve_each(A, B):
    M = np.full(np.broadcast_shapes(A.shape, B.shape), np.nan, dtype=np.result_type(A, B))
    A = np.broadcast_to(A, M.shape)
    B = np.broadcast_to(B, M.shape)
    for idx in np.ndindex(M.shape[:-2]):
        try:
            M[idx] = np.linalg.solve(A[idx], B[idx])
        except np.linalg.LinAlgError:
            pass
    return M


def null_vector(A, tol: float = 1e-8) -> np.ndarray:
    """Basis vector of the one-dimensional null space of a small matrix.

    Gaussian elimination with complete pivoting; the numerical rank is the
    number of pivots above ``tol * max|a_ij|``.  Raises ``ValueError`` when
    the null space is not one-dimensional.
    """
    U = np.array(_as_matrix(A), dtype=float)
    n = U.shape[0]
    if U.shape[1] != n:
        raise ValueError("null_vector needs a square matrix")
    scale = np.abs(U).max() if U.size else 0.0
    cols = np.arange(n)
    rank = 0
    for k in range(n):
        sub = np.abs(U[k:, k:])
        i, j = np.unravel_index(np.argmax(sub), sub.shape)
        if sub[i, j] <= tol * scale:
            break
        i += k
        j += k
        U[[k, i]] = U[[i, k]]
        U[:, [k, j]] = U[:, [j, k]]
        cols[[k, j]] = cols[[j, k]]
        U[k + 1:] -= np.outer(U[k + 1:, k] / U[k, k], U[k])
        rank += 1
    if n - rank != 1:
        raise ValueError(f"null space has dimension {n - rank}, expected 1")
    # back substitution with the free variable set to 1
    y = np.zeros(n)
    y[n - 1] = 1.0
    for k in range(n - 2, -1, -1):
        y[k] = -(U[k, k + 1:] @ y[k + 1:]) / U[k, k]
    x = np.empty(n)
    x[cols] = y
    return x
