"""Dense kernels: SVD, truncation, balanced factor splits, Cholesky, nullspaces.

Everything here works on float64 numpy arrays and is a pure function of its
inputs. The decompositions themselves are delegated to LAPACK; this module pins
down the conventions the rest of the package relies on (sign, ordering, rank
threshold, error types).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import ArgumentError, NotPositiveDefiniteError, NumericalError

DEFAULT_RANK_TOL = 1e-10
SYMMETRY_TOL = 1e-9


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a finite 2-D float64 array (no copy when already one)."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ArgumentError(f"{name} must be 2-D, got shape {m.shape}")
    if m.shape[0] == 0 or m.shape[1] == 0:
        raise ArgumentError(f"{name} has an empty dimension: {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ArgumentError(f"{name} contains NaN or Inf")
    return m


@dataclass(frozen=True)
class SvdFactorization:
    """Thin SVD ``u @ diag(s) @ vt`` with ``s`` non-increasing."""

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape[0], self.vt.shape[1]

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.vt

    def rank(self, tol: float = DEFAULT_RANK_TOL) -> int:
        return numerical_rank(self.s, tol)


@dataclass(frozen=True)
class CholeskyFactor:
    l: np.ndarray  # noqa: E741

    def reconstruct(self) -> np.ndarray:
        return self.l @ self.l.T


def _fix_signs(u: np.ndarray, vt: np.ndarray) -> None:
    # largest-magnitude entry of each left vector is made non-negative
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    u *= signs
    vt *= signs[:, None]


def _lapack_svd(m: np.ndarray, full_matrices: bool):
    try:
        return scipy.linalg.svd(m, full_matrices=full_matrices, lapack_driver="gesdd")
    except (np.linalg.LinAlgError, ValueError):
        pass
    # divide-and-conquer occasionally fails to converge; QR iteration is slower but sturdier
    try:
        return scipy.linalg.svd(m, full_matrices=full_matrices, lapack_driver="gesvd")
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"SVD did not converge for matrix of shape {m.shape}") from exc


def svd(m) -> SvdFactorization:
    """Thin SVD of ``m`` with deterministic signs.

    Each left singular vector is flipped so its largest-magnitude entry is
    non-negative; the matching row of ``vt`` is flipped with it.
    """
    m = as_matrix(m)
    u, s, vt = _lapack_svd(m, full_matrices=False)
    u = np.array(u, dtype=np.float64)
    vt = np.array(vt, dtype=np.float64)
    _fix_signs(u, vt)
    return SvdFactorization(u, np.asarray(s, dtype=np.float64), vt)


def singular_values(m) -> np.ndarray:
    m = as_matrix(m)
    try:
        return scipy.linalg.svdvals(m)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"SVD did not converge for matrix of shape {m.shape}") from exc


def _check_trunc(f: SvdFactorization, m: int) -> int:
    if isinstance(m, bool) or int(m) != m:
        raise ArgumentError(f"truncation rank must be an integer, got {m!r}")
    m = int(m)
    if m < 1 or m > f.s.shape[0]:
        raise ArgumentError(f"truncation rank {m} outside [1, {f.s.shape[0]}]")
    return m


def truncate(f: SvdFactorization, m: int) -> SvdFactorization:
    """Keep the leading ``m`` singular triplets."""
    m = _check_trunc(f, m)
    return SvdFactorization(f.u[:, :m].copy(), f.s[:m].copy(), f.vt[:m].copy())


def low_rank_approx(w, r: int) -> np.ndarray:
    """Best rank-``r`` approximation of ``w`` in Frobenius norm."""
    return truncate(svd(w), r).reconstruct()


def factor_balanced(f: SvdFactorization, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Split the rank-``m`` truncation as ``a @ b`` with ``a = U_m S_m^½``, ``b = S_m^½ V_mᵀ``."""
    t = truncate(f, m)
    root = np.sqrt(t.s)
    return t.u * root, root[:, None] * t.vt


def residual_energy(s, m: int) -> float:
    """Sum of squared singular values past the first ``m``.

    This is the squared Frobenius error of the rank-``m`` truncation.
    """
    s = np.asarray(s, dtype=np.float64).ravel()
    if m < 0:
        raise ArgumentError(f"m must be non-negative, got {m}")
    if m >= s.shape[0]:
        return 0.0
    return math.fsum(float(v) * float(v) for v in s[m:])


def numerical_rank(s, tol: float = DEFAULT_RANK_TOL) -> int:
    """Count of singular values strictly above ``tol * s[0]``."""
    s = np.asarray(s, dtype=np.float64).ravel()
    if s.size == 0 or s[0] <= 0.0:
        return 0
    return int(np.count_nonzero(s > tol * s[0]))


def matrix_rank(w, tol: float = DEFAULT_RANK_TOL) -> int:
    return numerical_rank(singular_values(w), tol)


def cholesky(g) -> CholeskyFactor:
    """Lower-triangular ``l`` with ``l @ l.T == g``.

    Raises ``NotPositiveDefiniteError`` when ``g`` is not (numerically)
    positive definite, which is the caller's cue to add a ridge and retry.
    """
    g = as_matrix(g, "gram matrix")
    if g.shape[0] != g.shape[1]:
        raise ArgumentError(f"cholesky needs a square matrix, got {g.shape}")
    scale = max(np.abs(g).max(), np.finfo(np.float64).tiny)
    if np.abs(g - g.T).max() > SYMMETRY_TOL * scale:
        raise ArgumentError("cholesky input is not symmetric")
    try:
        l = np.linalg.cholesky(0.5 * (g + g.T))  # noqa: E741
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(
            f"matrix of shape {g.shape} is not positive definite; regularize with a ridge"
        ) from exc
    d = np.diag(l)
    # pivots at rounding level mean the matrix is singular in all but name
    floor = g.shape[0] * np.finfo(np.float64).eps * max(float(np.max(np.diag(g))), 0.0)
    if not np.all(np.isfinite(l)) or np.any(d <= 0.0) or np.any(d * d <= floor):
        raise NotPositiveDefiniteError(
            f"matrix of shape {g.shape} is not positive definite; regularize with a ridge"
        )
    return CholeskyFactor(l)


def nullspace_basis(w, tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Orthonormal basis (as columns) of the numerical kernel of ``w``."""
    w = as_matrix(w)
    _, s, vt = _lapack_svd(w, full_matrices=True)
    rank = numerical_rank(s, tol)
    return np.array(vt[rank:].T, dtype=np.float64)


def stack_rows(ws: Sequence[np.ndarray]) -> np.ndarray:
    if len(ws) == 0:
        raise ArgumentError("need at least one matrix")
    mats = [as_matrix(w) for w in ws]
    n = mats[0].shape[1]
    for i, w in enumerate(mats):
        if w.shape[1] != n:
            raise ArgumentError(f"matrix {i} has {w.shape[1]} columns, expected {n}")
    return np.vstack(mats)


def common_nullspace_dim(ws: Sequence[np.ndarray], tol: float = DEFAULT_RANK_TOL) -> int:
    """Dimension of the intersection of the kernels of ``ws``.

    Computed as the nullity of the vertically stacked matrix.
    """
    stacked = stack_rows(ws)
    return stacked.shape[1] - matrix_rank(stacked, tol)


def ratio_to_rank(ratio: float, rank: int) -> int:
    """Absolute rank for a ratio-``r`` approximation, rounding half up, at least 1."""
    if not 0.0 < ratio <= 1.0:
        raise ArgumentError(f"rank ratio must be in (0, 1], got {ratio}")
    return max(1, int(math.floor(ratio * rank + 0.5)))
