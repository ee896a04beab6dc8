"""Dense symmetric linear-algebra kernels shared across the solver stack.

Symmetric matrices are plain ``numpy`` arrays; every routine validates its
input, works on a symmetrized copy, and is deterministic for a given input
(including eigenvector signs and the ordering of tied eigenvalues), so that
downstream linearizations are bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "InvalidInputError",
    "DomainError",
    "EigenPairsDescending",
    "PseudoInverseResult",
    "sym",
    "require_symmetric",
    "eig_sym_descending",
    "pinv",
    "rank_with_threshold",
    "standard_normal_cdf",
    "inverse_normal_cdf",
    "psd_floor",
    "sampling_factor",
]

_SQRT2 = math.sqrt(2.0)


class InvalidInputError(ValueError):
    """Raised when a matrix argument violates a routine's preconditions."""


class DomainError(ValueError):
    """Raised when a scalar argument lies outside the mathematical domain."""


def sym(M: np.ndarray) -> np.ndarray:
    """Symmetric part (M + M') / 2."""
    return 0.5 * (M + M.T)


def require_symmetric(M: np.ndarray, name: str = "matrix", tol: float = 1e-8) -> np.ndarray:
    """Validate that ``M`` is square, finite and symmetric; return its symmetric part.

    Asymmetry beyond ``tol`` relative to the matrix scale is an error, tiny
    roundoff asymmetry is folded away.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise InvalidInputError(f"{name} must be square, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    scale = max(1.0, float(np.abs(M).max()))
    if np.abs(M - M.T).max() > tol * scale:
        raise InvalidInputError(f"{name} is not symmetric")
    return sym(M)


@dataclass(frozen=True)
class EigenPairsDescending:
    """Eigendecomposition with eigenvalues sorted non-increasing.

    ``vectors`` has orthonormal columns; column ``k`` pairs with ``values[k]``
    and ``vectors @ diag(values) @ vectors.T`` reconstructs the input.
    """

    values: np.ndarray
    vectors: np.ndarray


def _fix_sign(v: np.ndarray) -> np.ndarray:
    """Make the first component with magnitude above 1e-12 positive."""
    for x in v:
        if abs(x) > 1e-12:
            return v if x > 0 else -v
    return v


def eig_sym_descending(M: np.ndarray) -> EigenPairsDescending:
    """Symmetric eigendecomposition, eigenvalues sorted in decreasing order.

    Deterministic tie handling: each eigenvector's sign is fixed (first
    non-negligible component made positive) and, within groups of exactly
    equal eigenvalues, columns are sorted in decreasing lexicographic order
    of their entries.
    """
    M = require_symmetric(M)
    w, V = np.linalg.eigh(M)
    order = np.argsort(-w, kind="stable")
    w = w[order]
    V = V[:, order]
    for k in range(V.shape[1]):
        V[:, k] = _fix_sign(V[:, k])
    # reorder columns inside exact-tie groups
    start = 0
    while start < len(w):
        stop = start + 1
        while stop < len(w) and w[stop] == w[start]:
            stop += 1
        if stop - start > 1:
            cols = sorted(range(start, stop), key=lambda j: tuple(V[:, j]), reverse=True)
            V[:, start:stop] = V[:, cols]
        start = stop
    return EigenPairsDescending(values=w, vectors=V)


@dataclass(frozen=True)
class PseudoInverseResult:
    """Moore-Penrose pseudo-inverse with the rank decision made explicit."""

    pinv: np.ndarray
    rank: int
    tolerance_used: float


def pinv(A: np.ndarray, tol: float | None = None) -> PseudoInverseResult:
    """Moore-Penrose pseudo-inverse via SVD.

    ``tol`` is relative: singular values at or below ``tol * smax`` are
    treated as zero.  The default is ``max(A.shape) * eps``, the standard
    rank-revealing convention.  A zero matrix yields a zero pseudo-inverse
    of rank 0.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2:
        raise InvalidInputError(f"expected a 2-d array, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise InvalidInputError("input contains non-finite entries")
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if tol is None:
        tol = max(A.shape) * np.finfo(float).eps
    smax = s[0] if s.size else 0.0
    threshold = tol * smax
    keep = s > threshold
    rank = int(np.count_nonzero(keep))
    s_inv = np.zeros_like(s)
    s_inv[keep] = 1.0 / s[keep]
    return PseudoInverseResult(
        pinv=(Vt.T * s_inv) @ U.T,
        rank=rank,
        tolerance_used=float(threshold),
    )


def rank_with_threshold(A: np.ndarray, rel_tol: float = 1e-8) -> int:
    """Numerical rank: count of singular values above ``rel_tol * smax``."""
    s = np.linalg.svd(np.asarray(A, dtype=float), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > rel_tol * s[0]))


def standard_normal_cdf(x: float) -> float:
    """Standard normal CDF via the error function."""
    return 0.5 * (1.0 + math.erf(x / _SQRT2))


# Rational approximation for the inverse standard-normal CDF (relative error
# below 1.15e-9 on (0,1)), refined to near machine precision by one Newton
# step on the CDF.
_ICDF_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
           1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_ICDF_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
           6.680131188771972e+01, -1.328068155288572e+01)
_ICDF_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
           -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_ICDF_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
           3.754408661907416e+00)
_ICDF_P_LOW = 0.02425


def inverse_normal_cdf(p: float) -> float:
    """Inverse standard-normal CDF on the open interval (0, 1).

    Guarantees ``|cdf(result) - p| <= 1e-9`` and is strictly increasing.
    """
    p = float(p)
    if not (0.0 < p < 1.0) or math.isnan(p):
        raise DomainError(f"probability must lie strictly inside (0, 1), got {p!r}")
    a, b, c, d = _ICDF_A, _ICDF_B, _ICDF_C, _ICDF_D
    if p < _ICDF_P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    elif p <= 1.0 - _ICDF_P_LOW:
        q = p - 0.5
        r = q * q
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / \
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)
    else:
        q = math.sqrt(-2.0 * math.log1p(-p))
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    # one Newton step on the CDF
    err = standard_normal_cdf(x) - p
    pdf = math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    if pdf > 0.0:
        x -= err / pdf
    return x


def psd_floor(M: np.ndarray, delta: float = 0.0) -> np.ndarray:
    """Clamp the spectrum of a symmetric matrix at ``delta`` from below.

    Returns ``V max(D, delta) V'``; the result dominates ``delta * I`` and the
    operation is idempotent.
    """
    if delta < 0.0:
        raise InvalidInputError(f"delta must be non-negative, got {delta}")
    M = require_symmetric(M)
    w, V = np.linalg.eigh(M)
    if w.size and w[0] >= delta:  # already above the floor
        return M
    return sym((V * np.maximum(w, delta)) @ V.T)


def sampling_factor(M: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """Lower-triangular Cholesky factor of ``M`` floored at ``floor * I``.

    Used to draw Gaussian samples from possibly rank-deficient covariances.
    """
    return np.linalg.cholesky(psd_floor(M, floor))
