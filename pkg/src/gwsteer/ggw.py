"""Squared Gaussian Gromov-Wasserstein discrepancy and its difference-of-convex split.

The closed form compares two centered Gaussians through their sorted
covariance spectra; it is invariant under rotations and reflections of either
marginal.  For the steering objective the discrepancy splits into a convex
part (a squared trace gap plus a Frobenius term) minus a convex spectral
alignment term, whose supporting linearization at the current iterate is what
each convex subproblem minimizes.

Slot convention: the first argument must be nondegenerate (its covariance
positive definite) and at least as large in dimension as the second.  The
closed form is evaluated exactly as stated in its source, whose correction
term makes the value order-dependent for spectra of unequal Frobenius norm;
reported costs therefore always place the optimized covariance (floored to be
definite) in the first slot and the reference covariance in the second.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import InvalidInputError, eig_sym_descending, require_symmetric

__all__ = [
    "DegenerateSourceError",
    "GgwValue",
    "DcSplit",
    "ggw_squared",
    "concave_term",
    "dca_linearization",
    "make_dc_split",
]

# eigenvalues at or below this relative level count as zero when deciding
# whether the first slot is degenerate
PD_REL_TOL = 1e-12


class DegenerateSourceError(ValueError):
    """Raised when the nonsingular-slot covariance is (numerically) singular."""


@dataclass(frozen=True)
class GgwValue:
    """Squared discrepancy together with its three summands.

    ``total = trace_term + offdiag_term + correction_term`` with
    ``trace_term = 4 (tr D0 - tr D1)^2``,
    ``offdiag_term = 8 ||D0^(k) - D1||_F^2`` and
    ``correction_term = -8 (||D0^(k)||_F^2 - ||D1||_F^2)``,
    where the spectra are sorted non-increasing and ``D0^(k)`` keeps the
    leading block matching the second argument's dimension.
    """

    total: float
    trace_term: float
    offdiag_term: float
    correction_term: float


def _descending_spectrum(M: np.ndarray, name: str) -> np.ndarray:
    M = require_symmetric(M, name)
    return eig_sym_descending(M).values


def ggw_squared(S1: np.ndarray, S2: np.ndarray) -> GgwValue:
    """Closed-form squared discrepancy between centered Gaussians N(0, S1), N(0, S2).

    Requires ``dim(S1) >= dim(S2)`` and ``S1`` positive definite; swapping
    arguments to satisfy this is the caller's responsibility.
    """
    d0 = _descending_spectrum(S1, "S1")
    d1 = _descending_spectrum(S2, "S2")
    if d0.size < d1.size:
        raise InvalidInputError(
            f"first argument must have dimension >= second ({d0.size} < {d1.size}); "
            "swap the arguments"
        )
    if d1.size and d1[-1] < -1e-10:
        raise InvalidInputError("S2 must be positive semidefinite")
    scale = max(1.0, float(d0[0]))
    if d0[-1] <= PD_REL_TOL * scale:
        raise DegenerateSourceError(
            "first-slot covariance is singular; floor it or swap the arguments"
        )
    lead = d0[: d1.size]
    trace_term = 4.0 * float(d0.sum() - d1.sum()) ** 2
    offdiag_term = 8.0 * float(np.sum((lead - d1) ** 2))
    correction_term = -8.0 * float(np.sum(lead ** 2) - np.sum(d1 ** 2))
    return GgwValue(
        total=trace_term + offdiag_term + correction_term,
        trace_term=trace_term,
        offdiag_term=offdiag_term,
        correction_term=correction_term,
    )


def concave_term(Sigma: np.ndarray, Sigma_target: np.ndarray) -> float:
    """Spectral alignment value tr(D D_target) with both spectra sorted non-increasing.

    Equals the maximum of ``tr(S Sigma S' Sigma_target)`` over orthogonal
    ``S``, hence is a maximum of linear functions of ``Sigma`` and convex.
    """
    d = _descending_spectrum(Sigma, "Sigma")
    dt = _descending_spectrum(Sigma_target, "Sigma_target")
    k = min(d.size, dt.size)
    return float(np.dot(d[:k], dt[:k]))


def dca_linearization(Sigma_current: np.ndarray, Sigma_target: np.ndarray) -> np.ndarray:
    """Supporting linearization matrix of the alignment term at ``Sigma_current``.

    Returns ``Q = V D_target V'`` with ``V`` the descending eigenvectors of
    the current covariance and ``D_target`` the descending target spectrum,
    so that ``tr(Sigma Q) <= concave_term(Sigma, Sigma_target)`` for every
    symmetric ``Sigma``, with equality at the anchor.
    """
    cur = require_symmetric(Sigma_current, "Sigma_current")
    tgt = require_symmetric(Sigma_target, "Sigma_target")
    if cur.shape != tgt.shape:
        raise InvalidInputError(
            f"shape mismatch: {cur.shape} vs {tgt.shape}; the linearization needs equal dimensions"
        )
    eig_cur = eig_sym_descending(cur)
    d_target = eig_sym_descending(tgt).values
    V = eig_cur.vectors
    return 0.5 * ((V * d_target) @ V.T + ((V * d_target) @ V.T).T)


@dataclass(frozen=True)
class DcSplit:
    """Convex-minus-convex decomposition of the terminal covariance cost.

    ``convex_value(S) - concave_value(S) + constant_offset`` reproduces:

    * for ``frobenius_weight = 16``: the closed form :func:`ggw_squared` with
      the reference spectrum placed in the first slot (valid on definite
      reference covariances), and
    * for ``frobenius_weight = 8`` (the variant the optimizer minimizes): the
      symmetric spectral form ``4 (tr gap)^2 + 8 ||D - D_target||_F^2``,
      whose minimum over PSD matrices sits exactly at the target spectrum.
    """

    quadratic_weight: float       # multiplies the squared trace gap
    frobenius_weight: float       # 8 or 16, multiplies ||Sigma||_F^2
    concave_weight: float         # multiplies the alignment term
    target_eigs: np.ndarray       # descending reference spectrum
    constant_offset: float

    def convex_value(self, Sigma: np.ndarray) -> float:
        d = _descending_spectrum(Sigma, "Sigma")
        gap = float(d.sum() - self.target_eigs.sum())
        return self.quadratic_weight * gap ** 2 + self.frobenius_weight * float(np.sum(d ** 2))

    def concave_value(self, Sigma: np.ndarray) -> float:
        d = _descending_spectrum(Sigma, "Sigma")
        k = min(d.size, self.target_eigs.size)
        return self.concave_weight * float(np.dot(d[:k], self.target_eigs[:k]))

    def evaluate(self, Sigma: np.ndarray) -> float:
        return self.convex_value(Sigma) - self.concave_value(Sigma) + self.constant_offset


def make_dc_split(Sigma_target: np.ndarray, frobenius_weight: float = 8.0) -> DcSplit:
    """Build the DC split for a given reference covariance.

    ``frobenius_weight`` must be 8 (default; minimized by the solver and
    anchored at the reference spectrum) or 16 (matches :func:`ggw_squared`
    with swapped slots on definite references).
    """
    if frobenius_weight not in (8.0, 16.0):
        raise InvalidInputError(f"frobenius weight must be 8 or 16, got {frobenius_weight}")
    d_target = _descending_spectrum(Sigma_target, "Sigma_target")
    offset = 8.0 * float(np.sum(d_target ** 2)) if frobenius_weight == 8.0 else 0.0
    return DcSplit(
        quadratic_weight=4.0,
        frobenius_weight=float(frobenius_weight),
        concave_weight=16.0,
        target_eigs=d_target,
        constant_offset=offset,
    )
