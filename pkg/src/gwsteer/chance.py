"""Half-plane joint chance constraints: risk allocation, convex surrogate rows, accounting.

The joint requirement that the state stay inside every half-plane at every
step with probability at least 1 - V is split by a union bound into
per-(component, plane, time) risks, each enforced through a deterministic
inequality that is affine in the component mean and covariance.  The
square-root of the variance is over-approximated by its tangent at a fixed
positive-definite anchor, which keeps each subproblem a single conic solve.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .linalg import InvalidInputError, inverse_normal_cdf, require_symmetric
from .mixture import Trajectory

__all__ = [
    "RiskTooLargeError",
    "HalfPlane",
    "RiskAllocation",
    "allocate_uniform",
    "linear_coefficients",
    "empirical_violation",
]


class RiskTooLargeError(ValueError):
    """Raised for per-constraint risks above one half (the surrogate would lose convexity)."""


@dataclass(frozen=True)
class HalfPlane:
    """Feasible set {x : a'x <= b}; the normal is unit length after construction."""

    a: np.ndarray
    b: float

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float).reshape(-1)
        norm = float(np.linalg.norm(a))
        if not np.isfinite(norm) or norm == 0.0:
            raise InvalidInputError("half-plane normal must be nonzero and finite")
        object.__setattr__(self, "a", a / norm)
        object.__setattr__(self, "b", float(self.b) / norm)

    @property
    def dim(self) -> int:
        return self.a.shape[0]

    def contains(self, x: np.ndarray) -> bool:
        return float(self.a @ x) <= self.b


@dataclass(frozen=True)
class RiskAllocation:
    """Per-(component, plane, time) risks r[i, j, t-1] for t in [1, N] under budget V."""

    total_budget: float
    risks: np.ndarray  # (K, L, N)
    sigma_r: np.ndarray | None = None  # optional (K, n, n) per-component anchors

    def __post_init__(self):
        risks = np.asarray(self.risks, dtype=float)
        object.__setattr__(self, "risks", risks)
        if risks.ndim != 3:
            raise InvalidInputError("risks must be indexed by (component, plane, time)")
        if np.any(risks <= 0.0) or np.any(risks > 0.5):
            raise InvalidInputError("every per-constraint risk must lie in (0, 0.5]")

    @property
    def K(self) -> int:
        return self.risks.shape[0]

    @property
    def L(self) -> int:
        return self.risks.shape[1]

    @property
    def N(self) -> int:
        return self.risks.shape[2]

    def budget_usage(self, weights: np.ndarray) -> float:
        """Weighted risk sum that must not exceed the budget."""
        w = np.asarray(weights, dtype=float).reshape(-1)
        return float(np.einsum("i,ijt->", w, self.risks))

    def with_sigma_r(self, sigma_r: np.ndarray) -> "RiskAllocation":
        return replace(self, sigma_r=np.asarray(sigma_r, dtype=float))


def allocate_uniform(V: float, K: int, L: int, N: int, weights: np.ndarray) -> RiskAllocation:
    """Uniform split of the budget: r = V/N for a single plane, V/(L*N) otherwise.

    Because the weights sum to one, the weighted triple sum then equals V
    exactly.
    """
    if not (0.0 < V <= 0.5):
        raise InvalidInputError(f"violation budget must lie in (0, 0.5], got {V}")
    if min(K, L, N) < 1:
        raise InvalidInputError("K, L and N must all be positive")
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.shape[0] != K or abs(w.sum() - 1.0) > 1e-9:
        raise InvalidInputError("weights must be a length-K point on the simplex")
    r = V / N if L == 1 else V / (L * N)
    alloc = RiskAllocation(total_budget=float(V), risks=np.full((K, L, N), r))
    usage = alloc.budget_usage(w)
    if usage > V + 1e-12:
        raise InvalidInputError(f"allocation exceeds the budget: {usage} > {V}")
    return alloc


def linear_coefficients(plane: HalfPlane, risk: float, Sigma_r: np.ndarray) -> tuple[float, float]:
    """Coefficients (kappa, offset) of the deterministic surrogate row.

    The mean/covariance pair of one component satisfies the per-constraint
    risk whenever ``a'mu + kappa * (a' Sigma a) + offset <= b`` with
    ``kappa = C(1-r) / (2 sqrt(a' Sigma_r a))`` and
    ``offset = C(1-r) * sqrt(a' Sigma_r a) / 2``, where ``C`` is the inverse
    standard-normal CDF.  The tangent over-approximates the square root, so
    the row is sound for any positive-definite anchor.
    """
    if risk > 0.5:
        raise RiskTooLargeError(
            f"risk {risk} exceeds 0.5; the quantile would turn negative and flip convexity"
        )
    if risk <= 0.0:
        raise InvalidInputError(f"risk must be positive, got {risk}")
    Sigma_r = require_symmetric(Sigma_r, "Sigma_r")
    anchor = float(plane.a @ Sigma_r @ plane.a)
    if anchor <= 0.0:
        raise InvalidInputError("anchor covariance must be positive definite along the normal")
    root = np.sqrt(anchor)
    quantile = inverse_normal_cdf(1.0 - risk)
    return quantile / (2.0 * root), quantile * root / 2.0


def empirical_violation(trajectories, planes) -> float:
    """Fraction of rollouts leaving any half-plane at any step t in [1, N].

    Accepts a list of :class:`Trajectory` or a stacked state array of shape
    (count, N+1, n).  The initial state is not counted: the joint requirement
    covers t >= 1 only.
    """
    if isinstance(trajectories, np.ndarray):
        states = trajectories
    else:
        trajectories = list(trajectories)
        if not trajectories:
            raise InvalidInputError("need at least one trajectory")
        states = np.stack([
            t.states if isinstance(t, Trajectory) else np.asarray(t, dtype=float)
            for t in trajectories
        ])
    if states.ndim != 3 or states.shape[1] < 2:
        raise InvalidInputError("states must be (count, N+1, n) with N >= 1")
    violated = np.zeros(states.shape[0], dtype=bool)
    for plane in planes:
        margins = states[:, 1:, :] @ plane.a - plane.b  # (count, N)
        violated |= np.any(margins > 0.0, axis=1)
    return float(violated.mean())
