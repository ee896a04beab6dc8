"""Steering problem instances and the benchmark configuration.

A :class:`SteeringProblem` bundles everything the solver needs besides the
experiment data: horizon, initial mixture, target covariance, half-plane
constraints with their violation budget, cost weights and the data-usage mode
(direct, indirect or regularized).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .chance import HalfPlane
from .linalg import InvalidInputError, require_symmetric
from .mixture import GaussianMixture
from .plant import LtiPlant

__all__ = [
    "MODES",
    "SteeringProblem",
    "benchmark_plant",
    "benchmark_problem",
]

MODES = ("direct", "indirect", "regularized")


@dataclass(frozen=True)
class SteeringProblem:
    """One steering instance (the plant itself stays held out)."""

    horizon: int
    initial: GaussianMixture
    target_cov: np.ndarray
    planes: tuple[HalfPlane, ...] = ()
    risk_budget: float = 0.01
    control_weight: float = 1.0        # R_t = control_weight * I for every t
    epsilon: float = 1.0               # terminal-cost weight
    frobenius_weight: float = 8.0      # DC-split variant (8 or 16)
    mode: str = "direct"
    reg_lambda: float = 0.0
    chance_enabled: bool = True
    sigma_r_mode: str = "initial"      # surrogate anchors: "initial" or "reanchor"

    def __post_init__(self):
        object.__setattr__(self, "target_cov", require_symmetric(self.target_cov, "target_cov"))
        object.__setattr__(self, "planes", tuple(self.planes))
        if np.linalg.eigvalsh(self.target_cov).min() < -1e-10:
            raise InvalidInputError("target covariance must be positive semidefinite")
        if self.horizon < 1:
            raise InvalidInputError("horizon must be at least 1")
        if self.mode not in MODES:
            raise InvalidInputError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "regularized" and self.reg_lambda <= 0.0:
            raise InvalidInputError("regularized mode needs a positive penalty weight")
        if self.reg_lambda < 0.0:
            raise InvalidInputError("penalty weight must be non-negative")
        if self.epsilon < 0.0:
            raise InvalidInputError("terminal-cost weight must be non-negative")
        if self.control_weight <= 0.0:
            raise InvalidInputError("control weight must be positive")
        n = self.initial.dim
        if self.target_cov.shape != (n, n):
            raise InvalidInputError(
                f"target covariance is {self.target_cov.shape}, state dimension is {n}"
            )
        for plane in self.planes:
            if plane.dim != n:
                raise InvalidInputError("half-plane dimension disagrees with the state")
        if self.chance_enabled and self.planes and not (0.0 < self.risk_budget <= 0.5):
            raise InvalidInputError("violation budget must lie in (0, 0.5]")
        if self.sigma_r_mode not in ("initial", "reanchor"):
            raise InvalidInputError("sigma_r_mode must be 'initial' or 'reanchor'")

    @property
    def n(self) -> int:
        return self.initial.dim

    @property
    def K(self) -> int:
        return self.initial.K

    @property
    def L(self) -> int:
        return len(self.planes) if self.chance_enabled else 0

    def R_matrices(self, m: int) -> np.ndarray:
        """Per-step control weight matrices, shape (N, m, m)."""
        return np.broadcast_to(self.control_weight * np.eye(m), (self.horizon, m, m)).copy()

    def without_chance_constraints(self) -> "SteeringProblem":
        return replace(self, chance_enabled=False)


def benchmark_plant() -> LtiPlant:
    """The two-state, single-input plant used by the line-alignment benchmark."""
    return LtiPlant(A=np.array([[1.0, 0.1], [-0.3, 1.0]]),
                    B=np.array([[0.7], [0.4]]))


def benchmark_problem(
    mode: str = "direct",
    reg_lambda: float = 0.0,
    epsilon: float = 1.0,
    chance_enabled: bool = True,
    frobenius_weight: float = 8.0,
) -> SteeringProblem:
    """Line-alignment benchmark: trimodal start, rank-one target, one half-plane.

    Horizon 15, budget 0.01 split uniformly over time, unit initial
    covariances and a diagonal rank-one target (a straight-line terminal
    shape).
    """
    initial = GaussianMixture(
        weights=np.array([0.4, 0.3, 0.3]),
        means=np.array([[-5.0, 0.0], [-1.0, 0.0], [-9.0, 0.0]]),
        covariances=np.stack([np.eye(2)] * 3),
    )
    return SteeringProblem(
        horizon=15,
        initial=initial,
        target_cov=np.diag([2.0, 0.0]),
        planes=(HalfPlane(a=[0.707, 0.707], b=8.48),),
        risk_budget=0.01,
        control_weight=1.0,
        epsilon=epsilon,
        frobenius_weight=frobenius_weight,
        mode=mode,
        reg_lambda=reg_lambda,
        chance_enabled=chance_enabled,
    )
