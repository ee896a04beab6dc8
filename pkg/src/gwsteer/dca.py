"""Outer difference-of-convex loop over the conic subproblems.

Each pass linearizes the concave alignment part of the terminal cost at the
current terminal covariance, solves the resulting conic subproblem, and
re-anchors.  Because the linearization supports the alignment term from
below, every subproblem minimizer weakly decreases the true objective, so the
recorded objective trace is non-increasing up to solver accuracy.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conic import SolverReport, SolverTolerances
from .dcocp import (
    AssembledProgram,
    PolicyRealization,
    assemble,
    control_cost_of_blocks,
    evaluate_dc_objective,
    recover_gains,
    solve_subproblem,
    uncontrolled_anchors,
)
from .ggw import dca_linearization, ggw_squared
from .linalg import InvalidInputError, psd_floor
from .chance import RiskAllocation, allocate_uniform
from .plant import DataMatrices
from .problem import SteeringProblem

__all__ = [
    "SteeringInfeasibleError",
    "DcaConfig",
    "DcaIterationRecord",
    "DcaTrace",
    "DcaResult",
    "initialize",
    "run",
    "save_trace_csv",
]

# anchors are floored at this level before the eigen-based linearization
ANCHOR_FLOOR = 1e-10


class SteeringInfeasibleError(RuntimeError):
    """Raised when the first subproblem is certified infeasible."""

    def __init__(self, labels):
        self.labels = tuple(labels)
        detail = ", ".join(self.labels) if self.labels else "no specific rows implicated"
        super().__init__(f"steering program infeasible; most implicated constraints: {detail}")


@dataclass(frozen=True)
class DcaConfig:
    max_iterations: int = 50
    objective_tol: float = 1e-6        # relative decrease below this stops the loop
    iterate_tol: float = 1e-6          # Frobenius change of the terminal covariance
    init_mode: str = "propagate"       # "propagate" (uncontrolled terminal) or "identity"
    orientation_starts: int = 12       # first-pass anchors over planar rotations (0 disables)
    tightening_weight: float = 50.0    # slack-penalty multiplier on the terminal-cost weight
    solver: SolverTolerances = field(default_factory=SolverTolerances)

    def __post_init__(self):
        if self.max_iterations < 1:
            raise InvalidInputError("need at least one iteration")
        if self.objective_tol <= 0.0 or self.iterate_tol <= 0.0:
            raise InvalidInputError("tolerances must be positive")
        if self.init_mode not in ("propagate", "identity"):
            raise InvalidInputError("init_mode must be 'propagate' or 'identity'")
        if self.orientation_starts < 0:
            raise InvalidInputError("orientation_starts must be non-negative")
        if self.tightening_weight < 0.0:
            raise InvalidInputError("tightening weight must be non-negative")


@dataclass(frozen=True)
class DcaIterationRecord:
    iteration: int
    objective: float          # exact DC objective at the iterate
    ggw_true: float           # closed-form discrepancy of the terminal covariance
    control_cost: float
    status: str
    sigma_N: np.ndarray


@dataclass
class DcaTrace:
    records: list[DcaIterationRecord] = field(default_factory=list)

    @property
    def objectives(self) -> np.ndarray:
        return np.array([r.objective for r in self.records])

    @property
    def iterations(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class DcaResult:
    trace: DcaTrace
    realization: PolicyRealization
    converged: bool
    stop_reason: str
    risk: RiskAllocation | None


def initialize(problem: SteeringProblem, data: DataMatrices,
               mode: str | None = None) -> np.ndarray:
    """Initial terminal-covariance anchor for the first linearization.

    ``propagate`` pushes the first component's covariance through the
    uncontrolled identified dynamics (zero gains and feedforwards) to the
    horizon; ``identity`` returns the identity matrix.
    """
    mode = mode or "propagate"
    n = problem.n
    if mode == "identity":
        return np.eye(n)
    if mode != "propagate":
        raise InvalidInputError("init mode must be 'propagate' or 'identity'")
    sigma = problem.initial.covariances[0].copy()
    for _ in range(problem.horizon):
        sigma = data.Mx @ sigma @ data.Mx.T
        sigma = 0.5 * (sigma + sigma.T)
    return sigma


def default_risk(problem: SteeringProblem) -> RiskAllocation | None:
    """Uniform allocation over the problem's planes, or None when chance is off."""
    if not (problem.chance_enabled and problem.planes):
        return None
    return allocate_uniform(problem.risk_budget, problem.K, len(problem.planes),
                            problem.horizon, problem.initial.weights)


def _reanchor_covs(realization: PolicyRealization) -> np.ndarray:
    """Surrogate anchors from a previous iterate: planned covariances at t in [1, N].

    The floor is generous: a nearly flat anchor direction would blow up the
    surrogate row coefficients (the tangent slope scales with the inverse
    anchor standard deviation along the plane normal).
    """
    planned = realization.planned_covs  # (K, N+1, n, n)
    K, Np1, n, _ = planned.shape
    anchors = np.empty((K, Np1 - 1, n, n))
    for i in range(K):
        for t in range(1, Np1):
            anchors[i, t - 1] = psd_floor(planned[i, t], 1e-4)
    return anchors


def _orientation_anchors(problem: SteeringProblem, count: int) -> list[np.ndarray]:
    """Planar rotations of the (strictly ordered) target spectrum as extra anchors.

    The first linearization fixes the eigenbasis the terminal covariance is
    pulled toward; starting from several orientations and keeping the best
    first iterate avoids the slow one-basis-per-pass rotation creep.  Only
    meaningful for two-dimensional states; higher dimensions fall back to the
    single default anchor.
    """
    if count <= 0 or problem.n != 2 or problem.epsilon == 0.0:
        return []
    from .linalg import eig_sym_descending

    d = eig_sym_descending(problem.target_cov).values
    d = d + 1e-6 * np.arange(problem.n, 0, -1)  # keep the order strict
    anchors = []
    for theta in np.linspace(0.0, np.pi, count, endpoint=False):
        c, s = np.cos(theta), np.sin(theta)
        R = np.array([[c, -s], [s, c]])
        anchors.append(R @ np.diag(d) @ R.T)
    return anchors


def _solve_anchored(problem, data, risk, anchor, sigma_r, solver_tol,
                    slack_penalty, slack_anchors):
    """One linearize-and-solve pass; returns (objective, report, assembled) or the report."""
    Q_n = dca_linearization(anchor, problem.target_cov)
    assembled = assemble(problem, data, risk, Q_n, sigma_r=sigma_r,
                         slack_penalty=slack_penalty, slack_anchors=slack_anchors)
    report = solve_subproblem(assembled, solver_tol)
    if not report.is_optimal:
        return None, report, assembled
    objective = evaluate_dc_objective(report.blocks["primal"], assembled)
    return objective, report, assembled


def run(problem: SteeringProblem, data: DataMatrices,
        config: DcaConfig | None = None,
        risk: RiskAllocation | None = None,
        initial_anchor: np.ndarray | None = None) -> DcaResult:
    """Full solve: linearize, minimize the conic subproblem, re-anchor, repeat.

    The first pass may try several anchor orientations and keeps the best
    first iterate; afterwards every pass re-anchors at its own minimizer, so
    the recorded objective trace is non-increasing up to solver accuracy.
    Stops when the relative objective decrease or the terminal-covariance
    change falls below tolerance, or at the iteration cap.  An infeasible
    first pass raises; a later failure returns the best iterate so far with
    the reason recorded.  ``initial_anchor`` overrides the configured
    initialization (warm restarts); orientation starts are skipped then.
    """
    config = config or DcaConfig()
    if risk is None:
        risk = default_risk(problem)
    if initial_anchor is not None:
        candidates = [psd_floor(np.asarray(initial_anchor, dtype=float), ANCHOR_FLOOR)]
    else:
        base_anchor = psd_floor(initialize(problem, data, config.init_mode), ANCHOR_FLOOR)
        candidates = [base_anchor] + _orientation_anchors(problem, config.orientation_starts)
    slack_penalty = config.tightening_weight * problem.epsilon
    slack_anchors = uncontrolled_anchors(problem, data) if slack_penalty > 0.0 else None

    trace = DcaTrace()
    sigma_r = None
    best: tuple[float, SolverReport, AssembledProgram] | None = None
    failed_report = None
    for anchor in candidates:
        objective, report, assembled = _solve_anchored(
            problem, data, risk, anchor, sigma_r, config.solver,
            slack_penalty, slack_anchors)
        if objective is None:
            failed_report = report
            continue
        if best is None or objective < best[0]:
            best = (objective, report, assembled)
    if best is None:
        if failed_report is not None and failed_report.status == "infeasible":
            raise SteeringInfeasibleError(failed_report.infeasibility_labels)
        status = failed_report.status if failed_report is not None else "unknown"
        raise SteeringInfeasibleError((f"solver status {status}",))

    objective, best_report, best_assembled = best
    blocks = best_report.blocks["primal"]
    sigma_N = blocks.terminal_cov()
    trace.records.append(DcaIterationRecord(
        iteration=0, objective=objective,
        ggw_true=ggw_squared(psd_floor(sigma_N, 1e-9), problem.target_cov).total,
        control_cost=control_cost_of_blocks(blocks, problem, data),
        status=best_report.status, sigma_N=sigma_N.copy(),
    ))

    converged = False
    stop_reason = "max-iterations"
    if problem.epsilon == 0.0:
        converged = True
        stop_reason = "no concave part; single solve is exact"
    else:
        prev_objective = objective
        prev_sigma = sigma_N
        for it in range(1, config.max_iterations):
            if problem.sigma_r_mode == "reanchor" and problem.chance_enabled and problem.planes:
                sigma_r = _reanchor_covs(recover_gains(best_report, data, problem))
            anchor = psd_floor(prev_sigma, ANCHOR_FLOOR)
            if slack_penalty > 0.0:
                prev_blocks = best_report.blocks["primal"]
                slack_anchors = (prev_blocks.S.copy(),
                                 prev_blocks.covs[:, :problem.horizon].copy())
            objective, report, assembled = _solve_anchored(
                problem, data, risk, anchor, sigma_r, config.solver,
                slack_penalty, slack_anchors)
            if objective is None:
                stop_reason = (f"subproblem {report.status} at iteration {it}; "
                               "kept previous iterate")
                break
            blocks = report.blocks["primal"]
            sigma_N = blocks.terminal_cov()
            trace.records.append(DcaIterationRecord(
                iteration=it, objective=objective,
                ggw_true=ggw_squared(psd_floor(sigma_N, 1e-9), problem.target_cov).total,
                control_cost=control_cost_of_blocks(blocks, problem, data),
                status=report.status, sigma_N=sigma_N.copy(),
            ))
            best_report, best_assembled = report, assembled
            decrease = prev_objective - objective
            if decrease <= config.objective_tol * max(1.0, abs(prev_objective)):
                converged = True
                stop_reason = "objective decrease below tolerance"
                break
            if np.linalg.norm(sigma_N - prev_sigma, "fro") <= config.iterate_tol:
                converged = True
                stop_reason = "terminal covariance settled"
                break
            prev_objective = objective
            prev_sigma = sigma_N

    realization = recover_gains(best_report, data, problem)
    return DcaResult(trace=trace, realization=realization, converged=converged,
                     stop_reason=stop_reason, risk=risk)


def save_trace_csv(trace: DcaTrace, path: str | Path) -> None:
    """Write `iter,objective,ggw_true,status` rows."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "objective", "ggw_true", "status"])
        for rec in trace.records:
            writer.writerow([rec.iteration, format(rec.objective, ".17g"),
                             format(rec.ggw_true, ".17g"), rec.status])
