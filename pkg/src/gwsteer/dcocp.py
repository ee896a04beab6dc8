"""Lowering of the steering program to standard conic form, and gain recovery.

Decision variables per mixture component i: means mu_t (t >= 1), feedforwards
v_t, covariance blocks Sigma_t (t >= 1), data-space blocks S_t (T x n) and
Y_t (T x T symmetric) for t in [0, N-1], plus scalar epigraphs.  The
covariance recursion is imposed through one semidefinite block per (i, t)

    [[Sigma_t, S_t'], [S_t, Y_t]] >= 0,   Sigma_t = X0 S_t,
    Sigma_{t+1} = X1 Y_t X1',

which relaxes the closed-loop congruence: at a feasible point the realized
next covariance is dominated by the planned one, so the linear control-effort
term tr(R U0 Y U0') upper-bounds the true quadratic gain cost.  Mean dynamics
are the identified one-step predictor, chance rows come from the tangent
surrogate, and the terminal mixture is forced to a single Gaussian by
consensus equalities.  The terminal cost enters either as the linearized
difference-of-convex objective (trace-gap and Frobenius epigraphs minus the
current alignment linearization) or, for the fixed-terminal baseline, as
equality on the terminal mean plus a cap on the terminal covariance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace as dc_replace

import numpy as np

from .chance import RiskAllocation, linear_coefficients
from .conic import (
    ConicProgram,
    ProgramBuilder,
    SolverReport,
    SolverTolerances,
    smat,
    solve,
    svec,
    svec_index,
    svec_len,
)
from .ggw import DcSplit, concave_term, make_dc_split
from .linalg import InvalidInputError, psd_floor, sym
from .mixture import MixturePolicy
from .plant import DataMatrices
from .problem import SteeringProblem

__all__ = [
    "AssemblyError",
    "GainRecoveryWarning",
    "VariableLayout",
    "PrimalBlocks",
    "AssembledProgram",
    "assemble",
    "assemble_fixed_terminal",
    "solve_subproblem",
    "recover_gains",
    "evaluate_dc_objective",
    "control_cost_of_blocks",
]

_SQRT2 = math.sqrt(2.0)

# spectrum below this relative level is treated as null space during gain
# recovery: those directions carry (almost surely) no state deviation, and
# inverting them would only amplify solver noise into the gains
GAIN_RECOVERY_REL_TOL = 1e-7

# gain-recovery consistency residual above this level is flagged
GAIN_RESIDUAL_WARN = 1e-4

# slack added to the terminal covariance cap in the fixed-terminal baseline
TERMINAL_CAP_SLACK = 1e-6

# coefficients below this magnitude are dropped from projector rows
COEF_DROP_TOL = 1e-12


class AssemblyError(ValueError):
    """Raised when the pieces of a steering program do not fit together."""


class GainRecoveryWarning(UserWarning):
    """Carried when a recovered gain violates its consistency identity."""


@dataclass(frozen=True)
class VariableLayout:
    """Index map from named decision blocks into the flat variable vector.

    ``mu[i][t]`` and ``sig[i][t]`` are ``None`` at t = 0 (the initial mixture
    is data, not a decision); their values are stitched back in at decode
    time.
    """

    n: int
    m: int
    T: int
    N: int
    K: int
    mu: tuple            # mu[i][t]: index array (n,) for t in 1..N
    v: tuple             # v[i][t]: index array (m,) for t in 0..N-1
    sig: tuple           # sig[i][t]: svec index array for t in 1..N
    S: tuple             # S[i][t]: index array (T*n,), row-major
    Y: tuple             # Y[i][t]: svec index array (svec_len(T),)
    ctrl_epi: np.ndarray  # (K, N) scalar indices
    fro_epi: int | None
    tr_epi: int | None
    reg_epi: np.ndarray | None  # (K, N) scalar indices in regularized mode
    fixed_mu0: np.ndarray       # (K, n)
    fixed_sig0: np.ndarray      # (K, n, n)
    num_free: int

    def expected_free_count(self) -> int:
        """Closed-form total of the layout, for cross-checking enumeration."""
        n, m, T, N, K = self.n, self.m, self.T, self.N, self.K
        per_comp = N * n + N * m + N * svec_len(n) + N * T * n + N * svec_len(T)
        total = K * per_comp + K * N  # + control epigraphs
        if self.fro_epi is not None:
            total += 2
        if self.reg_epi is not None:
            total += K * N
        return total

    def decode(self, x: np.ndarray) -> "PrimalBlocks":
        n, m, T, N, K = self.n, self.m, self.T, self.N, self.K
        means = np.empty((K, N + 1, n))
        covs = np.empty((K, N + 1, n, n))
        vs = np.empty((K, N, m))
        Ss = np.empty((K, N, T, n))
        Ys = np.empty((K, N, T, T))
        for i in range(K):
            means[i, 0] = self.fixed_mu0[i]
            covs[i, 0] = self.fixed_sig0[i]
            for t in range(1, N + 1):
                means[i, t] = x[self.mu[i][t]]
                covs[i, t] = smat(x[self.sig[i][t]], n)
            for t in range(N):
                vs[i, t] = x[self.v[i][t]]
                Ss[i, t] = x[self.S[i][t]].reshape(T, n)
                Ys[i, t] = smat(x[self.Y[i][t]], T)
        return PrimalBlocks(
            means=means, covs=covs, v=vs, S=Ss, Y=Ys,
            ctrl_epi=x[self.ctrl_epi],
            fro_epi=float(x[self.fro_epi]) if self.fro_epi is not None else None,
            tr_epi=float(x[self.tr_epi]) if self.tr_epi is not None else None,
            reg_epi=x[self.reg_epi] if self.reg_epi is not None else None,
        )


@dataclass(frozen=True)
class PrimalBlocks:
    """Decoded primal solution, indexed (component, time)."""

    means: np.ndarray   # (K, N+1, n)
    covs: np.ndarray    # (K, N+1, n, n)
    v: np.ndarray       # (K, N, m)
    S: np.ndarray       # (K, N, T, n)
    Y: np.ndarray       # (K, N, T, T)
    ctrl_epi: np.ndarray
    fro_epi: float | None
    tr_epi: float | None
    reg_epi: np.ndarray | None

    @property
    def K(self) -> int:
        return self.means.shape[0]

    @property
    def N(self) -> int:
        return self.means.shape[1] - 1

    def terminal_cov(self) -> np.ndarray:
        return self.covs[0, self.N]

    def terminal_mean(self) -> np.ndarray:
        return self.means[0, self.N]


@dataclass(frozen=True)
class AssembledProgram:
    """Conic program plus the metadata needed to interpret its solution."""

    program: ConicProgram
    layout: VariableLayout
    problem: SteeringProblem
    data: DataMatrices
    split: DcSplit | None     # None for the fixed-terminal baseline
    mode: str
    reg_lambda: float
    slack_penalty: float = 0.0


def _expr_sig_entry(sig_idx, a: int, b: int):
    """(cols, vals) pulling matrix entry (a, b) out of svec coordinates."""
    scale = 1.0 if a == b else 1.0 / _SQRT2
    return [sig_idx[svec_index(a, b)]], [scale]


def _congruence_row(F: np.ndarray, a: int, b: int) -> np.ndarray:
    """svec coefficients of Y -> (F Y F')[a, b] for symmetric Y."""
    outer = np.outer(F[b], F[a])
    return svec(0.5 * (outer + outer.T))


def _sigma_r_anchors(problem: SteeringProblem, override: np.ndarray | None) -> np.ndarray:
    """(K, N, n, n) anchors for the chance surrogate; default is the initial covariance."""
    K, N, n = problem.K, problem.horizon, problem.n
    if override is not None:
        anchors = np.asarray(override, dtype=float)
        if anchors.shape != (K, N, n, n):
            raise AssemblyError(
                f"surrogate anchors must be (K, N, n, n) = {(K, N, n, n)}, got {anchors.shape}"
            )
        return anchors
    anchors = np.empty((K, N, n, n))
    for i in range(K):
        base = psd_floor(problem.initial.covariances[i], 1e-8)
        anchors[i, :] = base
    return anchors


def _check_dimensions(problem: SteeringProblem, data: DataMatrices,
                      risk: RiskAllocation | None) -> None:
    if data.n != problem.n:
        raise AssemblyError(
            f"data state dimension {data.n} disagrees with the problem dimension {problem.n} "
            "(mean-dynamics rows would not close)"
        )
    if problem.chance_enabled and problem.planes:
        if risk is None:
            raise AssemblyError("chance constraints are enabled but no risk allocation was given")
        if risk.risks.shape != (problem.K, len(problem.planes), problem.horizon):
            raise AssemblyError(
                f"risk allocation shaped {risk.risks.shape}, expected "
                f"{(problem.K, len(problem.planes), problem.horizon)} (chance rows)"
            )


def _build_core(
    builder: ProgramBuilder,
    problem: SteeringProblem,
    data: DataMatrices,
    risk: RiskAllocation | None,
    mode: str,
    reg_lambda: float,
    sigma_r: np.ndarray | None,
) -> VariableLayout:
    """Variables and every constraint shared by both terminal-cost variants."""
    n, m, T = data.n, data.m, data.T
    N, K = problem.horizon, problem.K
    sl_n, sl_T = svec_len(n), svec_len(T)
    alpha = problem.initial.weights
    R = problem.R_matrices(m)
    R_sqrt = np.stack([np.linalg.cholesky(R[t]) for t in range(N)])

    mu_idx = []
    v_idx = []
    sig_idx = []
    S_idx = []
    Y_idx = []
    for i in range(K):
        mu_idx.append([None] + [builder.new_vars(n, f"mu[{i},{t}]") for t in range(1, N + 1)])
        v_idx.append([builder.new_vars(m, f"v[{i},{t}]") for t in range(N)])
        sig_idx.append([None] + [builder.new_vars(sl_n, f"sig[{i},{t}]") for t in range(1, N + 1)])
        S_idx.append([builder.new_vars(T * n, f"S[{i},{t}]") for t in range(N)])
        Y_idx.append([builder.new_vars(sl_T, f"Y[{i},{t}]") for t in range(N)])
    ctrl_epi = np.array([[int(builder.new_vars(1, f"ctrl_epi[{i},{t}]")[0]) for t in range(N)]
                         for i in range(K)])
    reg_epi = None
    if mode == "regularized":
        reg_epi = np.array([[int(builder.new_vars(1, f"reg_epi[{i},{t}]")[0]) for t in range(N)]
                            for i in range(K)])

    mu0 = problem.initial.means
    sig0 = problem.initial.covariances
    Mx, Mu, X0, X1, U0 = data.Mx, data.Mu, data.X0, data.X1, data.U0

    # mean dynamics: Mx mu_t + Mu v_t - mu_{t+1} = 0
    for i in range(K):
        for t in range(N):
            rows = []
            for r in range(n):
                cols = list(v_idx[i][t]) + list(mu_idx[i][t + 1][r:r + 1])
                vals = list(Mu[r]) + [-1.0]
                const = 0.0
                if t == 0:
                    const = float(Mx[r] @ mu0[i])
                else:
                    cols = list(mu_idx[i][t]) + cols
                    vals = list(Mx[r]) + vals
                rows.append((cols, vals, const))
            builder.add_zero(rows, label=f"mean-dynamics[i={i},t={t}]")

    # covariance from data blocks: Sigma_t = X0 S_t (full matrix, forces symmetry)
    for i in range(K):
        for t in range(N):
            rows = []
            for a in range(n):
                for b in range(n):
                    cols = [S_idx[i][t][c * n + b] for c in range(T)]
                    vals = list(X0[a])
                    if t == 0:
                        const = -float(sig0[i][a, b])
                    else:
                        sc, sv = _expr_sig_entry(sig_idx[i][t], a, b)
                        cols += sc
                        vals += [-sv[0]]
                        const = 0.0
                    rows.append((cols, vals, const))
            builder.add_zero(rows, label=f"cov-from-S[i={i},t={t}]")

    # covariance step: Sigma_{t+1} = X1 Y_t X1'
    for i in range(K):
        for t in range(N):
            rows = []
            for b in range(n):
                for a in range(b + 1):
                    coefs = _congruence_row(X1, a, b)
                    sc, sv = _expr_sig_entry(sig_idx[i][t + 1], a, b)
                    cols = list(Y_idx[i][t]) + sc
                    vals = list(coefs) + [-sv[0]]
                    rows.append((cols, vals, 0.0))
            builder.add_zero(rows, label=f"cov-step[i={i},t={t}]")

    # semidefinite blocks [[Sigma_t, S_t'], [S_t, Y_t]] >= 0
    for i in range(K):
        for t in range(N):
            entries = {}
            for j in range(n + T):
                for a in range(j + 1):
                    if j < n:  # Sigma part
                        if t == 0:
                            entries[(a, j)] = ([], [], float(sig0[i][a, j]))
                        else:
                            sc, sv = _expr_sig_entry(sig_idx[i][t], a, j)
                            entries[(a, j)] = (sc, sv, 0.0)
                    elif a < n:  # S' part: entry (a, j) = S[j - n, a]
                        entries[(a, j)] = ([S_idx[i][t][(j - n) * n + a]], [1.0], 0.0)
                    else:  # Y part
                        sc = [Y_idx[i][t][svec_index(a - n, j - n)]]
                        sv = [1.0 if a == j else 1.0 / _SQRT2]
                        entries[(a, j)] = (sc, sv, 0.0)
            builder.add_psd(n + T, entries, label=f"lmi[i={i},t={t}]")

    # chance-constraint rows for t in [1, N]
    if problem.chance_enabled and problem.planes:
        anchors = _sigma_r_anchors(problem, sigma_r)
        for i in range(K):
            for j, plane in enumerate(problem.planes):
                rows = []
                for t in range(1, N + 1):
                    kappa, offset = linear_coefficients(
                        plane, float(risk.risks[i, j, t - 1]), anchors[i, t - 1]
                    )
                    quad = svec(np.outer(plane.a, plane.a))
                    cols = list(mu_idx[i][t]) + list(sig_idx[i][t])
                    vals = list(-plane.a) + list(-kappa * quad)
                    rows.append((cols, vals, plane.b - offset))
                builder.add_nonneg(rows, label=f"chance[i={i},plane={j}]")

    # terminal consensus across components
    for i in range(1, K):
        rows = [([mu_idx[i][N][r], mu_idx[0][N][r]], [1.0, -1.0], 0.0) for r in range(n)]
        builder.add_zero(rows, label=f"terminal-mean-consensus[i={i}]")
        rows = [([sig_idx[i][N][p], sig_idx[0][N][p]], [1.0, -1.0], 0.0) for p in range(sl_n)]
        builder.add_zero(rows, label=f"terminal-cov-consensus[i={i}]")

    # mode extras on the data nullspace: the projector constraint Pi_L S = 0 is
    # imposed through an orthonormal basis Q of range(Pi_L) (Q' S = 0 row by
    # row), which is the same constraint set with full-row-rank equalities;
    # likewise ||Pi_L S||_F = ||Q' S||_F for the penalty epigraph.
    basis = data.null_basis
    if mode == "indirect":
        for i in range(K):
            for t in range(N):
                rows = []
                for r in range(basis.shape[1]):
                    coef = basis[:, r]
                    for b in range(n):
                        cols = [S_idx[i][t][c * n + b] for c in range(T)
                                if abs(coef[c]) > COEF_DROP_TOL]
                        vals = [coef[c] for c in range(T) if abs(coef[c]) > COEF_DROP_TOL]
                        rows.append((cols, vals, 0.0))
                builder.add_zero(rows, label=f"nullspace[i={i},t={t}]")
    elif mode == "regularized":
        for i in range(K):
            for t in range(N):
                rows = [([reg_epi[i][t]], [1.0], 0.0)]
                for r in range(basis.shape[1]):
                    coef = basis[:, r]
                    for b in range(n):
                        cols = [S_idx[i][t][c * n + b] for c in range(T)
                                if abs(coef[c]) > COEF_DROP_TOL]
                        vals = [coef[c] for c in range(T) if abs(coef[c]) > COEF_DROP_TOL]
                        rows.append((cols, vals, 0.0))
                builder.add_soc(rows, label=f"reg-epi[i={i},t={t}]")
                builder.add_objective([reg_epi[i][t]], [reg_lambda])

    # control cost: alpha_i (v' R v + tr(R U0 Y U0'))
    for i in range(K):
        for t in range(N):
            rows = [([ctrl_epi[i][t]], [1.0], 0.0), ([], [], 0.5)]
            for r in range(m):
                cols = [v_idx[i][t][c] for c in range(m)]
                vals = list(R_sqrt[t].T[r])
                rows.append((cols, vals, 0.0))
            builder.add_rsoc(rows, label=f"ctrl-epi[i={i},t={t}]")
            builder.add_objective([ctrl_epi[i][t]], [float(alpha[i])])
            W = svec(sym(U0.T @ R[t] @ U0))
            builder.add_objective(Y_idx[i][t], float(alpha[i]) * W)

    return VariableLayout(
        n=n, m=m, T=T, N=N, K=K,
        mu=tuple(tuple(row) for row in mu_idx),
        v=tuple(tuple(row) for row in v_idx),
        sig=tuple(tuple(row) for row in sig_idx),
        S=tuple(tuple(row) for row in S_idx),
        Y=tuple(tuple(row) for row in Y_idx),
        ctrl_epi=ctrl_epi,
        fro_epi=None,
        tr_epi=None,
        reg_epi=reg_epi,
        fixed_mu0=mu0.copy(),
        fixed_sig0=sig0.copy(),
        num_free=builder.num_vars,
    )


def uncontrolled_anchors(problem: SteeringProblem, data: DataMatrices):
    """Zero-gain tangent anchors (S, Sigma) for the slack penalty.

    Built from the data-space preimage of the zero gain (``U0 G = 0``,
    ``X0 G = I``) pushed through the identified dynamics; this is a feasible
    slack-free point, so the first penalty tangent is supported on it.
    """
    from .linalg import pinv

    n, T = data.n, data.T
    N, K = problem.horizon, problem.K
    G0 = pinv(data.L).pinv @ np.vstack([np.zeros((data.m, n)), np.eye(n)])
    S_bar = np.empty((K, N, T, n))
    sig_bar = np.empty((K, N, n, n))
    for i in range(K):
        sigma = problem.initial.covariances[i].copy()
        for t in range(N):
            sig_bar[i, t] = sigma
            S_bar[i, t] = G0 @ sigma
            sigma = sym(data.Mx @ sigma @ data.Mx.T)
    return S_bar, sig_bar


# anchors for penalty tangents are floored at this level before inversion
SLACK_ANCHOR_FLOOR = 1e-7


def _add_slack_penalty(builder, layout, data, penalty, anchors) -> None:
    """Linearized difference-of-convex penalty on the propagated step slack.

    The per-step slack ``tr(X1 (Y - S Sigma^{-1} S') X1')`` is the trace gap
    between the planned next covariance and the one the recovered gain
    actually delivers.  Its first part is linear in Y; the subtracted part is
    jointly convex in (S, Sigma), so the tangent at the previous iterate
    under-estimates it and the penalized surrogate still majorizes the true
    objective.  On slack-free points the penalty vanishes, so it does not
    distort the steering cost there.
    """
    S_bar, sig_bar = anchors
    M = sym(data.X1.T @ data.X1)
    w_M = svec(M)
    n, T = layout.n, layout.T
    for i in range(layout.K):
        for t in range(layout.N):
            builder.add_objective(layout.Y[i][t], penalty * w_M)
            sig_fl = psd_floor(sig_bar[i, t], SLACK_ANCHOR_FLOOR)
            sig_inv = np.linalg.inv(sig_fl)
            grad_S = 2.0 * M @ S_bar[i, t] @ sig_inv        # (T, n)
            grad_sig = sig_inv @ S_bar[i, t].T @ M @ S_bar[i, t] @ sig_inv  # >= 0
            builder.add_objective(layout.S[i][t], -penalty * grad_S.reshape(-1))
            if t >= 1:
                builder.add_objective(layout.sig[i][t], penalty * svec(sym(grad_sig)))
            # constants of the tangent, kept so the audit matches exactly
            f_bar = float(np.trace(M @ S_bar[i, t] @ sig_inv @ S_bar[i, t].T))
            const = -f_bar + float(np.sum(grad_S * S_bar[i, t]))
            const -= float(np.trace(grad_sig @ sig_fl))
            if t == 0:
                const += float(np.trace(sym(grad_sig) @ layout.fixed_sig0[i]))
            builder.add_objective_const(penalty * const)


def slack_trace_of_blocks(blocks: PrimalBlocks, data: DataMatrices) -> float:
    """Total propagated step slack of a primal point (non-negative up to roundoff)."""
    M = sym(data.X1.T @ data.X1)
    total = 0.0
    for i in range(blocks.K):
        for t in range(blocks.N):
            pinv_sig = _stable_spectral_inverse(blocks.covs[i, t], 1e-12)
            real = blocks.S[i, t] @ pinv_sig @ blocks.S[i, t].T
            total += float(np.trace(M @ (blocks.Y[i, t] - real)))
    return total


def assemble(
    problem: SteeringProblem,
    data: DataMatrices,
    risk: RiskAllocation | None,
    Q_n: np.ndarray,
    mode: str | None = None,
    reg_lambda: float | None = None,
    sigma_r: np.ndarray | None = None,
    slack_penalty: float = 0.0,
    slack_anchors=None,
) -> AssembledProgram:
    """Lower one convex subproblem (terminal cost linearized at ``Q_n``) to conic form.

    ``Q_n`` is the current alignment linearization of the terminal-covariance
    cost; the objective carries its linear term together with the trace-gap
    and Frobenius epigraphs, all weighted by the problem's terminal-cost
    weight.  A positive ``slack_penalty`` adds the linearized
    difference-of-convex tax on the propagated step slack (anchored at
    ``slack_anchors``), which drives the covariance-step relaxation tight.
    """
    mode = problem.mode if mode is None else mode
    reg_lambda = problem.reg_lambda if reg_lambda is None else reg_lambda
    if mode not in ("direct", "indirect", "regularized"):
        raise AssemblyError(f"unknown mode {mode!r}")
    if mode == "regularized" and reg_lambda <= 0.0:
        raise AssemblyError("regularized mode needs a positive penalty weight")
    _check_dimensions(problem, data, risk)
    n = problem.n
    Q_n = np.asarray(Q_n, dtype=float)
    if Q_n.shape != (n, n):
        raise AssemblyError(f"linearization matrix must be {(n, n)}, got {Q_n.shape} "
                            "(terminal-cost linear term)")

    builder = ProgramBuilder()
    layout = _build_core(builder, problem, data, risk, mode, reg_lambda, sigma_r)
    split = make_dc_split(problem.target_cov, problem.frobenius_weight)
    eps = problem.epsilon
    N = problem.horizon
    sig_N = layout.sig[0][N]

    tr_epi = int(builder.new_vars(1, "tr_epi")[0])
    fro_epi = int(builder.new_vars(1, "fro_epi")[0])
    # trace-gap epigraph: tr_epi >= (tr Sigma_N - tr target)^2
    diag_cols = [sig_N[svec_index(r, r)] for r in range(n)]
    builder.add_rsoc([
        ([tr_epi], [1.0], 0.0),
        ([], [], 0.5),
        (diag_cols, [1.0] * n, -float(np.trace(problem.target_cov))),
    ], label="trace-gap-epigraph")
    # Frobenius epigraph: fro_epi >= ||Sigma_N||_F^2
    rows = [([fro_epi], [1.0], 0.0), ([], [], 0.5)]
    for p in range(svec_len(n)):
        rows.append(([sig_N[p]], [1.0], 0.0))
    builder.add_rsoc(rows, label="frobenius-epigraph")
    builder.add_objective([tr_epi], [eps * split.quadratic_weight])
    builder.add_objective([fro_epi], [eps * split.frobenius_weight])
    # linearized alignment term: -16 eps tr(Sigma_N Q_n)
    builder.add_objective(sig_N, -eps * split.concave_weight * svec(sym(Q_n)))

    if slack_penalty > 0.0:
        if slack_anchors is None:
            slack_anchors = uncontrolled_anchors(problem, data)
        _add_slack_penalty(builder, layout, data, slack_penalty, slack_anchors)

    layout = _replace_layout_epis(layout, tr_epi=tr_epi, fro_epi=fro_epi,
                                  num_free=builder.num_vars)
    return AssembledProgram(program=builder.build(), layout=layout, problem=problem,
                            data=data, split=split, mode=mode, reg_lambda=reg_lambda,
                            slack_penalty=slack_penalty)


def assemble_fixed_terminal(
    problem: SteeringProblem,
    data: DataMatrices,
    mu_star: np.ndarray,
    terminal_cov: np.ndarray,
    risk: RiskAllocation | None = None,
    mode: str | None = None,
    reg_lambda: float | None = None,
    cap_slack: float = TERMINAL_CAP_SLACK,
) -> AssembledProgram:
    """Baseline program with a fixed terminal Gaussian instead of the terminal cost.

    The terminal mean is pinned to ``mu_star``; the terminal covariance is
    relaxed to ``Sigma_N <= terminal_cov + cap_slack * I`` (exact equality is
    out of reach under the covariance-step relaxation).
    """
    mode = problem.mode if mode is None else mode
    reg_lambda = problem.reg_lambda if reg_lambda is None else reg_lambda
    _check_dimensions(problem, data, risk)
    n, N = problem.n, problem.horizon
    mu_star = np.asarray(mu_star, dtype=float).reshape(-1)
    if mu_star.shape != (n,):
        raise AssemblyError(f"terminal mean must have length {n} (terminal-mean rows)")
    cap = psd_floor(np.asarray(terminal_cov, dtype=float), 0.0) + cap_slack * np.eye(n)

    builder = ProgramBuilder()
    layout = _build_core(builder, problem, data, risk, mode, reg_lambda, None)
    for i in range(problem.K):
        rows = [([layout.mu[i][N][r]], [1.0], -float(mu_star[r])) for r in range(n)]
        builder.add_zero(rows, label=f"terminal-mean[i={i}]")
        entries = {}
        for j in range(n):
            for a in range(j + 1):
                scale = 1.0 if a == j else 1.0 / _SQRT2
                entries[(a, j)] = ([layout.sig[i][N][svec_index(a, j)]], [-scale],
                                   float(cap[a, j]))
        builder.add_psd(n, entries, label=f"terminal-cov-cap[i={i}]")

    layout = _replace_layout_epis(layout, tr_epi=None, fro_epi=None,
                                  num_free=builder.num_vars)
    return AssembledProgram(program=builder.build(), layout=layout, problem=problem,
                            data=data, split=None, mode=mode, reg_lambda=reg_lambda)


def _replace_layout_epis(layout: VariableLayout, tr_epi, fro_epi, num_free) -> VariableLayout:
    return dc_replace(layout, tr_epi=tr_epi, fro_epi=fro_epi, num_free=num_free)


def solve_subproblem(
    assembled: AssembledProgram,
    tolerances: SolverTolerances | None = None,
) -> SolverReport:
    """Solve one assembled subproblem and decode the primal blocks."""
    report = solve(assembled.program, tolerances)
    if report.is_optimal:
        report.blocks["primal"] = assembled.layout.decode(report.primal)
    return report


def control_cost_of_blocks(blocks: PrimalBlocks, problem: SteeringProblem,
                           data: DataMatrices) -> float:
    """Weighted control effort sum alpha_i (v' R v + tr(R U0 Y U0')) of a primal point."""
    alpha = problem.initial.weights
    R = problem.R_matrices(data.m)
    total = 0.0
    for i in range(blocks.K):
        for t in range(blocks.N):
            v = blocks.v[i, t]
            total += float(alpha[i]) * float(v @ R[t] @ v)
            total += float(alpha[i]) * float(np.trace(R[t] @ data.U0 @ blocks.Y[i, t] @ data.U0.T))
    return total


def nullspace_penalty_of_blocks(blocks: PrimalBlocks, data: DataMatrices) -> float:
    """Sum of Frobenius norms of the nullspace components of every S block."""
    total = 0.0
    for i in range(blocks.K):
        for t in range(blocks.N):
            total += float(np.linalg.norm(data.Pi_L @ blocks.S[i, t], "fro"))
    return total


def evaluate_dc_objective(
    blocks: PrimalBlocks,
    assembled: AssembledProgram,
) -> float:
    """Exact difference-of-convex objective at a primal point.

    Uses the true alignment and slack terms (not their linearizations), so
    successive subproblem minimizers must not increase this value.
    """
    problem, data = assembled.problem, assembled.data
    value = control_cost_of_blocks(blocks, problem, data)
    if assembled.split is not None:
        value += problem.epsilon * assembled.split.evaluate(blocks.terminal_cov())
    if assembled.mode == "regularized":
        value += assembled.reg_lambda * nullspace_penalty_of_blocks(blocks, data)
    if assembled.slack_penalty > 0.0:
        value += assembled.slack_penalty * slack_trace_of_blocks(blocks, data)
    return value


@dataclass(frozen=True)
class PolicyRealization:
    """Recovered feedback policy with its planned moments and diagnostics."""

    policy: MixturePolicy
    planned_means: np.ndarray        # (K, N+1, n)
    planned_covs: np.ndarray         # (K, N+1, n, n)
    gain_residuals: np.ndarray       # (K, N) consistency residuals ||X0 G - I||_F
    warnings: tuple[str, ...]
    control_cost: float
    feedforward: np.ndarray          # (K, N, m) convenience copy


def _stable_spectral_inverse(sigma: np.ndarray, rel_tol: float) -> np.ndarray:
    """Pseudo-inverse of a planned covariance with near-null directions zeroed."""
    w, V = np.linalg.eigh(sym(sigma))
    cutoff = rel_tol * max(w.max(initial=0.0), 1.0)
    inv_w = np.where(w > cutoff, 1.0 / np.maximum(w, cutoff), 0.0)
    return (V * inv_w) @ V.T


def recover_gains(report: SolverReport, data: DataMatrices,
                  problem: SteeringProblem) -> PolicyRealization:
    """Extract the affine mixture policy from an optimal subproblem solution.

    Gains follow ``K_t = U0 S_t pinv(Sigma_t)`` with near-null covariance
    directions zeroed rather than inverted: deviations in those directions
    are (almost surely) absent from rollouts, while inverting them would
    amplify solver noise.  The identity ``X0 G_t = I`` is checked per
    (component, time) and violations are carried as warnings, not raised.
    """
    if not report.is_optimal:
        raise InvalidInputError(f"cannot recover gains from a {report.status!r} report")
    blocks: PrimalBlocks = report.blocks["primal"]
    K, N = blocks.K, blocks.N
    n, m = data.n, data.m
    gains = np.empty((N, K, m, n))
    residuals = np.empty((K, N))
    warnings_ = []
    for i in range(K):
        for t in range(N):
            G = blocks.S[i, t] @ _stable_spectral_inverse(blocks.covs[i, t],
                                                          GAIN_RECOVERY_REL_TOL)
            gains[t, i] = data.U0 @ G
            residuals[i, t] = float(np.linalg.norm(data.X0 @ G - np.eye(n), "fro"))
            if residuals[i, t] > GAIN_RESIDUAL_WARN:
                warnings_.append(
                    f"gain consistency residual {residuals[i, t]:.2e} at (i={i}, t={t})"
                )
    feedforward = np.transpose(blocks.v, (1, 0, 2))  # (N, K, m)
    policy = MixturePolicy(
        weights=problem.initial.weights.copy(),
        feedforward=feedforward,
        gains=gains,
        ref_means=np.transpose(blocks.means, (1, 0, 2)),
        ref_covs=np.transpose(blocks.covs, (1, 0, 2, 3)),
    )
    return PolicyRealization(
        policy=policy,
        planned_means=blocks.means.copy(),
        planned_covs=blocks.covs.copy(),
        gain_residuals=residuals,
        warnings=tuple(warnings_),
        control_cost=control_cost_of_blocks(blocks, problem, data),
        feedforward=blocks.v.copy(),
    )
