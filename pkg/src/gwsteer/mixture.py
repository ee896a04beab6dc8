"""Gaussian mixture state model: moment propagation, component weights, sampling, rollout.

The closed-loop policy is affine per component: at each step a component
index is drawn with the posterior weight of the current state under the
planned mixture, and that component's feedforward/feedback pair is applied.
Under this policy the state stays mixture-Gaussian with weights fixed at
their initial values, and per-component moments follow the usual affine and
congruence updates.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .linalg import InvalidInputError, psd_floor, sampling_factor, sym
from .plant import LtiPlant

__all__ = [
    "GaussianMixture",
    "MixturePolicy",
    "Trajectory",
    "EnsembleRollout",
    "gamma_weights",
    "propagate_moments",
    "sample_initial",
    "rollout",
    "ensemble_rollout",
    "save_trajectory_csv",
]

# planned covariances are floored at this level before density evaluation so
# that component weights stay well defined for degenerate plans
REFERENCE_COV_FLOOR = 1e-8

# below this log-density ceiling every component has underflowed and the
# posterior weights fall back to the prior
LOG_DENSITY_FLOOR = -700.0


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture of Gaussians: simplex weights, per-component means and PSD covariances."""

    weights: np.ndarray      # (K,)
    means: np.ndarray        # (K, n)
    covariances: np.ndarray  # (K, n, n)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        cov = np.asarray(self.covariances, dtype=float)
        if cov.ndim == 2:
            cov = cov[None, :, :]
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)
        K = w.shape[0]
        if mu.shape[0] != K or cov.shape[0] != K:
            raise InvalidInputError("weights, means and covariances disagree on component count")
        n = mu.shape[1]
        if cov.shape[1:] != (n, n):
            raise InvalidInputError(f"covariances must be (K, {n}, {n}), got {cov.shape}")
        if np.any(w < -1e-12) or abs(w.sum() - 1.0) > 1e-9:
            raise InvalidInputError("weights must lie on the probability simplex")
        for i in range(K):
            if np.abs(cov[i] - cov[i].T).max() > 1e-9 * max(1.0, np.abs(cov[i]).max()):
                raise InvalidInputError(f"covariance {i} is not symmetric")
            if np.linalg.eigvalsh(sym(cov[i])).min() < -1e-10:
                raise InvalidInputError(f"covariance {i} is not positive semidefinite")

    @property
    def K(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True)
class MixturePolicy:
    """Affine mixture feedback policy with its planned reference moments.

    ``feedforward[t, i]`` and ``gains[t, i]`` act for t in [0, N-1];
    ``ref_means``/``ref_covs`` cover t in [0, N] and are the planned moment
    trajectories (covariances floored for density evaluation).
    """

    weights: np.ndarray      # (K,)
    feedforward: np.ndarray  # (N, K, m)
    gains: np.ndarray        # (N, K, m, n)
    ref_means: np.ndarray    # (N+1, K, n)
    ref_covs: np.ndarray     # (N+1, K, n, n)

    def __post_init__(self):
        ff = np.asarray(self.feedforward, dtype=float)
        gains = np.asarray(self.gains, dtype=float)
        mus = np.asarray(self.ref_means, dtype=float)
        covs = np.asarray(self.ref_covs, dtype=float)
        N, K, m = ff.shape
        n = mus.shape[2]
        if gains.shape != (N, K, m, n):
            raise InvalidInputError(f"gains must be {(N, K, m, n)}, got {gains.shape}")
        if mus.shape != (N + 1, K, n) or covs.shape != (N + 1, K, n, n):
            raise InvalidInputError("reference moments must cover t = 0 .. N for every component")
        floored = np.stack([
            np.stack([psd_floor(covs[t, i], REFERENCE_COV_FLOOR) for i in range(K)])
            for t in range(N + 1)
        ])
        object.__setattr__(self, "feedforward", ff)
        object.__setattr__(self, "gains", gains)
        object.__setattr__(self, "ref_means", mus)
        object.__setattr__(self, "ref_covs", floored)
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float).reshape(-1))

    @property
    def horizon(self) -> int:
        return self.feedforward.shape[0]

    @property
    def K(self) -> int:
        return self.feedforward.shape[1]

    @property
    def n(self) -> int:
        return self.ref_means.shape[2]

    @property
    def m(self) -> int:
        return self.feedforward.shape[2]


@dataclass(frozen=True)
class Trajectory:
    """One closed-loop rollout record."""

    states: np.ndarray      # (N+1, n)
    inputs: np.ndarray      # (N, m)
    components: np.ndarray  # (N,) component drawn at each step

    @property
    def horizon(self) -> int:
        return self.inputs.shape[0]


def _log_gaussian(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """Log density of N(mean, cov) at x, via Cholesky (cov must be PD)."""
    n = x.shape[0]
    chol = np.linalg.cholesky(cov)
    diff = x - mean
    y = np.linalg.solve(chol, diff)
    quad = float(y @ y)
    logdet = 2.0 * float(np.log(np.diag(chol)).sum())
    return -0.5 * (quad + logdet + n * np.log(2.0 * np.pi))


def gamma_weights(policy: MixturePolicy, t: int, x: np.ndarray) -> np.ndarray:
    """Posterior component weights of state ``x`` under the planned mixture at time ``t``.

    Computed in log space with max subtraction; when every component's log
    density has underflowed the weights fall back to the prior.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    K = policy.K
    if K == 1:
        return np.array([1.0])
    logs = np.empty(K)
    for i in range(K):
        logs[i] = np.log(policy.weights[i]) + _log_gaussian(
            x, policy.ref_means[t, i], policy.ref_covs[t, i]
        )
    m = logs.max()
    if not np.isfinite(m) or m < LOG_DENSITY_FLOOR:
        return policy.weights.copy()
    w = np.exp(logs - m)
    return w / w.sum()


def propagate_moments(
    A: np.ndarray,
    B: np.ndarray,
    mixture: GaussianMixture,
    feedforward: np.ndarray,
    gains: np.ndarray,
) -> GaussianMixture:
    """One-step moment update under the affine mixture policy.

    Means follow ``A mu + B v_i``, covariances the closed-loop congruence
    ``(A + B K_i) Sigma_i (A + B K_i)'``; weights are unchanged.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    v = np.atleast_2d(np.asarray(feedforward, dtype=float))
    Kg = np.asarray(gains, dtype=float)
    if Kg.ndim == 2:
        Kg = Kg[None, :, :]
    K = mixture.K
    if v.shape[0] != K or Kg.shape[0] != K:
        raise InvalidInputError("need one feedforward vector and one gain per component")
    means = np.empty_like(mixture.means)
    covs = np.empty_like(mixture.covariances)
    for i in range(K):
        means[i] = A @ mixture.means[i] + B @ v[i]
        closed = A + B @ Kg[i]
        covs[i] = sym(closed @ mixture.covariances[i] @ closed.T)
    return GaussianMixture(weights=mixture.weights.copy(), means=means, covariances=covs)


def sample_initial(
    mixture: GaussianMixture,
    count: int,
    seed: int = 0,
    return_components: bool = False,
):
    """Draw i.i.d. samples: component by weight, then a floored-Cholesky Gaussian draw."""
    if count < 1:
        raise InvalidInputError("count must be at least 1")
    rng = np.random.default_rng(seed)
    comps = rng.choice(mixture.K, size=count, p=mixture.weights / mixture.weights.sum())
    z = rng.standard_normal((count, mixture.dim))
    chols = [sampling_factor(mixture.covariances[i]) for i in range(mixture.K)]
    out = np.empty((count, mixture.dim))
    for i in range(mixture.K):
        mask = comps == i
        out[mask] = mixture.means[i] + z[mask] @ chols[i].T
    if return_components:
        return out, comps
    return out


def rollout(plant: LtiPlant, policy: MixturePolicy, x0: np.ndarray, seed: int = 0) -> Trajectory:
    """Single closed-loop rollout on the true plant.

    At each step the component is re-drawn from the posterior weights of the
    current state, then that component's affine law is applied.  The
    operational plant is deterministic; randomness enters only through the
    component draws.
    """
    N = policy.horizon
    x = np.asarray(x0, dtype=float).reshape(-1)
    rng = np.random.default_rng(seed)
    states = np.empty((N + 1, plant.n))
    inputs = np.empty((N, plant.m))
    comps = np.empty(N, dtype=int)
    states[0] = x
    for t in range(N):
        g = gamma_weights(policy, t, x)
        i = int(rng.choice(policy.K, p=g))
        u = policy.feedforward[t, i] + policy.gains[t, i] @ (x - policy.ref_means[t, i])
        x = plant.step(x, u)
        states[t + 1] = x
        inputs[t] = u
        comps[t] = i
    return Trajectory(states=states, inputs=inputs, components=comps)


@dataclass(frozen=True)
class EnsembleRollout:
    """Vectorized batch of closed-loop rollouts sharing one RNG stream."""

    states: np.ndarray      # (count, N+1, n)
    inputs: np.ndarray      # (count, N, m)
    components: np.ndarray  # (count, N)

    @property
    def count(self) -> int:
        return self.states.shape[0]

    def trajectories(self) -> list[Trajectory]:
        return [
            Trajectory(states=self.states[s], inputs=self.inputs[s], components=self.components[s])
            for s in range(self.count)
        ]


def ensemble_rollout(
    plant: LtiPlant,
    policy: MixturePolicy,
    x0s: np.ndarray,
    seed: int = 0,
) -> EnsembleRollout:
    """Roll out many initial states at once (statistically identical to :func:`rollout`)."""
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    count = x0s.shape[0]
    N, K = policy.horizon, policy.K
    rng = np.random.default_rng(seed)
    states = np.empty((count, N + 1, plant.n))
    inputs = np.empty((count, N, plant.m))
    comps = np.empty((count, N), dtype=int)
    states[:, 0] = x0s
    for t in range(N):
        x = states[:, t]  # (count, n)
        logs = np.empty((count, K))
        for i in range(K):
            cov = policy.ref_covs[t, i]
            chol = np.linalg.cholesky(cov)
            diff = x - policy.ref_means[t, i]
            y = np.linalg.solve(chol, diff.T)
            quad = np.sum(y * y, axis=0)
            logdet = 2.0 * float(np.log(np.diag(chol)).sum())
            logs[:, i] = np.log(policy.weights[i]) - 0.5 * (
                quad + logdet + plant.n * np.log(2.0 * np.pi)
            )
        m = logs.max(axis=1, keepdims=True)
        w = np.exp(logs - m)
        w /= w.sum(axis=1, keepdims=True)
        underflow = ~np.isfinite(m[:, 0]) | (m[:, 0] < LOG_DENSITY_FLOOR)
        if np.any(underflow):
            w[underflow] = policy.weights
        # categorical draw per sample via inverse CDF
        u_rand = rng.random(count)
        cdf = np.cumsum(w, axis=1)
        chosen = (u_rand[:, None] > cdf).sum(axis=1)
        chosen = np.minimum(chosen, K - 1)
        comps[:, t] = chosen
        u = np.empty((count, plant.m))
        for i in range(K):
            mask = chosen == i
            if not np.any(mask):
                continue
            dev = x[mask] - policy.ref_means[t, i]
            u[mask] = policy.feedforward[t, i] + dev @ policy.gains[t, i].T
        inputs[:, t] = u
        states[:, t + 1] = x @ plant.A.T + u @ plant.B.T
    return EnsembleRollout(states=states, inputs=inputs, components=comps)


def save_trajectory_csv(trajectory: Trajectory, path: str | Path) -> None:
    """Write `t,component,u...,x...`; the terminal row leaves component and inputs empty."""
    path = Path(path)
    N = trajectory.horizon
    m = trajectory.inputs.shape[1]
    n = trajectory.states.shape[1]
    header = ["t", "component"] + [f"u_{j}" for j in range(m)] + [f"x_{j}" for j in range(n)]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t in range(N):
            writer.writerow(
                [t, int(trajectory.components[t])]
                + [format(v, ".17g") for v in trajectory.inputs[t]]
                + [format(v, ".17g") for v in trajectory.states[t]]
            )
        writer.writerow([N, ""] + [""] * m + [format(v, ".17g") for v in trajectory.states[N]])
