"""True-plant simulation, excitation data, Hankel matrices and data-driven system matrices.

The LTI plant here plays the role of the held-out ground truth: the solver
never sees ``A`` and ``B`` directly, only input/state records collected from
offline experiments.  From those records this module derives the stacked data
matrices, the identified one-step predictor ``[Mu Mx]`` and the orthogonal
projector onto the nullspace of the stacked data.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .linalg import InvalidInputError, eig_sym_descending, pinv, rank_with_threshold

__all__ = [
    "DataNotInformativeError",
    "LtiPlant",
    "ExperimentData",
    "DataMatrices",
    "simulate_experiment",
    "random_excitation",
    "hankel",
    "is_persistently_exciting",
    "build_data_matrices",
    "save_experiment_csv",
    "load_experiment_csv",
]

# rank decisions at desk scale (see also linalg.rank_with_threshold)
RANK_REL_TOL = 1e-8


class DataNotInformativeError(RuntimeError):
    """Raised when the stacked input/state data matrix is rank deficient."""

    def __init__(self, achieved_rank: int, required_rank: int):
        self.achieved_rank = achieved_rank
        self.required_rank = required_rank
        super().__init__(
            f"stacked data matrix has rank {achieved_rank}, need {required_rank}; "
            "collect longer or richer excitation data"
        )


@dataclass(frozen=True)
class LtiPlant:
    """Controllable discrete-time pair x+ = A x + B u (held out from the solver)."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        n = A.shape[0]
        if A.shape != (n, n):
            raise InvalidInputError(f"A must be square, got {A.shape}")
        if B.shape[0] != n:
            raise InvalidInputError(f"B must have {n} rows, got {B.shape}")
        ctrb = np.hstack([np.linalg.matrix_power(A, k) @ B for k in range(n)])
        if rank_with_threshold(ctrb, RANK_REL_TOL) != n:
            raise InvalidInputError("(A, B) is not controllable")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def step(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.A @ x + self.B @ u


@dataclass(frozen=True)
class ExperimentData:
    """One offline experiment: inputs u_0..u_{T-1}, states x_0..x_T, noise intensity."""

    inputs: np.ndarray  # (T, m)
    states: np.ndarray  # (T+1, n)
    noise_intensity: float = 0.0

    def __post_init__(self):
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        states = np.atleast_2d(np.asarray(self.states, dtype=float))
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "states", states)
        if states.shape[0] != inputs.shape[0] + 1:
            raise InvalidInputError(
                f"need T+1 states for T inputs, got {states.shape[0]} states, "
                f"{inputs.shape[0]} inputs"
            )
        if self.noise_intensity < 0.0:
            raise InvalidInputError("noise intensity must be non-negative")

    @property
    def T(self) -> int:
        return self.inputs.shape[0]

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def m(self) -> int:
        return self.inputs.shape[1]


def simulate_experiment(
    plant: LtiPlant,
    inputs: np.ndarray,
    x0: np.ndarray,
    beta: float = 0.0,
    seed: int = 0,
) -> ExperimentData:
    """Run the plant recursion and record the trajectory.

    With ``beta > 0`` an i.i.d. N(0, beta*I) disturbance is added at every
    step, reproducibly from ``seed``; ``beta = 0`` gives the exact recursion.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    if inputs.shape[0] == 0:
        raise InvalidInputError("need at least one input sample")
    if inputs.shape[1] != plant.m:
        raise InvalidInputError(f"inputs have width {inputs.shape[1]}, plant expects {plant.m}")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape[0] != plant.n:
        raise InvalidInputError(f"x0 has length {x0.shape[0]}, plant state dimension is {plant.n}")
    if beta < 0.0:
        raise InvalidInputError("beta must be non-negative")
    T = inputs.shape[0]
    rng = np.random.default_rng(seed)
    noise = np.sqrt(beta) * rng.standard_normal((T, plant.n)) if beta > 0.0 else np.zeros((T, plant.n))
    states = np.empty((T + 1, plant.n))
    states[0] = x0
    for t in range(T):
        states[t + 1] = plant.step(states[t], inputs[t]) + noise[t]
    return ExperimentData(inputs=inputs, states=states, noise_intensity=float(beta))


def random_excitation(T: int, m: int, seed: int = 0) -> np.ndarray:
    """Default excitation protocol: i.i.d. standard normal inputs.

    Generic inputs of this kind are persistently exciting of any feasible
    order with probability one.
    """
    return np.random.default_rng(seed).standard_normal((T, m))


def hankel(signal: np.ndarray, i: int, p: int, q: int) -> np.ndarray:
    """Block Hankel matrix with block (r, c) = signal[i + r + c].

    ``signal`` is (length, sigma); the result is (sigma * p, q).
    """
    signal = np.atleast_2d(np.asarray(signal, dtype=float))
    if signal.shape[0] == 1 and signal.shape[1] > 1:
        signal = signal.T  # accept a flat scalar signal
    length, sigma = signal.shape
    if p < 1 or q < 1 or i < 0:
        raise InvalidInputError(f"need i >= 0, p >= 1, q >= 1, got ({i}, {p}, {q})")
    if i + p + q - 1 > length:
        raise InvalidInputError(
            f"signal of length {length} too short for Hankel window i={i}, p={p}, q={q}"
        )
    H = np.empty((sigma * p, q))
    for r in range(p):
        for c in range(q):
            H[r * sigma:(r + 1) * sigma, c] = signal[i + r + c]
    return H


def is_persistently_exciting(signal: np.ndarray, order: int, rel_tol: float = RANK_REL_TOL) -> bool:
    """Rank test: the depth-``order`` Hankel matrix must have full row rank."""
    signal = np.atleast_2d(np.asarray(signal, dtype=float))
    if signal.shape[0] == 1 and signal.shape[1] > 1:
        signal = signal.T
    length, sigma = signal.shape
    q = length - order + 1
    if q < 1 or q < sigma * order:  # too short to reach rank sigma * order
        return False
    H = hankel(signal, 0, order, q)
    return rank_with_threshold(H, rel_tol) == sigma * order


@dataclass(frozen=True)
class DataMatrices:
    """Stacked data matrices and derived quantities for one experiment.

    ``Theta = X1 @ pinv([U0; X0])`` splits into the identified input matrix
    ``Mu`` (n x m) and state matrix ``Mx`` (n x n); ``Pi_L`` is the orthogonal
    projector onto the nullspace of the stacked data ``L = [U0; X0]`` and
    ``null_basis`` an orthonormal basis of that nullspace (``Pi_L`` equals
    ``null_basis @ null_basis.T``), which gives full-row-rank equality rows
    for nullspace constraints.
    """

    U0: np.ndarray   # (m, T)
    X0: np.ndarray   # (n, T)
    X1: np.ndarray   # (n, T)
    Mu: np.ndarray   # (n, m)
    Mx: np.ndarray   # (n, n)
    L: np.ndarray    # (m+n, T)
    Pi_L: np.ndarray  # (T, T)
    null_basis: np.ndarray  # (T, T - rank(L))

    @property
    def n(self) -> int:
        return self.X0.shape[0]

    @property
    def m(self) -> int:
        return self.U0.shape[0]

    @property
    def T(self) -> int:
        return self.U0.shape[1]


def build_data_matrices(data: ExperimentData) -> DataMatrices:
    """Derive the data matrices; requires rank([U0; X0]) = n + m.

    For noiseless data from a controllable plant under persistently exciting
    input, ``[Mu Mx]`` equals the generating ``[B A]`` up to roundoff.
    """
    U0 = data.inputs.T
    X0 = data.states[:-1].T
    X1 = data.states[1:].T
    L = np.vstack([U0, X0])
    n, m, T = data.n, data.m, data.T
    res = pinv(L)
    achieved = rank_with_threshold(L, RANK_REL_TOL)
    if achieved < n + m:
        raise DataNotInformativeError(achieved_rank=achieved, required_rank=n + m)
    theta = X1 @ res.pinv
    Pi_L = np.eye(T) - res.pinv @ L
    Pi_L = 0.5 * (Pi_L + Pi_L.T)
    eig = eig_sym_descending(Pi_L)  # projector spectrum is {0, 1}
    null_basis = eig.vectors[:, eig.values > 0.5]
    return DataMatrices(U0=U0, X0=X0, X1=X1, Mu=theta[:, :m], Mx=theta[:, m:], L=L,
                        Pi_L=Pi_L, null_basis=null_basis)


# ---------------------------------------------------------------------------
# persistence: one CSV per experiment, decimal with 17 significant digits so
# float64 values round-trip bit-exactly.

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_experiment_csv(data: ExperimentData, path: str | Path) -> None:
    """Write `t,u_0..u_{m-1},x_0..x_{n-1}`; the trailing row carries x_T with empty inputs."""
    path = Path(path)
    header = ["t"] + [f"u_{j}" for j in range(data.m)] + [f"x_{j}" for j in range(data.n)]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t in range(data.T):
            writer.writerow([t] + [_fmt(v) for v in data.inputs[t]] + [_fmt(v) for v in data.states[t]])
        writer.writerow([data.T] + [""] * data.m + [_fmt(v) for v in data.states[data.T]])


def load_experiment_csv(path: str | Path, noise_intensity: float = 0.0) -> ExperimentData:
    """Inverse of :func:`save_experiment_csv` (bit-exact for float64)."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        m = sum(1 for h in header if h.startswith("u_"))
        n = sum(1 for h in header if h.startswith("x_"))
        rows = [row for row in reader if row]
    if not rows:
        raise InvalidInputError(f"{path} contains no data rows")
    T = len(rows) - 1
    inputs = np.empty((T, m))
    states = np.empty((T + 1, n))
    for t, row in enumerate(rows):
        if int(row[0]) != t:
            raise InvalidInputError(f"{path}: expected time index {t}, found {row[0]!r}")
        u_cells = row[1:1 + m]
        x_cells = row[1 + m:1 + m + n]
        states[t] = [float(v) for v in x_cells]
        if t < T:
            inputs[t] = [float(v) for v in u_cells]
        elif any(cell.strip() for cell in u_cells):
            raise InvalidInputError(f"{path}: terminal row must leave input cells empty")
    return ExperimentData(inputs=inputs, states=states, noise_intensity=noise_intensity)
