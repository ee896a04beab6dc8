"""Standard-form conic programs and the pluggable interior-point solver adapter.

A program minimizes a linear functional of a flat variable vector ``z``
subject to a list of cone memberships, each block stating that the affine
image ``M z + q`` lies in one of:

* ``zero``    -- affine equalities,
* ``nonneg``  -- elementwise inequalities,
* ``soc``     -- second-order cone (first row bounds the norm of the rest),
* ``rsoc``    -- rotated second-order cone (2 * row0 * row1 >= ||rest||^2),
* ``psd``     -- positive semidefiniteness in scaled triangular form.

Symmetric matrices are vectorized upper-triangle column-major with
off-diagonal entries scaled by sqrt(2), which preserves Frobenius inner
products.  Solver backends register by name; the default backend is the
Clarabel primal-dual interior-point solver (rotated cones are lowered to
plain second-order cones inside the adapter).  Programs can be exported to a
plain-text sparse format for cross-checks against external solvers.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .linalg import InvalidInputError

__all__ = [
    "SolverFailureError",
    "svec_len",
    "svec_index",
    "svec",
    "smat",
    "ConeBlock",
    "ConicProgram",
    "ProgramBuilder",
    "SolverTolerances",
    "SolverReport",
    "solve",
    "export_text",
    "parse_text",
]

_SQRT2 = math.sqrt(2.0)

VALID_KINDS = ("zero", "nonneg", "soc", "rsoc", "psd")


class SolverFailureError(RuntimeError):
    """Raised when a backend reports a numerical breakdown."""


# ---------------------------------------------------------------------------
# scaled symmetric vectorization


def svec_len(k: int) -> int:
    """Length of the scaled triangular vectorization of a k x k symmetric matrix."""
    return k * (k + 1) // 2


def svec_index(i: int, j: int) -> int:
    """Position of entry (i, j), i <= j, in upper-triangle column-major order."""
    if i > j:
        i, j = j, i
    return j * (j + 1) // 2 + i


def svec(M: np.ndarray) -> np.ndarray:
    """Scaled triangular vectorization: off-diagonals multiplied by sqrt(2).

    Satisfies ``svec(A) @ svec(B) == trace(A @ B)`` for symmetric A, B.
    """
    M = np.asarray(M, dtype=float)
    k = M.shape[0]
    out = np.empty(svec_len(k))
    p = 0
    for j in range(k):
        for i in range(j + 1):
            out[p] = M[i, j] if i == j else _SQRT2 * M[i, j]
            p += 1
    return out


def smat(v: np.ndarray, k: int) -> np.ndarray:
    """Inverse of :func:`svec`."""
    v = np.asarray(v, dtype=float)
    if v.shape[0] != svec_len(k):
        raise InvalidInputError(f"expected length {svec_len(k)} for order {k}, got {v.shape[0]}")
    M = np.empty((k, k))
    p = 0
    for j in range(k):
        for i in range(j + 1):
            val = v[p] if i == j else v[p] / _SQRT2
            M[i, j] = val
            M[j, i] = val
            p += 1
    return M


# ---------------------------------------------------------------------------
# program representation


@dataclass(frozen=True)
class ConeBlock:
    """One membership constraint ``M z + q in K`` in sparse triplet form."""

    kind: str
    dim: int            # number of rows in the affine image
    order: int          # matrix side for psd blocks, 0 otherwise
    label: str
    rows: np.ndarray    # triplet row indices, local to the block
    cols: np.ndarray    # triplet variable indices
    vals: np.ndarray
    const: np.ndarray   # (dim,)

    def image(self, z: np.ndarray) -> np.ndarray:
        out = self.const.copy()
        np.add.at(out, self.rows, self.vals * z[self.cols])
        return out

    def residual(self, z: np.ndarray) -> float:
        """Distance-like violation of the membership at z (0 when satisfied)."""
        s = self.image(z)
        if self.kind == "zero":
            return float(np.abs(s).max(initial=0.0))
        if self.kind == "nonneg":
            return float(np.maximum(-s, 0.0).max(initial=0.0))
        if self.kind == "soc":
            return max(0.0, float(np.linalg.norm(s[1:]) - s[0]))
        if self.kind == "rsoc":
            t = s[0] + s[1]
            x = np.concatenate([[s[0] - s[1]], _SQRT2 * s[2:]])
            return max(0.0, float(np.linalg.norm(x) - t))
        if self.kind == "psd":
            w = np.linalg.eigvalsh(smat(s, self.order))
            return max(0.0, float(-w.min()))
        raise InvalidInputError(f"unknown cone kind {self.kind!r}")


@dataclass(frozen=True)
class ConicProgram:
    """Immutable standard-form program; safe to share across threads."""

    num_vars: int
    objective: np.ndarray   # (num_vars,)
    obj_const: float
    blocks: tuple[ConeBlock, ...]
    var_names: tuple[tuple[str, int, int], ...] = ()  # (name, start, stop) spans

    def objective_value(self, z: np.ndarray) -> float:
        return float(self.objective @ z) + self.obj_const

    def max_residual(self, z: np.ndarray) -> float:
        return max((blk.residual(z) for blk in self.blocks), default=0.0)

    def data_norm(self) -> float:
        """Magnitude of the problem data, for relative residual scales."""
        pieces = [float(np.abs(self.objective).max(initial=0.0))]
        for blk in self.blocks:
            pieces.append(float(np.abs(blk.vals).max(initial=0.0)))
            pieces.append(float(np.abs(blk.const).max(initial=0.0)))
        return max(pieces)


class _RowAccumulator:
    """Sparse rows under construction for one cone block."""

    __slots__ = ("rows", "cols", "vals", "const", "dim")

    def __init__(self):
        self.rows: list[int] = []
        self.cols: list[int] = []
        self.vals: list[float] = []
        self.const: list[float] = []
        self.dim = 0

    def add_row(self, cols, vals, const=0.0):
        r = self.dim
        for c, v in zip(cols, vals):
            if v != 0.0:
                self.rows.append(r)
                self.cols.append(int(c))
                self.vals.append(float(v))
        self.const.append(float(const))
        self.dim += 1


class ProgramBuilder:
    """Incrementally assemble a :class:`ConicProgram`."""

    def __init__(self):
        self._num_vars = 0
        self._spans: list[tuple[str, int, int]] = []
        self._obj: dict[int, float] = {}
        self._obj_const = 0.0
        self._blocks: list[ConeBlock] = []

    # -- variables ---------------------------------------------------------

    def new_vars(self, count: int, name: str) -> np.ndarray:
        start = self._num_vars
        self._num_vars += int(count)
        self._spans.append((name, start, self._num_vars))
        return np.arange(start, self._num_vars)

    @property
    def num_vars(self) -> int:
        return self._num_vars

    # -- objective ---------------------------------------------------------

    def add_objective(self, cols, vals) -> None:
        for c, v in zip(np.atleast_1d(cols), np.atleast_1d(vals)):
            if v != 0.0:
                self._obj[int(c)] = self._obj.get(int(c), 0.0) + float(v)

    def add_objective_const(self, value: float) -> None:
        self._obj_const += float(value)

    # -- blocks ------------------------------------------------------------

    def _add_block(self, kind: str, acc: _RowAccumulator, label: str, order: int = 0) -> None:
        if kind not in VALID_KINDS:
            raise InvalidInputError(f"unknown cone kind {kind!r}")
        vals = np.asarray(acc.vals, dtype=float)
        if vals.size and not np.all(np.isfinite(vals)):
            raise InvalidInputError(f"non-finite coefficients in block {label!r}")
        const = np.asarray(acc.const, dtype=float)
        if const.size and not np.all(np.isfinite(const)):
            raise InvalidInputError(f"non-finite constants in block {label!r}")
        self._blocks.append(ConeBlock(
            kind=kind, dim=acc.dim, order=order, label=label,
            rows=np.asarray(acc.rows, dtype=np.int64),
            cols=np.asarray(acc.cols, dtype=np.int64),
            vals=vals, const=const,
        ))

    def add_zero(self, rows, label: str) -> None:
        """rows: iterable of (cols, vals, const); constrains each row to equal zero."""
        acc = _RowAccumulator()
        for cols, vals, const in rows:
            acc.add_row(cols, vals, const)
        self._add_block("zero", acc, label)

    def add_nonneg(self, rows, label: str) -> None:
        """rows as in :meth:`add_zero`; constrains each row to be >= 0."""
        acc = _RowAccumulator()
        for cols, vals, const in rows:
            acc.add_row(cols, vals, const)
        self._add_block("nonneg", acc, label)

    def add_soc(self, rows, label: str) -> None:
        """First row bounds the Euclidean norm of the remaining rows."""
        acc = _RowAccumulator()
        for cols, vals, const in rows:
            acc.add_row(cols, vals, const)
        if acc.dim < 1:
            raise InvalidInputError("a second-order cone block needs at least one row")
        self._add_block("soc", acc, label)

    def add_rsoc(self, rows, label: str) -> None:
        """Rows (p, q, x...): constrains 2 p q >= ||x||^2 with p, q >= 0."""
        acc = _RowAccumulator()
        for cols, vals, const in rows:
            acc.add_row(cols, vals, const)
        if acc.dim < 2:
            raise InvalidInputError("a rotated cone block needs at least two rows")
        self._add_block("rsoc", acc, label)

    def add_psd(self, order: int, entry_rows, label: str) -> None:
        """entry_rows[(i, j)] for i <= j gives the affine expression of entry (i, j).

        The block constrains the symmetric matrix assembled from those
        entries to be positive semidefinite.
        """
        acc = _RowAccumulator()
        for j in range(order):
            for i in range(j + 1):
                cols, vals, const = entry_rows[(i, j)]
                scale = 1.0 if i == j else _SQRT2
                acc.add_row(cols, [scale * v for v in vals], scale * const)
        self._add_block("psd", acc, label, order=order)

    def build(self) -> ConicProgram:
        obj = np.zeros(self._num_vars)
        for c, v in self._obj.items():
            obj[c] = v
        return ConicProgram(
            num_vars=self._num_vars,
            objective=obj,
            obj_const=self._obj_const,
            blocks=tuple(self._blocks),
            var_names=tuple(self._spans),
        )


# ---------------------------------------------------------------------------
# solving


@dataclass(frozen=True)
class SolverTolerances:
    feasibility: float = 1e-9
    gap_abs: float = 1e-9
    gap_rel: float = 1e-9
    max_iterations: int = 200


@dataclass
class SolverReport:
    """Outcome of one conic solve.

    ``status`` is one of ``optimal``, ``infeasible``, ``unbounded`` or
    ``numerical-trouble``.  ``blocks`` is filled by callers that know the
    variable layout.
    """

    status: str
    objective: float
    primal: np.ndarray
    iterations: int
    max_residual: float
    message: str = ""
    infeasibility_labels: tuple[str, ...] = ()
    blocks: dict = field(default_factory=dict)

    @property
    def is_optimal(self) -> bool:
        return self.status == "optimal"


def _rsoc_to_soc_rows(block: ConeBlock) -> ConeBlock:
    """Lower a rotated cone block to a plain second-order cone block.

    (p, q, x) with 2pq >= ||x||^2 maps to (p + q, p - q, sqrt(2) x).
    """
    rows = block.rows
    p_mask = rows == 0
    q_mask = rows == 1
    x_mask = rows >= 2
    new_rows = []
    new_cols = []
    new_vals = []
    # row 0: p + q
    new_rows += [0] * int(p_mask.sum() + q_mask.sum())
    new_cols += list(block.cols[p_mask]) + list(block.cols[q_mask])
    new_vals += list(block.vals[p_mask]) + list(block.vals[q_mask])
    # row 1: p - q
    new_rows += [1] * int(p_mask.sum() + q_mask.sum())
    new_cols += list(block.cols[p_mask]) + list(block.cols[q_mask])
    new_vals += list(block.vals[p_mask]) + list(-block.vals[q_mask])
    # rows 2..: sqrt(2) x
    new_rows += list(rows[x_mask])
    new_cols += list(block.cols[x_mask])
    new_vals += list(_SQRT2 * block.vals[x_mask])
    const = np.concatenate([
        [block.const[0] + block.const[1], block.const[0] - block.const[1]],
        _SQRT2 * block.const[2:],
    ])
    return ConeBlock(
        kind="soc", dim=block.dim, order=0, label=block.label,
        rows=np.asarray(new_rows, dtype=np.int64),
        cols=np.asarray(new_cols, dtype=np.int64),
        vals=np.asarray(new_vals, dtype=float),
        const=const,
    )


# successive KKT regularization levels tried when the interior point stalls on
# a degenerate optimal face; the ladder is fixed, so solves stay deterministic
_CLARABEL_LADDER = (
    {},
    {"static_regularization_constant": 1e-7},
    {"static_regularization_constant": 1e-6, "equilibrate_enable": False},
)


def _solve_clarabel(program: ConicProgram, tol: SolverTolerances):
    import clarabel
    from scipy import sparse

    # clarabel order: zero, nonneg, then soc/psd blocks in listed order
    kind_rank = {"zero": 0, "nonneg": 1, "soc": 2, "rsoc": 2, "psd": 2}
    ordered = sorted(range(len(program.blocks)), key=lambda b: kind_rank[program.blocks[b].kind])

    rows = []
    cols = []
    vals = []
    consts = []
    cones = []
    offset = 0
    for b in ordered:
        blk = program.blocks[b]
        if blk.kind == "rsoc":
            blk = _rsoc_to_soc_rows(blk)
        # membership M z + q in K  ->  A = -M, b = q  (so s = b - A z = M z + q)
        rows.append(blk.rows + offset)
        cols.append(blk.cols)
        vals.append(-blk.vals)
        consts.append(blk.const)
        if blk.kind == "zero":
            cones.append(clarabel.ZeroConeT(blk.dim))
        elif blk.kind == "nonneg":
            cones.append(clarabel.NonnegativeConeT(blk.dim))
        elif blk.kind == "soc":
            cones.append(clarabel.SecondOrderConeT(blk.dim))
        elif blk.kind == "psd":
            cones.append(clarabel.PSDTriangleConeT(blk.order))
        offset += blk.dim

    total_rows = offset
    A = sparse.csc_matrix(
        (np.concatenate(vals) if vals else np.zeros(0),
         (np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64),
          np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64))),
        shape=(total_rows, program.num_vars),
    )
    b = np.concatenate(consts) if consts else np.zeros(0)
    P = sparse.csc_matrix((program.num_vars, program.num_vars))

    solution = None
    for attempt, overrides in enumerate(_CLARABEL_LADDER):
        settings = clarabel.DefaultSettings()
        settings.verbose = False
        settings.tol_feas = tol.feasibility
        settings.tol_gap_abs = tol.gap_abs
        settings.tol_gap_rel = tol.gap_rel
        settings.max_iter = tol.max_iterations
        for key, value in overrides.items():
            setattr(settings, key, value)
        solution = clarabel.DefaultSolver(P, program.objective, A, b, cones, settings).solve()
        if str(solution.status) not in ("NumericalError", "InsufficientProgress", "MaxIterations"):
            break

    status = str(solution.status)
    primal = np.asarray(solution.x, dtype=float)
    dual = np.asarray(solution.z, dtype=float)
    # map the certificate back to source blocks for infeasibility reporting
    block_mass = []
    offset = 0
    for b_idx in ordered:
        blk = program.blocks[b_idx]
        seg = dual[offset:offset + blk.dim]
        block_mass.append((float(np.abs(seg).max(initial=0.0)), blk.label))
        offset += blk.dim
    return status, primal, int(solution.iterations), block_mass


_BACKENDS = {"clarabel": _solve_clarabel}

_STATUS_MAP = {
    "Solved": "optimal",
    "AlmostSolved": "optimal",
    "PrimalInfeasible": "infeasible",
    "AlmostPrimalInfeasible": "infeasible",
    "DualInfeasible": "unbounded",
    "AlmostDualInfeasible": "unbounded",
}


def solve(
    program: ConicProgram,
    tolerances: SolverTolerances | None = None,
    backend: str = "clarabel",
) -> SolverReport:
    """Solve a conic program and report status, primal point and residuals.

    Deterministic for fixed inputs.  Infeasibility and unboundedness are
    certified by the backend and reported (with the most implicated block
    labels); numerical breakdowns surface as ``numerical-trouble``.
    """
    if backend not in _BACKENDS:
        raise InvalidInputError(f"unknown backend {backend!r}; available: {sorted(_BACKENDS)}")
    tol = tolerances or SolverTolerances()
    raw_status, primal, iterations, block_mass = _BACKENDS[backend](program, tol)
    status = _STATUS_MAP.get(raw_status, "numerical-trouble")
    if status == "optimal":
        if primal.size != program.num_vars:
            status = "numerical-trouble"
            primal = np.zeros(program.num_vars)
        objective = program.objective_value(primal)
        residual = program.max_residual(primal)
        return SolverReport(
            status="optimal", objective=objective, primal=primal,
            iterations=iterations, max_residual=residual,
            message=f"backend status {raw_status}",
        )
    if status in ("infeasible", "unbounded"):
        worst = sorted(block_mass, reverse=True)[:5]
        labels = tuple(label for mass, label in worst if mass > 0.0)
        return SolverReport(
            status=status, objective=float("nan"),
            primal=np.full(program.num_vars, np.nan), iterations=iterations,
            max_residual=float("nan"),
            message=f"backend status {raw_status}",
            infeasibility_labels=labels,
        )
    return SolverReport(
        status="numerical-trouble", objective=float("nan"),
        primal=np.full(program.num_vars, np.nan), iterations=iterations,
        max_residual=float("nan"), message=f"backend status {raw_status}",
    )


# ---------------------------------------------------------------------------
# plain-text export (documented sparse interchange format)
#
#   gwsteer-conic 1
#   vars <d>
#   objconst <float>
#   objnnz <k>           followed by k lines: <var> <value>
#   blocks <B>
#   block <kind> <dim> <order> <nnz> <cnnz> <label>
#       nnz lines:  <row> <var> <value>      (membership M z + q in K)
#       cnnz lines: <row> <value>            (nonzero entries of q)
#
# floats are written with 17 significant digits and round-trip bit-exactly.


def _g(x: float) -> str:
    return format(float(x), ".17g")


def export_text(program: ConicProgram, path: str | Path | None = None) -> str:
    """Serialize a program to the text interchange format; optionally write it."""
    out = io.StringIO()
    out.write("gwsteer-conic 1\n")
    out.write(f"vars {program.num_vars}\n")
    out.write(f"objconst {_g(program.obj_const)}\n")
    nz = np.nonzero(program.objective)[0]
    out.write(f"objnnz {len(nz)}\n")
    for j in nz:
        out.write(f"{j} {_g(program.objective[j])}\n")
    out.write(f"blocks {len(program.blocks)}\n")
    for blk in program.blocks:
        cnz = np.nonzero(blk.const)[0]
        out.write(
            f"block {blk.kind} {blk.dim} {blk.order} {len(blk.vals)} {len(cnz)} {blk.label}\n"
        )
        for r, c, v in zip(blk.rows, blk.cols, blk.vals):
            out.write(f"{r} {c} {_g(v)}\n")
        for r in cnz:
            out.write(f"{r} {_g(blk.const[r])}\n")
    text = out.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def parse_text(text: str) -> ConicProgram:
    """Inverse of :func:`export_text`."""
    lines = iter(text.splitlines())

    def expect(prefix):
        line = next(lines)
        if not line.startswith(prefix):
            raise InvalidInputError(f"expected {prefix!r}, got {line!r}")
        return line[len(prefix):].strip()

    if next(lines).strip() != "gwsteer-conic 1":
        raise InvalidInputError("unrecognized header")
    num_vars = int(expect("vars "))
    obj_const = float(expect("objconst "))
    objective = np.zeros(num_vars)
    for _ in range(int(expect("objnnz "))):
        j, v = next(lines).split()
        objective[int(j)] = float(v)
    blocks = []
    for _ in range(int(expect("blocks "))):
        head = expect("block ").split(maxsplit=5)
        kind, dim, order, nnz, cnnz = head[0], int(head[1]), int(head[2]), int(head[3]), int(head[4])
        label = head[5] if len(head) > 5 else ""
        rows = np.empty(nnz, dtype=np.int64)
        cols = np.empty(nnz, dtype=np.int64)
        vals = np.empty(nnz)
        for t in range(nnz):
            r, c, v = next(lines).split()
            rows[t], cols[t], vals[t] = int(r), int(c), float(v)
        const = np.zeros(dim)
        for _ in range(cnnz):
            r, v = next(lines).split()
            const[int(r)] = float(v)
        blocks.append(ConeBlock(kind=kind, dim=dim, order=order, label=label,
                                rows=rows, cols=cols, vals=vals, const=const))
    return ConicProgram(num_vars=num_vars, objective=objective, obj_const=obj_const,
                        blocks=tuple(blocks))
