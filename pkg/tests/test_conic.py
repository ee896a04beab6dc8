import numpy as np
import pytest

from gwsteer.conic import (
    ConeBlock,
    ProgramBuilder,
    SolverTolerances,
    export_text,
    parse_text,
    smat,
    solve,
    svec,
    svec_index,
    svec_len,
)
from gwsteer.linalg import psd_floor


class TestSvec:
    def test_roundtrip(self, rng):
        M = rng.standard_normal((4, 4))
        M = M + M.T
        np.testing.assert_allclose(smat(svec(M), 4), M, atol=1e-14)

    def test_frobenius_inner_product(self, rng):
        A = rng.standard_normal((3, 3))
        A = A + A.T
        B = rng.standard_normal((3, 3))
        B = B + B.T
        assert svec(A) @ svec(B) == pytest.approx(np.trace(A @ B), rel=1e-12)

    def test_index_layout(self):
        # upper-triangle column-major: (0,0), (0,1), (1,1), (0,2), ...
        assert svec_index(0, 0) == 0
        assert svec_index(0, 1) == 1
        assert svec_index(1, 1) == 2
        assert svec_index(0, 2) == 3
        assert svec_index(2, 1) == svec_index(1, 2) == 4
        assert svec_len(3) == 6


def build_soc_norm_problem():
    """min t  s.t.  t >= ||(3, 4)||  -> optimum 5."""
    b = ProgramBuilder()
    t = b.new_vars(1, "t")
    b.add_objective(t, [1.0])
    b.add_soc([
        ([t[0]], [1.0], 0.0),
        ([], [], 3.0),
        ([], [], 4.0),
    ], label="norm-epigraph")
    return b.build()


class TestSolve:
    def test_trivial_psd_feasibility(self):
        b = ProgramBuilder()
        x = b.new_vars(svec_len(2), "X")
        entries = {
            (0, 0): ([x[svec_index(0, 0)]], [1.0], 0.0),
            (0, 1): ([x[svec_index(0, 1)]], [1.0 / np.sqrt(2.0)], 0.0),
            (1, 1): ([x[svec_index(1, 1)]], [1.0], 0.0),
        }
        b.add_psd(2, entries, label="X-psd")
        report = solve(b.build())
        assert report.status == "optimal"
        assert report.objective == pytest.approx(0.0, abs=1e-9)

    def test_soc_norm_epigraph(self):
        report = solve(build_soc_norm_problem())
        assert report.status == "optimal"
        assert report.objective == pytest.approx(5.0, abs=1e-7)

    def test_rsoc_squared_norm(self):
        # min s  s.t.  s >= ||(1, 2)||^2  -> optimum 5
        b = ProgramBuilder()
        s = b.new_vars(1, "s")
        b.add_objective(s, [1.0])
        b.add_rsoc([
            ([s[0]], [1.0], 0.0),
            ([], [], 0.5),
            ([], [], 1.0),
            ([], [], 2.0),
        ], label="sqnorm-epigraph")
        report = solve(b.build())
        assert report.status == "optimal"
        assert report.objective == pytest.approx(5.0, abs=1e-7)

    def test_infeasible_equalities(self):
        b = ProgramBuilder()
        x = b.new_vars(1, "x")
        b.add_zero([([x[0]], [1.0], 0.0)], label="x-zero")
        b.add_zero([([x[0]], [1.0], -1.0)], label="x-one")
        report = solve(b.build())
        assert report.status == "infeasible"
        assert report.infeasibility_labels  # certificate names the clashing rows

    def test_unbounded(self):
        b = ProgramBuilder()
        x = b.new_vars(1, "x")
        b.add_objective(x, [1.0])
        b.add_nonneg([([x[0]], [-1.0], 1.0)], label="x<=1")
        report = solve(b.build())
        assert report.status == "unbounded"

    def test_min_eigvec_sdp(self, rng):
        # min <C, X> s.t. tr X = 1, X psd: optimum is the smallest eigenvalue
        C = rng.standard_normal((3, 3))
        C = C + C.T
        w, V = np.linalg.eigh(C)
        b = ProgramBuilder()
        x = b.new_vars(svec_len(3), "X")
        b.add_objective(x, svec(C))
        diag_cols = [x[svec_index(i, i)] for i in range(3)]
        b.add_zero([(diag_cols, [1.0, 1.0, 1.0], -1.0)], label="unit-trace")
        entries = {}
        for j in range(3):
            for i in range(j + 1):
                scale = 1.0 if i == j else 1.0 / np.sqrt(2.0)
                entries[(i, j)] = ([x[svec_index(i, j)]], [scale], 0.0)
        b.add_psd(3, entries, label="X-psd")
        report = solve(b.build())
        assert report.status == "optimal"
        assert report.objective == pytest.approx(w[0], abs=1e-7)
        X = smat(report.primal, 3)
        np.testing.assert_allclose(X, np.outer(V[:, 0], V[:, 0]), atol=1e-6)

    def test_psd_projection_matches_eigenclamp(self, rng):
        # min t s.t. t >= ||X - C||_F, X psd: the projection clamps the spectrum
        C = rng.standard_normal((3, 3))
        C = C + C.T - 2.0 * np.eye(3)  # make it indefinite
        expected = psd_floor(C, 0.0)
        b = ProgramBuilder()
        x = b.new_vars(svec_len(3), "X")
        t = b.new_vars(1, "t")
        b.add_objective(t, [1.0])
        c_vec = svec(C)
        soc_rows = [([t[0]], [1.0], 0.0)]
        for p in range(svec_len(3)):
            soc_rows.append(([x[p]], [1.0], -c_vec[p]))
        b.add_soc(soc_rows, label="distance-epigraph")
        entries = {}
        for j in range(3):
            for i in range(j + 1):
                scale = 1.0 if i == j else 1.0 / np.sqrt(2.0)
                entries[(i, j)] = ([x[svec_index(i, j)]], [scale], 0.0)
        b.add_psd(3, entries, label="X-psd")
        report = solve(b.build())
        assert report.status == "optimal"
        X = smat(report.primal[: svec_len(3)], 3)
        np.testing.assert_allclose(X, expected, atol=1e-6)
        assert report.objective == pytest.approx(np.linalg.norm(C - expected, "fro"), abs=1e-6)

    def test_residual_bound_at_optimum(self, rng):
        program = build_soc_norm_problem()
        report = solve(program)
        assert report.max_residual <= 1e-6 * (1.0 + program.data_norm())

    def test_deterministic(self):
        r1 = solve(build_soc_norm_problem())
        r2 = solve(build_soc_norm_problem())
        np.testing.assert_array_equal(r1.primal, r2.primal)
        assert r1.objective == r2.objective

    def test_random_lp_against_cvxpy(self, rng):
        import cvxpy as cp

        n_var, n_eq = 6, 3
        A = rng.standard_normal((n_eq, n_var))
        x_feas = np.abs(rng.standard_normal(n_var)) + 0.1
        rhs = A @ x_feas
        c = rng.standard_normal(n_var)

        x = cp.Variable(n_var)
        prob = cp.Problem(cp.Minimize(c @ x + cp.sum_squares(x) * 0), [A @ x == rhs, x >= 0])
        prob.solve(solver=cp.CLARABEL)

        b = ProgramBuilder()
        z = b.new_vars(n_var, "x")
        b.add_objective(z, c)
        b.add_zero([(z, A[i], -rhs[i]) for i in range(n_eq)], label="eq")
        b.add_nonneg([([z[j]], [1.0], 0.0) for j in range(n_var)], label="x>=0")
        report = solve(b.build())
        assert report.status == "optimal"
        assert report.objective == pytest.approx(prob.value, abs=1e-6)

    def test_random_socp_against_cvxpy(self, rng):
        import cvxpy as cp

        n_var = 4
        c = rng.standard_normal(n_var)
        center = rng.standard_normal(n_var)

        x = cp.Variable(n_var)
        prob = cp.Problem(cp.Minimize(c @ x), [cp.norm(x - center) <= 2.0])
        prob.solve(solver=cp.CLARABEL)

        b = ProgramBuilder()
        z = b.new_vars(n_var, "x")
        b.add_objective(z, c)
        rows = [([], [], 2.0)]
        for j in range(n_var):
            rows.append(([z[j]], [1.0], -center[j]))
        b.add_soc(rows, label="ball")
        report = solve(b.build())
        assert report.objective == pytest.approx(prob.value, abs=1e-6)


class TestExport:
    def test_roundtrip(self, rng):
        b = ProgramBuilder()
        x = b.new_vars(3, "x")
        s = b.new_vars(1, "s")
        b.add_objective(x, rng.standard_normal(3))
        b.add_objective_const(0.25)
        b.add_zero([(x, [1.0, 2.0, 3.0], -1.0)], label="sum row")
        b.add_rsoc([
            ([s[0]], [1.0], 0.0),
            ([], [], 0.5),
            ([x[0], x[1]], [1.0, -1.0], 0.1),
        ], label="rotated block")
        program = b.build()
        parsed = parse_text(export_text(program))
        assert parsed.num_vars == program.num_vars
        np.testing.assert_array_equal(parsed.objective, program.objective)
        assert parsed.obj_const == program.obj_const
        assert len(parsed.blocks) == len(program.blocks)
        for blk_a, blk_b in zip(program.blocks, parsed.blocks):
            assert blk_a.kind == blk_b.kind
            assert blk_a.label == blk_b.label
            z = rng.standard_normal(program.num_vars)
            np.testing.assert_array_equal(blk_a.image(z), blk_b.image(z))

    def test_file_output(self, tmp_path):
        program = build_soc_norm_problem()
        path = tmp_path / "prog.txt"
        export_text(program, path)
        assert parse_text(path.read_text()).num_vars == program.num_vars

    def test_solutions_agree_after_roundtrip(self):
        program = build_soc_norm_problem()
        parsed = parse_text(export_text(program))
        assert solve(parsed).objective == pytest.approx(solve(program).objective, abs=1e-10)
