import numpy as np
import pytest

from gwsteer.chance import HalfPlane, allocate_uniform
from gwsteer.conic import svec_len
from gwsteer.dcocp import (
    AssemblyError,
    assemble,
    assemble_fixed_terminal,
    control_cost_of_blocks,
    evaluate_dc_objective,
    recover_gains,
    solve_subproblem,
)
from gwsteer.ggw import dca_linearization
from gwsteer.mixture import GaussianMixture
from gwsteer.plant import build_data_matrices, random_excitation, simulate_experiment
from gwsteer.problem import SteeringProblem, benchmark_plant, benchmark_problem


@pytest.fixture(scope="module")
def bench_data():
    plant = benchmark_plant()
    u = random_excitation(10, 1, seed=0)
    data = simulate_experiment(plant, u, x0=np.zeros(2), beta=0.0)
    return build_data_matrices(data)


@pytest.fixture(scope="module")
def bench_setup(bench_data):
    problem = benchmark_problem()
    risk = allocate_uniform(problem.risk_budget, problem.K, len(problem.planes),
                            problem.horizon, problem.initial.weights)
    Q = dca_linearization(np.eye(2), problem.target_cov)
    return problem, bench_data, risk, Q


def tiny_problem(N=2, K=1, chance=False, **kwargs):
    initial = GaussianMixture(
        weights=np.ones(K) / K,
        means=np.linspace(-2.0, 2.0, 2 * K).reshape(K, 2),
        covariances=np.stack([np.eye(2)] * K),
    )
    planes = (HalfPlane([1.0, 0.0], 50.0),) if chance else ()
    return SteeringProblem(horizon=N, initial=initial, target_cov=np.diag([1.0, 0.5]),
                           planes=planes, chance_enabled=chance, **kwargs)


class TestAssemble:
    def test_benchmark_free_variable_count(self, bench_setup):
        problem, data, risk, Q = bench_setup
        asm = assemble(problem, data, risk, Q)
        n, m, T, N, K = 2, 1, 10, 15, 3
        per_comp = N * n + N * m + N * svec_len(n) + N * T * n + N * svec_len(T)
        expected = K * per_comp + K * N + 2
        assert asm.layout.num_free == expected
        assert asm.layout.expected_free_count() == expected
        assert asm.program.num_vars == expected

    def test_benchmark_block_inventory(self, bench_setup):
        problem, data, risk, Q = bench_setup
        asm = assemble(problem, data, risk, Q)
        psd = [b for b in asm.program.blocks if b.kind == "psd"]
        assert len(psd) == 3 * 15
        assert all(b.order == 12 for b in psd)  # n + T
        chance = [b for b in asm.program.blocks if b.kind == "nonneg"]
        assert len(chance) == 3  # one block of 15 rows per (component, plane)
        assert all(b.dim == 15 for b in chance)

    def test_minimal_instance_constraint_audit(self, bench_data):
        # K=1, N=1, no chance constraints: enumerate the whole program by hand
        problem = tiny_problem(N=1, K=1)
        asm = assemble(problem, bench_data, None, np.zeros((2, 2)))
        labels = sorted(b.label for b in asm.program.blocks)
        assert labels == sorted([
            "mean-dynamics[i=0,t=0]",   # Mx mu_0 + Mu v_0 = mu_1
            "cov-from-S[i=0,t=0]",      # X0 S_0 = Sigma_0
            "cov-step[i=0,t=0]",        # Sigma_1 = X1 Y_0 X1'
            "lmi[i=0,t=0]",             # [[Sigma_0, S_0'], [S_0, Y_0]] >= 0
            "ctrl-epi[i=0,t=0]",        # s >= v' R v
            "trace-gap-epigraph",
            "frobenius-epigraph",
        ])
        # variables: mu_1 (2), v_0 (1), sig_1 (3), S_0 (20), Y_0 (55), epis (1 + 2)
        assert asm.program.num_vars == 2 + 1 + 3 + 20 + 55 + 1 + 2

    def test_dimension_mismatch_reports_label(self, bench_setup):
        problem, data, risk, _ = bench_setup
        with pytest.raises(AssemblyError, match="linear term"):
            assemble(problem, data, risk, np.zeros((3, 3)))

    def test_regularized_needs_positive_weight(self, bench_setup):
        problem, data, risk, Q = bench_setup
        with pytest.raises(AssemblyError):
            assemble(problem, data, risk, Q, mode="regularized", reg_lambda=0.0)


class TestSolveSubproblem:
    def test_fixed_blocks_bit_exact(self, bench_setup):
        problem, data, risk, Q = bench_setup
        report = solve_subproblem(assemble(problem, data, risk, Q))
        assert report.is_optimal
        blocks = report.blocks["primal"]
        np.testing.assert_array_equal(blocks.means[:, 0], problem.initial.means)
        np.testing.assert_array_equal(blocks.covs[:, 0], problem.initial.covariances)

    def test_terminal_consensus(self, bench_setup):
        problem, data, risk, Q = bench_setup
        report = solve_subproblem(assemble(problem, data, risk, Q))
        blocks = report.blocks["primal"]
        N = problem.horizon
        for i in range(1, problem.K):
            assert np.linalg.norm(blocks.means[i, N] - blocks.means[0, N]) <= 1e-6
            assert np.linalg.norm(blocks.covs[i, N] - blocks.covs[0, N], "fro") <= 1e-6

    def test_objective_audit(self, bench_setup):
        problem, data, risk, Q = bench_setup
        asm = assemble(problem, data, risk, Q)
        report = solve_subproblem(asm)
        re_eval = asm.program.objective_value(report.primal)
        assert abs(re_eval - report.objective) <= 1e-7 * max(1.0, abs(report.objective))

    def test_schur_relaxation_direction(self, bench_setup):
        # Y_t dominates S_t Sigma_t^{-1} S_t', so the planned effort bounds the true one
        problem, data, risk, Q = bench_setup
        report = solve_subproblem(assemble(problem, data, risk, Q))
        blocks = report.blocks["primal"]
        R = problem.R_matrices(data.m)
        for i in range(problem.K):
            for t in range(problem.horizon):
                sigma = blocks.covs[i, t] + 1e-9 * np.eye(2)
                G = blocks.S[i, t] @ np.linalg.inv(sigma)
                gap = blocks.Y[i, t] - G @ sigma @ G.T
                assert np.linalg.eigvalsh(gap).min() >= -1e-8
                planned = np.trace(R[t] @ data.U0 @ blocks.Y[i, t] @ data.U0.T)
                Kg = data.U0 @ G
                true_cost = np.trace(R[t] @ Kg @ sigma @ Kg.T)
                assert planned >= true_cost - 1e-6

    def test_chance_rows_feasible_at_solution(self, bench_setup):
        from gwsteer.chance import linear_coefficients

        problem, data, risk, Q = bench_setup
        report = solve_subproblem(assemble(problem, data, risk, Q))
        blocks = report.blocks["primal"]
        plane = problem.planes[0]
        for i in range(problem.K):
            for t in range(1, problem.horizon + 1):
                kappa, offset = linear_coefficients(
                    plane, float(risk.risks[i, 0, t - 1]), problem.initial.covariances[i])
                lhs = (plane.a @ blocks.means[i, t]
                       + kappa * float(plane.a @ blocks.covs[i, t] @ plane.a) + offset)
                assert lhs <= plane.b + 1e-6

    def test_infeasible_budget_reports_labels(self, bench_data):
        # two opposing half-planes leave no feasible mean: certified infeasible
        initial = GaussianMixture(weights=np.array([1.0]), means=np.array([[0.0, 0.0]]),
                                  covariances=np.stack([np.eye(2)]))
        problem = SteeringProblem(horizon=2, initial=initial, target_cov=np.eye(2),
                                  planes=(HalfPlane([1.0, 0.0], -10.0),
                                          HalfPlane([-1.0, 0.0], -10.0)),
                                  risk_budget=0.01, chance_enabled=True)
        risk = allocate_uniform(0.01, 1, 2, 2, [1.0])
        report = solve_subproblem(assemble(problem, bench_data, risk, np.zeros((2, 2))))
        assert report.status == "infeasible"
        assert any("chance" in lbl for lbl in report.infeasibility_labels)


class TestRecoverGains:
    def test_identity_covariance_case(self, bench_data):
        # with Sigma_t = I the gain is U0 S_t directly
        problem = tiny_problem(N=1, K=1)
        report = solve_subproblem(assemble(problem, bench_data, None, np.zeros((2, 2))))
        realization = recover_gains(report, bench_data, problem)
        blocks = report.blocks["primal"]
        expected = bench_data.U0 @ blocks.S[0, 0] @ np.linalg.inv(
            blocks.covs[0, 0] + 0.0 * np.eye(2))
        np.testing.assert_allclose(realization.policy.gains[0, 0], expected, atol=1e-9)
        assert realization.gain_residuals.max() <= 1e-4
        assert not realization.warnings

    def test_tight_lmi_congruence(self, bench_setup):
        # when the planned effort term is active the next covariance matches X1 G Sigma G' X1'
        problem, data, risk, Q = bench_setup
        report = solve_subproblem(assemble(problem, data, risk, Q))
        blocks = report.blocks["primal"]
        for i in range(problem.K):
            for t in range(problem.horizon):
                sigma = blocks.covs[i, t] + 1e-12 * np.eye(2)
                G = blocks.S[i, t] @ np.linalg.inv(sigma)
                realized = data.X1 @ G @ sigma @ G.T @ data.X1.T
                gap = blocks.covs[i, t + 1] - realized
                # realized covariance never exceeds the planned one
                assert np.linalg.eigvalsh(gap).min() >= -1e-6

    def test_planned_moments_propagate(self, bench_setup):
        # recovered policy moments reproduce the identified-model recursion
        problem, data, risk, Q = bench_setup
        report = solve_subproblem(assemble(problem, data, risk, Q))
        realization = recover_gains(report, data, problem)
        for i in range(problem.K):
            for t in range(problem.horizon):
                mu_next = data.Mx @ realization.planned_means[i, t] \
                    + data.Mu @ realization.feedforward[i, t]
                np.testing.assert_allclose(mu_next, realization.planned_means[i, t + 1],
                                           atol=1e-6)


class TestModes:
    def test_indirect_never_beats_direct(self, bench_setup):
        problem, data, risk, Q = bench_setup
        direct = solve_subproblem(assemble(problem, data, risk, Q, mode="direct"))
        indirect = solve_subproblem(assemble(problem, data, risk, Q, mode="indirect"))
        assert direct.is_optimal and indirect.is_optimal
        assert indirect.objective >= direct.objective - 1e-7

    def test_indirect_annihilates_nullspace(self, bench_setup):
        problem, data, risk, Q = bench_setup
        report = solve_subproblem(assemble(problem, data, risk, Q, mode="indirect"))
        blocks = report.blocks["primal"]
        for i in range(problem.K):
            for t in range(problem.horizon):
                assert np.abs(data.Pi_L @ blocks.S[i, t]).max() <= 1e-6

    def test_large_lambda_matches_indirect(self, bench_data):
        problem = tiny_problem(N=3, K=1)
        indirect = solve_subproblem(assemble(problem, bench_data, None, np.zeros((2, 2)),
                                             mode="indirect"))
        reg = solve_subproblem(assemble(problem, bench_data, None, np.zeros((2, 2)),
                                        mode="regularized", reg_lambda=1e6))
        blk_i = indirect.blocks["primal"]
        blk_r = reg.blocks["primal"]
        assert np.abs(blk_r.S - blk_i.S).max() <= 1e-4
        ci = control_cost_of_blocks(blk_i, problem, bench_data)
        cr = control_cost_of_blocks(blk_r, problem, bench_data)
        assert abs(ci - cr) <= 1e-4 * max(1.0, abs(ci))


class TestFixedTerminal:
    def test_terminal_pinned(self, bench_data):
        problem = tiny_problem(N=4, K=1)
        mu_star = np.array([1.0, 0.5])
        cap = np.diag([1.5, 0.8])
        report = solve_subproblem(assemble_fixed_terminal(problem, bench_data, mu_star, cap))
        assert report.is_optimal
        blocks = report.blocks["primal"]
        np.testing.assert_allclose(blocks.means[0, 4], mu_star, atol=1e-7)
        gap = cap + 1e-6 * np.eye(2) - blocks.covs[0, 4]
        assert np.linalg.eigvalsh(gap).min() >= -1e-7

    def test_objective_is_pure_control_cost(self, bench_data):
        problem = tiny_problem(N=4, K=1)
        asm = assemble_fixed_terminal(problem, bench_data, np.array([1.0, 0.5]),
                                      np.diag([1.5, 0.8]))
        report = solve_subproblem(asm)
        blocks = report.blocks["primal"]
        assert report.objective == pytest.approx(
            control_cost_of_blocks(blocks, problem, bench_data), abs=1e-6)


class TestEvaluateDcObjective:
    def test_matches_pieces(self, bench_setup):
        problem, data, risk, Q = bench_setup
        asm = assemble(problem, data, risk, Q)
        report = solve_subproblem(asm)
        blocks = report.blocks["primal"]
        val = evaluate_dc_objective(blocks, asm)
        ctrl = control_cost_of_blocks(blocks, problem, data)
        ggw_part = asm.split.evaluate(blocks.terminal_cov())
        assert val == pytest.approx(ctrl + problem.epsilon * ggw_part, rel=1e-10)
