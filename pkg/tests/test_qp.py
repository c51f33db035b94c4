import itertools

import numpy as np
import pytest
import scipy.sparse as sp

from ates_mhe.qp import (
    QpStatus,
    kkt_residuals,
    make_qp,
    solve_qp,
    with_row_ranges,
)


def enumerate_box_qp(h, g, lb, ub):
    """Brute-force oracle: solve the equality-constrained QP for every subset
    of active bounds and keep the feasible candidate with the best objective.

    Returns (z, signed bound duals) of the optimum.
    """
    d = len(g)
    candidates = [(i, "l") for i in range(d) if np.isfinite(lb[i])]
    candidates += [(i, "u") for i in range(d) if np.isfinite(ub[i])]
    best_obj = np.inf
    best = None
    for mask in itertools.product((False, True), repeat=len(candidates)):
        chosen = [c for c, m in zip(candidates, mask) if m]
        idx = [c[0] for c in chosen]
        if len(set(idx)) != len(idx):
            continue
        n_act = len(chosen)
        kkt = np.zeros((d + n_act, d + n_act))
        kkt[:d, :d] = h
        rhs = np.concatenate([-g, np.zeros(n_act)])
        for r, (i, side) in enumerate(chosen):
            kkt[d + r, i] = 1.0
            kkt[i, d + r] = 1.0
            rhs[d + r] = lb[i] if side == "l" else ub[i]
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            continue
        z = sol[:d]
        if np.any(z < lb - 1e-9) or np.any(z > ub + 1e-9):
            continue
        obj = 0.5 * z @ h @ z + g @ z
        if obj < best_obj - 1e-12:
            best_obj = obj
            mu = np.zeros(d)
            for r, (i, side) in enumerate(chosen):
                mu[i] = -sol[d + r]
            best = (z.copy(), mu)
    return best


def random_box_qp(rng, d=None):
    d = d or int(rng.integers(2, 9))
    m_mat = rng.normal(size=(d, d))
    h = m_mat @ m_mat.T + 0.1 * np.eye(d)
    g = rng.normal(size=d) * 2.0
    lb = np.full(d, -np.inf)
    ub = np.full(d, np.inf)
    n_bounds = int(rng.integers(1, 5))
    for _ in range(n_bounds):
        i = int(rng.integers(0, d))
        if rng.random() < 0.5:
            lb[i] = rng.normal()
        else:
            ub[i] = rng.normal()
    bad = lb > ub
    lb[bad], ub[bad] = ub[bad], lb[bad]
    return make_qp(h, g, lb=lb, ub=ub)


class TestSolveQp:
    def test_active_bound_scalar(self):
        # min (z-1)^2 s.t. z >= 2
        qp = make_qp([[2.0]], [-2.0], lb=[2.0])
        sol = solve_qp(qp)
        assert sol.status is QpStatus.OPTIMAL
        assert sol.z[0] == pytest.approx(2.0, abs=1e-9)
        assert sol.bound_duals[0] == pytest.approx(2.0, abs=1e-7)

    def test_unconstrained_stationarity(self, rng):
        d = 6
        m_mat = rng.normal(size=(d, d))
        h = m_mat @ m_mat.T + 0.5 * np.eye(d)
        g = rng.normal(size=d)
        sol = solve_qp(make_qp(h, g))
        assert sol.status is QpStatus.OPTIMAL
        np.testing.assert_allclose(sol.z, np.linalg.solve(h, -g), atol=1e-8)

    def test_fifty_random_qps_match_enumeration_oracle(self):
        rng = np.random.default_rng(2718)
        for trial in range(50):
            qp = random_box_qp(rng)
            oracle = enumerate_box_qp(qp.h, qp.g, qp.lb, qp.ub)
            assert oracle is not None, f"trial {trial}: oracle found no candidate"
            sol = solve_qp(qp)
            assert sol.status is QpStatus.OPTIMAL, f"trial {trial}: {sol.status}"
            np.testing.assert_allclose(sol.z, oracle[0], atol=1e-6)
            assert sol.residuals.max() <= 1e-8, f"trial {trial}: {sol.residuals}"

    def test_equality_constrained(self):
        # min ||z||^2 s.t. z1 + z2 = 2 -> (1, 1)
        qp = make_qp(np.eye(2) * 2, np.zeros(2), a_eq=[[1.0, 1.0]], b_eq=[2.0])
        sol = solve_qp(qp)
        np.testing.assert_allclose(sol.z, [1.0, 1.0], atol=1e-9)

    def test_equality_with_bounds(self):
        # min ||z||^2 s.t. z1 + z2 = 2, z1 <= 0.5
        qp = make_qp(
            np.eye(2) * 2,
            np.zeros(2),
            a_eq=[[1.0, 1.0]],
            b_eq=[2.0],
            ub=[0.5, np.inf],
        )
        sol = solve_qp(qp)
        assert sol.status is QpStatus.OPTIMAL
        np.testing.assert_allclose(sol.z, [0.5, 1.5], atol=1e-8)

    def test_pinned_variable(self):
        qp = make_qp(np.eye(2), [1.0, 1.0], lb=[0.3, -np.inf], ub=[0.3, np.inf])
        sol = solve_qp(qp)
        assert sol.status is QpStatus.OPTIMAL
        np.testing.assert_allclose(sol.z, [0.3, -1.0], atol=1e-8)

    def test_infeasible_conflict(self):
        # equality z = 0 conflicts with lb = 1
        qp = make_qp([[2.0]], [0.0], a_eq=[[1.0]], b_eq=[0.0], lb=[1.0])
        sol = solve_qp(qp, max_iter=200)
        assert sol.status is QpStatus.INFEASIBLE

    def test_construction_rejects_crossed_bounds(self):
        with pytest.raises(ValueError):
            make_qp(np.eye(1), [0.0], lb=[1.0], ub=[0.0])

    def test_iter_limit_returns_best_iterate(self):
        qp = make_qp(np.eye(3), np.ones(3), lb=-np.ones(3), ub=np.ones(3))
        sol = solve_qp(qp, max_iter=0)
        assert sol.status in (QpStatus.ITER_LIMIT, QpStatus.OPTIMAL)
        assert np.all(np.isfinite(sol.z))
        assert np.isfinite(sol.residuals.max())

    def test_sparse_matches_dense(self, rng):
        qp = random_box_qp(rng, d=6)
        qp_sparse = make_qp(sp.csc_matrix(qp.h), qp.g, lb=qp.lb, ub=qp.ub)
        dense = solve_qp(qp)
        sparse = solve_qp(qp_sparse)
        np.testing.assert_allclose(dense.z, sparse.z, atol=1e-7)

    def test_row_ranges_via_slack_augmentation(self):
        # min ||z||^2 s.t. 1 <= z1 + z2 <= 3 -> z = (0.5, 0.5)
        qp = with_row_ranges(np.eye(2) * 2, np.zeros(2), rows=[[1.0, 1.0]], row_lb=[1.0], row_ub=[3.0])
        assert qp.dim == 3
        sol = solve_qp(qp)
        assert sol.status is QpStatus.OPTIMAL
        np.testing.assert_allclose(sol.z[:2], [0.5, 0.5], atol=1e-8)


class TestKktResiduals:
    def test_analytic_optimum_near_zero(self):
        qp = make_qp([[2.0]], [-2.0], lb=[2.0])
        res = kkt_residuals(qp, np.array([2.0]), np.zeros(0), np.array([2.0]))
        assert res.max() < 1e-12

    def test_stationarity_grows_linearly_in_free_perturbation(self):
        h = np.diag([2.0, 4.0])
        qp = make_qp(h, [0.0, 0.0])
        z_star = np.zeros(2)
        r1 = kkt_residuals(qp, z_star + [0.01, 0.0], np.zeros(0), np.zeros(2)).stationarity
        r2 = kkt_residuals(qp, z_star + [0.02, 0.0], np.zeros(0), np.zeros(2)).stationarity
        assert r2 == pytest.approx(2.0 * r1, rel=1e-9)

    def test_oracle_optimum_has_small_residuals(self):
        rng = np.random.default_rng(99)
        for _ in range(10):
            qp = random_box_qp(rng)
            oracle = enumerate_box_qp(qp.h, qp.g, qp.lb, qp.ub)
            z, mu = oracle
            res = kkt_residuals(qp, z, np.zeros(0), mu)
            assert res.max() <= 1e-8


class TestSolverProperties:
    def test_optimal_beats_random_feasible_points(self, rng):
        for _ in range(10):
            qp = random_box_qp(rng, d=5)
            sol = solve_qp(qp)
            lo = np.where(np.isfinite(qp.lb), qp.lb, -5.0)
            hi = np.where(np.isfinite(qp.ub), qp.ub, 5.0)
            for _ in range(20):
                candidate = rng.uniform(lo, hi)
                assert sol.objective <= qp.objective(candidate) + 1e-8

    def test_minimizer_invariant_under_positive_scaling(self, rng):
        qp = random_box_qp(rng, d=5)
        scaled = make_qp(np.asarray(qp.h) * 7.5, qp.g * 7.5, lb=qp.lb, ub=qp.ub)
        z1 = solve_qp(qp).z
        z2 = solve_qp(scaled).z
        np.testing.assert_allclose(z1, z2, atol=1e-7)

    def test_bitwise_determinism(self):
        rng = np.random.default_rng(5)
        qp = random_box_qp(rng, d=7)
        a = solve_qp(qp)
        b = solve_qp(qp)
        assert np.array_equal(a.z, b.z)
        assert a.iterations == b.iterations
        assert a.objective == b.objective
