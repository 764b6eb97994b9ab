import itertools

import numpy as np
import pytest

from hnet import ot
from hnet import tensor as t


def identity_retrieval_params(c):
    """Sim convs pass features through; mass convs average channels."""
    eye = ot.Conv1x1Params(np.eye(c), np.zeros(c))
    avg = ot.Conv1x1Params(np.full((1, c), 1.0 / c), np.zeros(1))
    return ot.RetrievalParams(eye, eye, avg, avg)


def random_retrieval_params(rng, c):
    conv = lambda co: ot.Conv1x1Params(rng.standard_normal((co, c)) * 0.7,
                                       rng.standard_normal(co) * 0.3)
    return ot.RetrievalParams(conv(c), conv(c), conv(1), conv(1))


class TestBuildCost:
    def test_identical_unit_columns_give_unit_diagonal(self):
        x = np.zeros((1, 3, 3))
        for j in range(3):
            x[0, j, j] = 1.0  # orthonormal columns
        cost = ot.build_cost(x, x, identity_retrieval_params(3))
        np.testing.assert_allclose(np.diagonal(cost[0]), np.ones(3), atol=1e-12)

    def test_orthogonal_and_antiparallel(self):
        x1 = np.zeros((1, 2, 1))
        x1[0, 0, 0] = 1.0
        ortho = np.zeros((1, 2, 1))
        ortho[0, 1, 0] = 1.0
        anti = -x1
        p = identity_retrieval_params(2)
        assert ot.build_cost(x1, ortho, p)[0, 0, 0] == pytest.approx(np.e, abs=1e-12)
        assert ot.build_cost(x1, anti, p)[0, 0, 0] == pytest.approx(np.e**2, abs=1e-11)

    def test_range_bounds(self):
        rng = t.make_rng(0)
        x1 = rng.standard_normal((2, 4, 5))
        x2 = rng.standard_normal((2, 4, 5))
        cost = ot.build_cost(x1, x2, random_retrieval_params(rng, 4))
        assert np.all(cost >= 1.0 - 1e-12) and np.all(cost <= np.e**2 + 1e-12)


class TestComputeMass:
    def test_constant_positive_gives_uniform(self):
        x = np.full((2, 3, 5), 0.4)
        p = identity_retrieval_params(3)
        m = ot.compute_mass(x, p.conv_mass_1)
        np.testing.assert_allclose(m.values, np.full((2, 5), 0.2), atol=1e-15)

    def test_single_positive_entry_takes_all_mass(self):
        conv = ot.Conv1x1Params(np.ones((1, 1)), np.zeros(1))
        x = np.array([[[2.0, 0.0, 0.0, 0.0]]])  # [1,1,4]
        m = ot.compute_mass(x, conv)
        np.testing.assert_array_equal(m.values, [[1.0, 0.0, 0.0, 0.0]])

    def test_all_negative_falls_back_to_uniform(self):
        conv = ot.Conv1x1Params(np.ones((1, 1)), np.zeros(1))
        x = -np.ones((1, 1, 4))
        m = ot.compute_mass(x, conv)
        np.testing.assert_allclose(m.values, np.full((1, 4), 0.25), atol=1e-15)

    def test_rows_sum_to_one_tightly(self):
        rng = t.make_rng(1)
        x = rng.standard_normal((3, 4, 6))
        p = random_retrieval_params(rng, 4)
        m = ot.compute_mass(x, p.conv_mass_1)
        np.testing.assert_allclose(m.values.sum(1), np.ones(3), rtol=0, atol=1e-12)


class TestSinkhorn:
    def test_uniform_problem_gives_quarter_plan(self):
        cost = np.full((1, 2, 2), 3.0)
        u = ot.uniform_marginals(1, 2)
        mm = ot.sinkhorn_solve(cost, u, u, ot.SinkhornConfig())
        np.testing.assert_allclose(mm.values[0], np.full((2, 2), 0.25), atol=1e-9)
        assert mm.all_converged

    def test_diagonal_cost_small_epsilon(self):
        sim = np.eye(3)[None]
        cost = np.exp(1.0 - sim)
        u = ot.uniform_marginals(1, 3)
        cfg = ot.SinkhornConfig(epsilon=0.01, max_iters=5000, tol=1e-10)
        mm = ot.sinkhorn_solve(cost, u, u, cfg)
        np.testing.assert_allclose(mm.values[0], np.eye(3) / 3, atol=1e-3)

    def test_marginals_met_at_tolerance(self):
        rng = t.make_rng(2)
        for seed in range(5):
            rng = t.make_rng(10 + seed)
            cost = np.exp(rng.random((3, 5, 5)) * 2)
            mu = ot.Marginals(t.normalize(rng.random((3, 5)) + 0.05, 1, "l1"))
            nu = ot.Marginals(t.normalize(rng.random((3, 5)) + 0.05, 1, "l1"))
            mm = ot.sinkhorn_solve(cost, mu, nu, ot.SinkhornConfig(max_iters=5000))
            assert mm.all_converged
            row, col = mm.marginal_residuals()
            assert row <= 1e-6
            assert col <= 1e-12  # column scaling runs last, so it is exact

    def test_rejects_unnormalized_marginals(self):
        with pytest.raises(ValueError, match="sum to 1"):
            ot.Marginals(np.full((1, 3), 0.5))

    def test_rejects_nonpositive_cost(self):
        u = ot.uniform_marginals(1, 2)
        with pytest.raises(ValueError, match="positive"):
            ot.sinkhorn_solve(np.zeros((1, 2, 2)), u, u, ot.SinkhornConfig())

    def test_monotone_residual(self):
        for seed in range(5):
            rng = t.make_rng(30 + seed)
            cost = 1.0 + rng.random((1, 4, 4)) * 6.0
            u = ot.uniform_marginals(1, 4)
            res = []
            for iters in (4, 8):
                cfg = ot.SinkhornConfig(epsilon=0.05, max_iters=iters, tol=0.0)
                res.append(ot.sinkhorn_solve(cost, u, u, cfg).residual[0])
            assert res[1] <= res[0] + 1e-15


class TestExactOracle:
    def test_diagonal_favoring(self):
        cost = 1.0 - np.eye(3)
        plan, obj = ot.exact_transport_oracle(cost)
        np.testing.assert_allclose(plan, np.eye(3) / 3)
        assert obj == 0.0

    def test_antidiagonal(self):
        plan, obj = ot.exact_transport_oracle(np.eye(2))
        np.testing.assert_allclose(plan, np.array([[0.0, 0.5], [0.5, 0.0]]))
        assert obj == 0.0

    def test_beats_every_permutation(self):
        rng = t.make_rng(3)
        cost = rng.random((4, 4))
        _, obj = ot.exact_transport_oracle(cost)
        for perm in itertools.permutations(range(4)):
            other = sum(cost[j, perm[j]] for j in range(4)) / 4
            assert obj <= other + 1e-15

    def test_size_limit(self):
        with pytest.raises(ValueError, match="w <= 6"):
            ot.exact_transport_oracle(np.ones((7, 7)))


class TestRetrieve:
    def test_row_perturbation_is_local(self):
        rng = t.make_rng(4)
        x1 = rng.standard_normal((4, 3, 5))
        x2 = rng.standard_normal((4, 3, 5))
        params = random_retrieval_params(rng, 3)
        cfg = ot.SinkhornConfig()
        base = ot.ot_retrieve(x1, x2, params, cfg)
        x2p = x2.copy()
        x2p[2] += rng.standard_normal((3, 5))
        pert = ot.ot_retrieve(x1, x2p, params, cfg)
        for i in (0, 1, 3):
            assert np.array_equal(base.values[i], pert.values[i])
        assert not np.allclose(base.values[2], pert.values[2])

    def test_near_identity_for_distinct_columns(self):
        # X1 = X2 with orthogonal columns, uniform mass, epsilon -> 0.
        c = 4
        x = np.zeros((1, c, c))
        for j in range(c):
            x[0, j, j] = 1.0
        eye = ot.Conv1x1Params(np.eye(c), np.zeros(c))
        const = ot.Conv1x1Params(np.zeros((1, c)), np.ones(1))  # uniform mass
        params = ot.RetrievalParams(eye, eye, const, const)
        cfg = ot.SinkhornConfig(epsilon=0.01, max_iters=5000, tol=1e-10)
        mm = ot.ot_retrieve(x, x, params, cfg)
        np.testing.assert_allclose(mm.values[0], np.eye(c) / c, atol=1e-3)
        oracle_plan, oracle_obj = ot.exact_transport_oracle(
            ot.build_cost(x, x, params)[0])
        np.testing.assert_allclose(oracle_plan, np.eye(c) / c)
        got = ot.transport_objective(mm.values[0], ot.build_cost(x, x, params)[0])
        assert abs(got - oracle_obj) <= 0.01 * oracle_obj

    def test_marginals_match_compute_mass(self):
        rng = t.make_rng(5)
        x1 = rng.standard_normal((3, 4, 6))
        x2 = rng.standard_normal((3, 4, 6))
        params = random_retrieval_params(rng, 4)
        cfg = ot.SinkhornConfig(max_iters=5000)
        mm = ot.ot_retrieve(x1, x2, params, cfg)
        m1 = ot.compute_mass(x1, params.conv_mass_1)
        m2 = ot.compute_mass(x2, params.conv_mass_2)
        assert np.abs(mm.values.sum(2) - m1.values).max() <= 1e-6
        assert np.abs(mm.values.sum(1) - m2.values).max() <= 1e-6

    def test_permutation_equivariance(self):
        rng = t.make_rng(6)
        x1 = rng.standard_normal((2, 3, 5))
        x2 = rng.standard_normal((2, 3, 5))
        params = random_retrieval_params(rng, 3)
        cfg = ot.SinkhornConfig(max_iters=2000)
        perm = np.array([3, 0, 4, 1, 2])
        base = ot.ot_retrieve(x1, x2, params, cfg).values
        permuted = ot.ot_retrieve(x1, x2[:, :, perm], params, cfg).values
        np.testing.assert_allclose(permuted, base[:, :, perm], rtol=1e-9, atol=1e-12)


def test_entropic_objective_within_one_percent_of_oracle():
    cfg = ot.SinkhornConfig(epsilon=0.01, max_iters=2000, tol=1e-8)
    for w in (4, 5):
        for seed in range(20):
            rng = t.make_rng(1000 + seed)
            cost = 1.0 + rng.random((w, w)) * (np.e**2 - 1.0)
            u = ot.uniform_marginals(1, w)
            mm = ot.sinkhorn_solve(cost[None], u, u, cfg)
            got = ot.transport_objective(mm.values[0], cost)
            _, best = ot.exact_transport_oracle(cost)
            # the plan is feasible only up to the row residual, which bounds
            # how far under the LP optimum the objective can sit
            slack = mm.residual[0] * w * cost.max()
            assert got >= best - slack - 1e-12
            assert abs(got - best) <= 0.01 * best


# --- unrolled gradient -------------------------------------------------------

def _ot_gradcheck_inputs(seed, h=1, c=4, w=4):
    """Random retrieval inputs with mass-conv preactivations away from the
    ReLU kink so central differences stay on one side."""
    for s in itertools.count(seed):
        rng = t.make_rng(5000 + s)
        x1 = rng.standard_normal((h, c, w))
        x2 = rng.standard_normal((h, c, w))
        arrs = [rng.standard_normal((c, c)) * 0.6, rng.standard_normal(c) * 0.2,
                rng.standard_normal((c, c)) * 0.6, rng.standard_normal(c) * 0.2,
                rng.standard_normal((1, c)) * 0.6, rng.standard_normal(1) * 0.2,
                rng.standard_normal((1, c)) * 0.6, rng.standard_normal(1) * 0.2]
        z1 = np.einsum("oc,hcw->how", arrs[4], x1) + arrs[5][None, :, None]
        z2 = np.einsum("oc,hcw->how", arrs[6], x2) + arrs[7][None, :, None]
        if min(np.abs(z1).min(), np.abs(z2).min()) > 1e-3:
            return [x1, x2] + arrs


def make_ot_diffop(cfg):
    def pack(s1w, s1b, s2w, s2b, m1w, m1b, m2w, m2b):
        return ot.RetrievalParams(ot.Conv1x1Params(s1w, s1b),
                                  ot.Conv1x1Params(s2w, s2b),
                                  ot.Conv1x1Params(m1w, m1b),
                                  ot.Conv1x1Params(m2w, m2b))

    def fwd(x1, x2, *arrs):
        return ot.ot_retrieve(x1, x2, pack(*arrs), cfg).values

    def vjp(x1, x2, *arrs_and_gy):
        arrs, gy = arrs_and_gy[:-1], arrs_and_gy[-1]
        _, f = ot.ot_retrieve_d(x1, x2, pack(*arrs), cfg)
        gx1, gx2, gr = f(gy)
        return (gx1, gx2,
                gr["conv_sim_1.w"], gr["conv_sim_1.b"],
                gr["conv_sim_2.w"], gr["conv_sim_2.b"],
                gr["conv_mass_1.w"], gr["conv_mass_1.b"],
                gr["conv_mass_2.w"], gr["conv_mass_2.b"])

    return t.DiffOp("ot_retrieve", fwd, vjp)


def test_sinkhorn_unrolled_gradcheck():
    cfg = ot.SinkhornConfig(epsilon=0.05, max_iters=50, tol=0.0)
    op = make_ot_diffop(cfg)
    for seed in range(3):
        inputs = _ot_gradcheck_inputs(seed * 37)
        err = t.gradcheck(op, inputs, step=1e-5, rng=t.make_rng(seed))
        assert err < 1e-4, f"seed {seed}: err={err}"


def test_sinkhorn_gradient_with_early_stop_rows():
    # Rows that freeze early must still get correct (frozen-iteration) grads.
    # tol is tiny so an off-by-one stop under FD perturbation is negligible.
    cfg = ot.SinkhornConfig(epsilon=0.3, max_iters=200, tol=1e-11)
    rng = t.make_rng(11)
    cost = 1.0 + rng.random((2, 3, 3))
    u = ot.uniform_marginals(2, 3)

    def fwd(c):
        return ot.sinkhorn_solve(c, u, u, cfg).values

    def vjp(c, gy):
        _, f = ot._sinkhorn_solve_d(c, u, u, cfg)
        return (f(gy)[0],)

    err = t.gradcheck(t.DiffOp("sinkhorn_fixed", fwd, vjp), [cost],
                      rng=t.make_rng(0))
    assert err < 1e-4
