import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import central_fd, rel_err
from pdvi.core import ConsensusProblem, DimensionError, full_objective
from pdvi.data import build_knn_graph, partition_patches, synth_spatial
from pdvi.metrics import adjusted_rand_index
from pdvi.objectives import (
    GmmHyperParams,
    MeanFieldGmmObjective,
    QuadraticInstance,
    QuadraticObjective,
    SpatialGraph,
    edge_weight,
    edge_weights,
    generate_quadratic_instance,
    gmm_hyper_from_data,
    gmm_negelbo_eval_grad,
    negative_elbo,
    pack_global,
    potts_penalty_eval_grad,
    quadratic_eval_grad,
)
from pdvi.objectives.gmm import phi_hessian_diag, solve_exp_linear
from pdvi.objectives.potts import greedy_coloring


# -- quadratic -----------------------------------------------------------------------------

class TestQuadratic:
    def test_zero_point(self):
        v = np.array([1.0, -2.0])
        val, g = quadratic_eval_grad(np.eye(2), v, np.zeros(2))
        assert val == 0.0
        np.testing.assert_array_equal(g, v)

    def test_hand_value(self):
        val, g = quadratic_eval_grad(np.eye(2), np.zeros(2), np.array([1.0, 2.0]))
        assert val == 5.0
        np.testing.assert_array_equal(g, [2.0, 4.0])

    def test_gradient_fd(self):
        inst = generate_quadratic_instance(1, 2, 3, cond=50.0, seed=0, v=np.arange(5.0))
        rng = np.random.default_rng(1)
        for _ in range(10):
            z = rng.standard_normal(5)
            _, g = quadratic_eval_grad(inst.Q[0], inst.v[0], z)
            fd = central_fd(lambda u: quadratic_eval_grad(inst.Q[0], inst.v[0], u)[0], z)
            assert rel_err(g, fd) <= 1e-8

    def test_dimension_error(self):
        with pytest.raises(DimensionError):
            quadratic_eval_grad(np.eye(2), np.zeros(2), np.zeros(3))

    def test_condition_number_contract(self):
        inst = generate_quadratic_instance(20, 5, 5, cond=1000.0, seed=3)
        eig = np.linalg.eigvalsh(inst.Q)
        ratio = eig[:, -1] / eig[:, 0]
        assert np.all((ratio >= 990) & (ratio <= 1010))
        np.testing.assert_allclose(inst.Q, np.transpose(inst.Q, (0, 2, 1)))
        assert not inst.v.any()

    def test_unit_condition_is_identity(self):
        inst = generate_quadratic_instance(3, 2, 2, cond=1.0, seed=0)
        np.testing.assert_allclose(inst.Q, np.broadcast_to(np.eye(4), inst.Q.shape), atol=1e-12)

    def test_generator_deterministic(self):
        a = generate_quadratic_instance(4, 2, 3, seed=9)
        b = generate_quadratic_instance(4, 2, 3, seed=9)
        np.testing.assert_array_equal(a.Q, b.Q)

    def test_rejects_cond_below_one(self):
        with pytest.raises(ValueError):
            generate_quadratic_instance(2, 1, 1, cond=0.5)

    def test_lipschitz_diag(self):
        inst = QuadraticInstance(np.diag([1.0, 1000.0])[None], np.zeros((1, 2)), 0, 2)
        L = QuadraticObjective(inst, block_dims=(1, 1)).lipschitz_estimates()
        np.testing.assert_allclose(L, [2.0, 2000.0], rtol=1e-10)

    def test_lipschitz_identity_equal_blocks(self):
        inst = QuadraticInstance(np.eye(4)[None], np.zeros((1, 4)), 1, 3)
        L = QuadraticObjective(inst, block_dims=(1, 1, 1)).lipschitz_estimates()
        np.testing.assert_allclose(L, L[0])

    def test_strong_convexity(self):
        inst = generate_quadratic_instance(10, 2, 3, cond=100.0, seed=5)
        obj = QuadraticObjective(inst)
        rng = np.random.default_rng(0)
        for i in range(10):
            H = obj.hessian(i)
            lmax = np.linalg.eigvalsh(inst.Q[i])[-1]
            for _ in range(5):
                u = rng.standard_normal(5)
                assert u @ H @ u >= 2 * lmax / 100.0 * (u @ u) * (1 - 1e-10)

    def test_decomposition_identity(self):
        inst = generate_quadratic_instance(15, 3, 2, cond=40.0, seed=8, v=np.ones(5))
        obj = QuadraticObjective(inst)
        rng = np.random.default_rng(2)
        phi, lam = rng.standard_normal((15, 3)), rng.standard_normal(2)
        direct = obj.full_value(phi, lam)
        assert full_objective(ConsensusProblem(obj), phi, lam) == pytest.approx(direct, rel=1e-8)


# -- GMM -----------------------------------------------------------------------------------

def small_gmm(N=40, K=3, d=2, seed=0, **kw):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((N, d)) * 2
    hyper = GmmHyperParams(rng.standard_normal(d), rng.uniform(0.5, 2, d), rng.uniform(1, 4, d), K)
    return X, hyper, MeanFieldGmmObjective(X, hyper, **kw)


class TestGmmPerPoint:
    def test_hand_value(self):
        hyper = GmmHyperParams(np.zeros(1), 1.0, 1.0, 1)
        val, ga, gm, gr = gmm_negelbo_eval_grad([0.0], [0.0], np.zeros((1, 1)), np.zeros((1, 1)),
                                                hyper, 1)
        assert val == pytest.approx(1.418939, abs=1e-6)

    def test_single_cluster_alpha_gradient_vanishes(self):
        hyper = GmmHyperParams(np.zeros(3), 1.0, 2.0, 1)
        rng = np.random.default_rng(0)
        _, ga, _, _ = gmm_negelbo_eval_grad(rng.standard_normal(3), [1.7], rng.standard_normal((1, 3)),
                                            rng.standard_normal((1, 3)), hyper, 10)
        np.testing.assert_array_equal(ga, [0.0])

    def test_shape_mismatch(self):
        hyper = GmmHyperParams(np.zeros(2), 1.0, 1.0, 3)
        with pytest.raises(DimensionError):
            gmm_negelbo_eval_grad(np.zeros(2), np.zeros(2), np.zeros((3, 2)), np.zeros((3, 2)), hyper, 1)

    def test_gradients_fd(self):
        rng = np.random.default_rng(4)
        K, d, n = 3, 2, 7
        hyper = GmmHyperParams(rng.standard_normal(d), rng.uniform(0.5, 2, d), rng.uniform(1, 3, d), K)
        for _ in range(20):
            x, a = rng.standard_normal(d), rng.standard_normal(K)
            m, r = rng.standard_normal((K, d)), 0.5 * rng.standard_normal((K, d))
            _, ga, gm, gr = gmm_negelbo_eval_grad(x, a, m, r, hyper, n)
            f = lambda a_, m_, r_: gmm_negelbo_eval_grad(x, a_, m_, r_, hyper, n)[0]
            assert rel_err(ga, central_fd(lambda u: f(u, m, r), a)) <= 1e-5
            assert rel_err(gm, central_fd(lambda u: f(a, u, r), m)) <= 1e-5
            assert rel_err(gr, central_fd(lambda u: f(a, m, u), r)) <= 1e-5

    def test_oracle_matches_per_point_function(self):
        X, hyper, obj = small_gmm(include_constants=True)
        rng = np.random.default_rng(3)
        alpha = rng.standard_normal((obj.n, obj.d_phi))
        m, r = rng.standard_normal((3, 2)), 0.3 * rng.standard_normal((3, 2))
        lam = pack_global(m, r)
        for i in (0, 5, 39):
            want = gmm_negelbo_eval_grad(X[i], alpha[i], m, r, hyper, obj.N)[0]
            assert obj.eval(i, alpha[i], lam) == pytest.approx(want, rel=1e-12)


class TestGmmOracle:
    @pytest.mark.parametrize("grouped", [False, True])
    def test_gradients_fd(self, grouped):
        kw = {}
        if grouped:
            kw["groups"] = [np.arange(0, 7), np.arange(7, 10), np.arange(10, 20)]
        X, hyper, obj = small_gmm(N=20, **kw)
        rng = np.random.default_rng(5)
        for _ in range(20):
            i = int(rng.integers(obj.n))
            phi = rng.standard_normal(obj.d_phi)
            lam = 0.5 * rng.standard_normal(obj.d_lambda)
            gphi, glam = obj.grad_phi(i, phi, lam), obj.grad_lambda(i, phi, lam)
            assert rel_err(gphi, central_fd(lambda u: obj.eval(i, u, lam), phi)) <= 1e-5
            assert rel_err(glam, central_fd(lambda u: obj.eval(i, phi, u), lam)) <= 1e-5

    def test_decomposition_identity(self):
        X, hyper, obj = small_gmm(include_constants=True)
        rng = np.random.default_rng(6)
        alpha = rng.standard_normal((obj.n, obj.d_phi))
        m, r = rng.standard_normal((3, 2)), 0.3 * rng.standard_normal((3, 2))
        direct = negative_elbo(X, alpha, m, r, hyper) / obj.N
        got = full_objective(ConsensusProblem(obj), alpha, pack_global(m, r))
        assert got == pytest.approx(direct, rel=1e-8)

    def test_decomposition_without_constants(self):
        X, hyper, obj = small_gmm()
        rng = np.random.default_rng(7)
        alpha = rng.standard_normal((obj.n, obj.d_phi))
        m, r = rng.standard_normal((3, 2)), 0.3 * rng.standard_normal((3, 2))
        direct = negative_elbo(X, alpha, m, r, hyper, include_constants=False) / obj.N
        got = full_objective(ConsensusProblem(obj), alpha, pack_global(m, r))
        assert got == pytest.approx(direct, rel=1e-8)

    def test_lipschitz_m_block_bound(self):
        X, hyper, obj = small_gmm()
        L = obj.lipschitz_estimates(np.zeros(obj.d_lambda))
        bound = np.max(1.0 / hyper.sigma0_sq + 1.0 / (obj.N * hyper.sigma1_sq))
        assert L[0] <= bound * (1 + 1e-12)
        # second derivative in m_kj is p_ik / s0_j + 1 / (N s1_j), never above the estimate
        rng = np.random.default_rng(0)
        for _ in range(10):
            i = int(rng.integers(obj.N))
            p = rng.dirichlet(np.ones(3))
            j = int(rng.integers(2))
            assert p.max() / hyper.sigma0_sq[j] + 1 / (obj.N * hyper.sigma1_sq[j]) <= L[0] + 1e-12

    def test_phi_hessian_bounded_below(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = rng.dirichlet(np.ones(int(rng.integers(2, 8))))
            assert np.all(phi_hessian_diag(p) >= 1.0)

    def test_rho_block_minimizer(self):
        rng = np.random.default_rng(1)
        A, c, b = rng.uniform(0.1, 5, 20), rng.uniform(0.1, 5, 20), rng.uniform(-10, 10, 20)
        r = solve_exp_linear(A, c, b)
        np.testing.assert_allclose(A * np.exp(r) + c * r + b, 0.0, atol=1e-9)

    def test_natural_update_full_batch_is_cavi(self):
        X, hyper, obj = small_gmm()
        rng = np.random.default_rng(3)
        lam0 = 0.2 * rng.standard_normal(obj.d_lambda)
        idx = np.arange(obj.n)
        phi = obj.minimize_phi(idx, np.zeros((obj.n, obj.d_phi)), np.tile(lam0, (obj.n, 1)))
        new = obj.natural_update(idx, phi, lam0, 1.0)
        p = obj.point_probabilities(phi)
        prec = p.sum(0)[:, None] / hyper.sigma0_sq + 1 / hyper.sigma1_sq
        mean = (p.T @ X / hyper.sigma0_sq + hyper.xi / hyper.sigma1_sq) / prec
        np.testing.assert_allclose(new, pack_global(mean, -np.log(prec)), rtol=1e-12)
        # CAVI target is a fixed point of the step
        again = obj.natural_update(idx, phi, new, 1.0)
        np.testing.assert_allclose(again, new, rtol=1e-12)

    def test_gmm_hyper_recovers_blobs(self):
        rng = np.random.default_rng(0)
        centers = 20.0 * np.eye(3)
        labels = rng.integers(0, 3, 600)
        X = centers[labels] + rng.standard_normal((600, 3))
        hyper, km = gmm_hyper_from_data(X, 3, seed=0)
        np.testing.assert_allclose(hyper.xi, X.mean(0))
        np.testing.assert_allclose(hyper.sigma0_sq, 1.0, rtol=0.15)
        assert adjusted_rand_index(labels, km) == 1.0
        again = gmm_hyper_from_data(X, 3, seed=0)
        np.testing.assert_array_equal(again[1], km)

    def test_gmm_hyper_single_cluster_floor(self):
        X = np.random.default_rng(0).standard_normal((50, 2))
        hyper, _ = gmm_hyper_from_data(X, 1)
        assert np.all(hyper.sigma1_sq > 0)
        np.testing.assert_allclose(hyper.sigma1_sq, np.maximum(1e-6 * X.var(0), 1e-12))


# -- Potts -----------------------------------------------------------------------------------

class TestPotts:
    def test_isolated_node(self):
        val, gi, gn = potts_penalty_eval_grad(np.zeros(3), np.zeros((0, 3)), [])
        assert val == 0.0 and not gi.any() and gn.shape == (0, 3)

    def test_single_edge_hand_value(self):
        big = np.array([50.0, -50.0])  # softmax is (1, 0) to machine precision
        vi, _, _ = potts_penalty_eval_grad(big, big[None], [2.0])
        vj, _, _ = potts_penalty_eval_grad(big, big[None], [2.0])
        assert vi == pytest.approx(-1.0) and vi + vj == pytest.approx(-2.0)

    def test_missing_neighbour(self):
        with pytest.raises(ValueError):
            potts_penalty_eval_grad(np.zeros(2), np.zeros((2, 2)), [1.0])

    def test_gradients_fd(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a, nb, r = rng.standard_normal(4), rng.standard_normal((3, 4)), rng.uniform(0, 2, 3)
            _, gi, gn = potts_penalty_eval_grad(a, nb, r)
            assert rel_err(gi, central_fd(lambda u: potts_penalty_eval_grad(u, nb, r)[0], a)) <= 1e-5
            assert rel_err(gn, central_fd(lambda u: potts_penalty_eval_grad(a, u, r)[0], nb)) <= 1e-5

    def test_edge_weight_examples(self):
        assert edge_weight([1, 0], [0, 0], [1, 0], [1, 0], [1, 0], 0.5) == pytest.approx(2.0)
        assert edge_weight([0, 1], [0, 0], [1, 0], [1, 0], [0, 1], 0.0) == pytest.approx(0.0)
        assert edge_weight([0, 1], [0, 0], [1, 0], [1, 2], [-1, -2], 1.0) == pytest.approx(0.0, abs=1e-15)

    def test_edge_weight_zero_norm_warns(self):
        with pytest.warns(RuntimeWarning):
            w = edge_weight([0, 0], [0, 0], [1, 0], [1, 0], [1, 0], 0.5)
        assert w == pytest.approx(1.0)
        with pytest.warns(RuntimeWarning):
            assert edge_weight([1, 0], [0, 0], [1, 0], [0, 0], [1, 0], 0.5) == pytest.approx(1.0)

    @given(st.floats(0, 3), st.integers(0, 1000))
    def test_edge_weights_nonnegative(self, tau, seed):
        rng = np.random.default_rng(seed)
        w, _ = edge_weights(rng.standard_normal((10, 2)), rng.standard_normal((10, 2)),
                            rng.standard_normal((10, 2)), rng.standard_normal((10, 4)),
                            rng.standard_normal((10, 4)), tau)
        assert np.all(w >= 0)

    def test_coloring_is_proper(self):
        ds = synth_spatial(8, 2, 3, seed=0)
        g = build_knn_graph(ds.coords, k=4)
        col = greedy_coloring(g)
        live = g.edges[g.weights > 0]  # zero-weight edges carry no interaction
        assert len(live) > 0
        assert np.all(col[live[:, 0]] != col[live[:, 1]])


def spatial_objective(n_side=6, patches=None, seed=0):
    ds = synth_spatial(n_side, 2, 3, seed=seed, separation=3.0)
    graph = build_knn_graph(ds.coords, k=4, X=ds.X)
    hyper = GmmHyperParams(ds.X.mean(0), 1.0, 4.0, 2)
    if patches is None:
        groups = None
    else:
        assign = partition_patches(ds.coords, patches)
        graph = graph.with_patches(assign)
        groups = [np.flatnonzero(assign == g) for g in range(assign.max() + 1)]
    return ds, graph, hyper, MeanFieldGmmObjective(ds.X, hyper, groups=groups, graph=graph,
                                                   include_constants=True)


class TestSpatialObjective:
    def test_gradients_fd(self):
        ds, graph, hyper, obj = spatial_objective(patches=4)
        rng = np.random.default_rng(2)
        for _ in range(20):
            i = int(rng.integers(obj.n))
            phi = rng.standard_normal(obj.d_phi)
            lam = 0.5 * rng.standard_normal(obj.d_lambda)
            assert rel_err(obj.grad_phi(i, phi, lam),
                           central_fd(lambda u: obj.eval(i, u, lam), phi)) <= 1e-5
            assert rel_err(obj.grad_lambda(i, phi, lam),
                           central_fd(lambda u: obj.eval(i, phi, u), lam)) <= 1e-5

    def test_single_patch_matches_full_potts_objective(self):
        ds, graph, hyper, obj = spatial_objective(patches=1)
        rng = np.random.default_rng(3)
        alpha = rng.standard_normal((ds.n, 2))
        m, r = rng.standard_normal((2, 3)), 0.2 * rng.standard_normal((2, 3))
        direct = negative_elbo(ds.X, alpha, m, r, hyper, graph=graph) / ds.n
        got = full_objective(ConsensusProblem(obj), obj.phi_from_point_logits(alpha),
                             pack_global(m, r))
        assert got == pytest.approx(direct, rel=1e-8)

    def test_patch_total_equals_full_without_cross_edges(self):
        ds, graph, hyper, obj = spatial_objective(patches=4)
        inside = graph.within_patches()
        assert not inside.cross_patch_mask().any()
        rng = np.random.default_rng(4)
        alpha = rng.standard_normal((ds.n, 2))
        m, r = rng.standard_normal((2, 3)), 0.2 * rng.standard_normal((2, 3))
        direct = negative_elbo(ds.X, alpha, m, r, hyper, graph=inside) / ds.n
        got = full_objective(ConsensusProblem(obj), obj.phi_from_point_logits(alpha),
                             pack_global(m, r))
        assert got == pytest.approx(direct, rel=1e-12)

    def test_phi_block_is_stationary(self):
        ds, graph, hyper, obj = spatial_objective(patches=3)
        rng = np.random.default_rng(5)
        lam = np.tile(0.3 * rng.standard_normal(obj.d_lambda), (obj.n, 1))
        phi = obj.minimize_phi(np.arange(obj.n), rng.standard_normal((obj.n, obj.d_phi)), lam)
        gphi, _ = obj.grad(np.arange(obj.n), phi, lam)
        assert np.abs(gphi).max() <= 1e-8

    def test_cross_patch_edges_dropped(self):
        ds, graph, hyper, obj = spatial_objective(patches=4)
        assert obj.n_dropped_edges == int(graph.cross_patch_mask().sum())
        assert obj.n_dropped_edges > 0


def test_spatial_graph_normalizes_edges():
    g = SpatialGraph(3, [[2, 0], [1, 2]], [1.0, 2.0])
    np.testing.assert_array_equal(g.edges, [[0, 2], [1, 2]])
    np.testing.assert_array_equal(np.sort(g.neighbors(2)), [0, 1])
    with pytest.raises(ValueError):
        SpatialGraph(2, [[0, 1]], [1.0, 2.0])
