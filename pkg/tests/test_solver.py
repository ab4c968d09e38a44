import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import ShiftedSquares
from pdvi import (
    BatchSchedule,
    ConfigurationError,
    ConsensusProblem,
    InnerSolverConfig,
    PreconditionerSpec,
    SolveConfig,
    SolverAborted,
    SolverState,
    aggregate_global,
    default_preconditioner,
    oracle_update,
    run,
    sample_batch,
)
from pdvi.experiments import build_experiment
from pdvi.objectives import QuadraticObjective, generate_quadratic_instance

CLOSED = InnerSolverConfig(method="closed_form")


class TestSampleBatch:
    def test_full_batch(self):
        np.testing.assert_array_equal(sample_batch(BatchSchedule(batch_size=5), 3, 5), np.arange(5))

    def test_inclusion_frequency(self):
        sched = BatchSchedule(batch_size=2, seed=11)
        counts = np.zeros(4)
        for t in range(1, 10_001):
            counts[sample_batch(sched, t, 4)] += 1
        assert np.all(np.abs(counts - 5000) <= 0.02 * 5000)

    def test_fixed_partition_round_robin(self):
        sched = BatchSchedule(mode="fixed_partition", partition_assignment=[0, 1, 0, 1])
        np.testing.assert_array_equal(sample_batch(sched, 1, 4), [0, 2])
        np.testing.assert_array_equal(sample_batch(sched, 2, 4), [1, 3])
        np.testing.assert_array_equal(sample_batch(sched, 3, 4), [0, 2])

    def test_batch_too_large(self):
        with pytest.raises(ConfigurationError):
            sample_batch(BatchSchedule(batch_size=6), 1, 5)

    def test_deterministic_in_seed_and_t(self):
        sched = BatchSchedule(batch_size=3, seed=4)
        np.testing.assert_array_equal(sample_batch(sched, 7, 20), sample_batch(sched, 7, 20))

    @given(st.integers(1, 30), st.data())
    def test_batch_properties(self, n, data):
        m = data.draw(st.integers(1, n))
        t = data.draw(st.integers(1, 1000))
        S = sample_batch(BatchSchedule(batch_size=m, seed=data.draw(st.integers(0, 99))), t, n)
        assert S.size == m and np.unique(S).size == m
        assert S.min() >= 0 and S.max() < n


class TestOracleUpdate:
    def test_one_dimensional_hand_case(self):
        obj = ShiftedSquares([2.0], scale=0.5)
        phi, lam, mu, _ = oracle_update(obj, np.array([0]), np.zeros(1), np.zeros((1, 1)),
                                        PreconditionerSpec((1.0,)), CLOSED,
                                        (np.zeros((1, 0)), np.zeros((1, 1))))
        assert lam[0, 0] == pytest.approx(1.0)
        assert mu[0, 0] == pytest.approx(1.0)
        assert -obj.grad_lambda(0, np.zeros(0), lam[0])[0] == pytest.approx(mu[0, 0])

    def test_fixed_point(self):
        obj = ShiftedSquares([[1.0, -2.0]], scale=0.5)
        lam0 = np.array([0.3, 0.4])
        mu_prev = -obj.grad_lambda(0, np.zeros(0), lam0)[None]
        _, lam, mu, _ = oracle_update(obj, np.array([0]), lam0, mu_prev,
                                      PreconditionerSpec((0.7,)), CLOSED,
                                      (np.zeros((1, 0)), lam0[None]))
        np.testing.assert_allclose(lam[0], lam0, atol=1e-14)
        np.testing.assert_allclose(mu, mu_prev, atol=1e-14)

    def test_two_block_dual_increment(self):
        obj = ShiftedSquares([[1.0, 3.0]], block_dims=(1, 1))
        lam0 = np.zeros(2)
        _, lam, mu, _ = oracle_update(obj, np.array([0]), lam0, np.zeros((1, 2)),
                                      PreconditionerSpec((1.0, 0.5)), CLOSED,
                                      (np.zeros((1, 0)), lam0[None]))
        assert mu[0, 1] == pytest.approx(2.0 * (lam[0, 1] - lam0[1]))
        assert mu[0, 0] == pytest.approx(1.0 * (lam[0, 0] - lam0[0]))


class TestAggregate:
    def test_hand_arithmetic(self):
        prob = ConsensusProblem(ShiftedSquares([0.0, 0.0]))
        state = SolverState.initial(prob, [0.0])
        state.lam = np.array([[1.0], [3.0]])
        h, lam0 = aggregate_global(state, [0, 1], np.zeros(1), 2)
        assert h[0] == pytest.approx(2.0) and lam0[0] == pytest.approx(4.0)

    def test_stationary(self):
        prob = ConsensusProblem(ShiftedSquares([0.0, 5.0, 1.0]))
        state = SolverState.initial(prob, [0.7])
        h, lam0 = aggregate_global(state, [0, 2], state.lambda0, 3)
        assert h[0] == 0.0 and lam0[0] == pytest.approx(0.7)

    def test_empty_batch(self):
        prob = ConsensusProblem(ShiftedSquares([0.0]))
        state = SolverState.initial(prob, [0.0])
        with pytest.raises(ConfigurationError):
            aggregate_global(state, [], state.lambda0, 1)


class TestDefaultPreconditioner:
    def test_uniform(self):
        spec, budget = default_preconditioner([1.0, 1.0], 0.1)
        np.testing.assert_allclose(spec.etas, (0.1, 0.1))
        assert budget == pytest.approx(0.02)

    def test_scaled(self):
        spec, _ = default_preconditioner([1.0, 100.0], 0.1)
        np.testing.assert_allclose(spec.etas, (0.1, 0.001))

    def test_single_block(self):
        spec, _ = default_preconditioner([2.0], 1.0)
        assert spec.etas == (0.5,)

    @pytest.mark.parametrize("L", [[0.0], [-1.0, 2.0], [np.nan]])
    def test_rejects_non_positive(self, L):
        with pytest.raises(ConfigurationError):
            default_preconditioner(L)


def quad_problem(n=30, seed=0, block_dims=None):
    inst = generate_quadratic_instance(n, 2, 4, cond=20.0, seed=seed)
    return ConsensusProblem(QuadraticObjective(inst, block_dims=block_dims))


class TestRun:
    def test_quadratic_reaches_zero(self):
        prob = quad_problem()
        L = prob.oracle.lipschitz_estimates()
        cfg = SolveConfig(PreconditionerSpec.uniform(1.0 / L.max(), 1),
                          BatchSchedule(batch_size=5, seed=1), max_iters=3000, inner=CLOSED,
                          stop_objective=1e-10)
        state, trace = run(prob, cfg, np.ones(4))
        assert trace[-1].objective <= 1e-10

    def test_zero_budget(self):
        prob = quad_problem()
        cfg = SolveConfig(PreconditionerSpec((0.1,)), BatchSchedule(batch_size=5), max_iters=0)
        state, trace = run(prob, cfg, np.ones(4))
        assert trace == [] and state.t == 0
        np.testing.assert_array_equal(state.lambda0, np.ones(4))

    def test_mean_of_two_shifts(self):
        prob = ConsensusProblem(ShiftedSquares([0.0, 2.0]))
        cfg = SolveConfig(PreconditionerSpec((0.2,)), BatchSchedule(batch_size=2), max_iters=200,
                          inner=CLOSED)
        state, _ = run(prob, cfg, [5.0])
        assert state.lambda0[0] == pytest.approx(1.0, abs=1e-10)

    def test_consensus_after_convergence(self):
        prob = ConsensusProblem(ShiftedSquares([-1.0, 0.5, 4.0]))
        cfg = SolveConfig(PreconditionerSpec((0.3,)), BatchSchedule(batch_size=3), max_iters=300,
                          inner=CLOSED)
        _, trace = run(prob, cfg, [0.0])
        assert trace[-1].consensus_residual <= 1e-8

    def test_invariants_checked_every_iteration(self):
        prob = quad_problem(block_dims=(2, 2))
        cfg = SolveConfig(PreconditionerSpec((0.01, 0.02)), BatchSchedule(batch_size=7, seed=3),
                          max_iters=50, inner=CLOSED, check_invariants=True)
        run(prob, cfg, np.ones(4))

    def test_untouched_samples_bit_identical(self):
        prob = quad_problem()
        snapshots = []

        def cb(t, S, state, report):
            snapshots.append((S.copy(), state.phi.copy(), state.lam.copy(), state.mu.copy()))

        cfg = SolveConfig(PreconditionerSpec((0.01,)), BatchSchedule(batch_size=4, seed=9),
                          max_iters=20, inner=InnerSolverConfig())
        run(prob, cfg, np.ones(4), callback=cb)
        for (_, p0, l0, m0), (S, p1, l1, m1) in zip(snapshots, snapshots[1:]):
            rest = np.setdiff1d(np.arange(prob.n), S)
            for a, b in ((p0, p1), (l0, l1), (m0, m1)):
                np.testing.assert_array_equal(a[rest], b[rest])

    def test_dual_identity_and_local_stationarity(self):
        prob = quad_problem()
        inner = InnerSolverConfig(method="block_coordinate_descent", inner_tol=1e-8)
        worst = []

        def cb(t, S, state, report):
            g_phi, g_lam = prob.oracle.grad(S, state.phi[S], state.lam[S])
            worst.append(max(np.linalg.norm(state.mu[S] + g_lam, axis=1).max(),
                             np.linalg.norm(g_phi, axis=1).max()))

        cfg = SolveConfig(PreconditionerSpec((0.01,)), BatchSchedule(batch_size=5, seed=2),
                          max_iters=40, inner=inner)
        run(prob, cfg, np.ones(4), callback=cb)
        assert max(worst) <= 10 * inner.inner_tol

    def test_aggregation_identity(self):
        prob = quad_problem()
        gaps = []

        def cb(t, S, state, report):
            gaps.append(np.abs(state.lambda0 - state.h - state.lam[S].mean(axis=0)).max())

        cfg = SolveConfig(PreconditionerSpec((0.01,)), BatchSchedule(batch_size=6, seed=2),
                          max_iters=30, inner=CLOSED)
        run(prob, cfg, np.ones(4), callback=cb)
        assert max(gaps) <= 1e-12

    def test_drift_identity(self):
        prob = quad_problem()
        eta = 0.01
        rel = []

        def cb(t, S, state, report):
            ref = eta / prob.n * state.mu.sum(axis=0)
            rel.append(np.linalg.norm(state.h - ref) / max(np.linalg.norm(ref), 1e-300))

        cfg = SolveConfig(PreconditionerSpec((eta,)), BatchSchedule(batch_size=6, seed=5),
                          max_iters=60, inner=CLOSED)
        run(prob, cfg, np.ones(4), callback=cb)
        assert max(rel) <= 1e-10

    def test_determinism(self):
        prob = quad_problem()
        cfg = SolveConfig(PreconditionerSpec((0.01,)), BatchSchedule(batch_size=6, seed=5),
                          max_iters=25, inner=InnerSolverConfig())
        a = run(prob, cfg, np.ones(4))
        b = run(prob, cfg, np.ones(4))
        np.testing.assert_array_equal(a[0].lambda0, b[0].lambda0)
        for ra, rb in zip(a[1], b[1]):
            assert (ra.t, ra.objective, ra.grad_norm_global) == (rb.t, rb.objective,
                                                                 rb.grad_norm_global)

    def test_uniform_block_steps_match_single_step(self):
        one = quad_problem(block_dims=(4,))
        two = quad_problem(block_dims=(1, 3))
        sched = BatchSchedule(batch_size=6, seed=8)
        s1, _ = run(one, SolveConfig(PreconditionerSpec((0.02,)), sched, 30, inner=CLOSED),
                    np.ones(4))
        s2, _ = run(two, SolveConfig(PreconditionerSpec((0.02, 0.02)), sched, 30, inner=CLOSED),
                    np.ones(4))
        np.testing.assert_allclose(s1.lambda0, s2.lambda0, rtol=1e-12, atol=1e-14)

    def test_threads_do_not_change_result(self):
        prob = quad_problem()
        sched = BatchSchedule(batch_size=8, seed=1)
        base = dict(max_iters=15, inner=InnerSolverConfig())
        s1, _ = run(prob, SolveConfig(PreconditionerSpec((0.01,)), sched, threads=1, **base),
                    np.ones(4))
        s3, _ = run(prob, SolveConfig(PreconditionerSpec((0.01,)), sched, threads=3, **base),
                    np.ones(4))
        np.testing.assert_array_equal(s1.lambda0, s3.lambda0)

    def test_stop_on_gradient_tolerance(self):
        prob = ConsensusProblem(ShiftedSquares([0.0, 2.0]))
        cfg = SolveConfig(PreconditionerSpec((0.2,)), BatchSchedule(batch_size=2), max_iters=500,
                          inner=CLOSED, stop_grad_tol=1e-6)
        state, trace = run(prob, cfg, [5.0])
        assert state.meta["stopped_early"] and trace[-1].t < 500
        assert trace[-1].grad_norm_global <= 1e-6

    def test_abort_keeps_partial_trace(self):
        class Exploding(ShiftedSquares):
            def al_closed_form(self, idx, mu, lam0, penalty):
                if np.any(lam0 > 3.0):
                    raise FloatingPointError("boom")
                return super().al_closed_form(idx, mu, lam0, penalty)

        prob = ConsensusProblem(Exploding([10.0, 10.0]))
        cfg = SolveConfig(PreconditionerSpec((0.1,)), BatchSchedule(batch_size=2), max_iters=100,
                          inner=CLOSED)
        with pytest.raises(SolverAborted) as err:
            run(prob, cfg, [0.0])
        assert len(err.value.trace) >= 1
        assert err.value.state.t == len(err.value.trace)

    def test_gmm_run_respects_dual_identity(self):
        exp = build_experiment("gmm-desk", seed=3, n=600, batch_size=30)
        cfg = SolveConfig(exp.preconditioner("p2dvi"), exp.schedule, max_iters=20, trace_every=20)
        state, _ = run(exp.problem, cfg, exp.init_lambda0)
        assert state.meta["max_dual_residual"] <= 10 * cfg.inner.inner_tol
        assert state.meta["flagged_local_solves"] == 0


def test_solve_config_validation():
    with pytest.raises(ConfigurationError):
        SolveConfig(PreconditionerSpec((0.1,)), BatchSchedule(), max_iters=-1)
    with pytest.raises(ConfigurationError):
        SolveConfig(PreconditionerSpec((0.1,)), BatchSchedule(), trace_every=0)
    with pytest.raises(ConfigurationError):
        BatchSchedule(mode="bogus")
