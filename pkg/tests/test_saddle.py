"""PDHG solver: step rule, fixed points, residual-bound guarantees."""

import numpy as np
import pytest

from pdbilevel.bundles import quadratic_bundle
from pdbilevel.errors import SpecError, ToleranceNotReached
from pdbilevel.linops import MatrixOp, ZeroOp
from pdbilevel.problems import QuadraticProblem, TrainingPair, dense_saddle_solution
from pdbilevel.saddle import (
    SaddleSpec,
    dual_residual_bound,
    pdhg_init,
    pdhg_iterate,
    primal_residual_bound,
    solve_saddle,
)


def scalar_spec(k=1.0, u=2.0, mu_g=1.0, mu_f=1.0):
    op = MatrixOp(np.array([[k]]))
    return SaddleSpec(
        op,
        quadratic_bundle(np.array([u]), mu_g),
        quadratic_bundle(np.zeros(1), mu_f),
    )


def random_quadratic_spec(rng, size=8, n_filters=2, kernel=3):
    prob = QuadraticProblem(mu_g=1.0, mu_fstar=1.0, n_filters=n_filters, kernel_size=kernel)
    pair = TrainingPair(rng.standard_normal((size, size)), rng.standard_normal((size, size)))
    theta = prob.init_theta(seed=int(rng.integers(1 << 30))) + 0.2 * rng.standard_normal(
        (n_filters, kernel, kernel)
    )
    return prob.build(theta, pair), pair


class TestInit:
    def test_step_rule_values(self):
        class FakeOp:
            in_shape = (1,)
            out_shape = (1,)
            norm_est = 2.0

        spec = SaddleSpec(
            FakeOp(), quadratic_bundle(np.zeros(1), 1.0), quadratic_bundle(np.zeros(1), 1.0)
        )
        st = pdhg_init(spec, np.zeros(1), np.zeros(1))
        assert st.nu == pytest.approx(0.99)
        assert st.tau == pytest.approx(0.495)
        assert st.sigma == pytest.approx(0.495)

    def test_zero_operator_convention(self):
        spec = SaddleSpec(
            ZeroOp((3,), (3,)), quadratic_bundle(np.zeros(3), 2.0), quadratic_bundle(np.zeros(3), 1.0)
        )
        st = pdhg_init(spec, np.zeros(3), np.zeros(3))
        assert st.nu == 1.0
        assert st.tau == pytest.approx(1.0 / 4.0)

    def test_asymmetric_moduli(self):
        class FakeOp:
            in_shape = (1,)
            out_shape = (1,)
            norm_est = 1.0

        spec = SaddleSpec(
            FakeOp(), quadratic_bundle(np.zeros(1), 4.0), quadratic_bundle(np.zeros(1), 1.0)
        )
        st = pdhg_init(spec, np.zeros(1), np.zeros(1))
        assert st.nu == pytest.approx(3.96)
        assert st.theta == pytest.approx(1.0 / 4.96)

    def test_nonpositive_mu_rejected(self):
        class Bad:
            mu = 0.0

        with pytest.raises(SpecError):
            SaddleSpec(ZeroOp((1,), (1,)), Bad(), quadratic_bundle(np.zeros(1), 1.0))


class TestIterate:
    def test_fixed_point_at_saddle(self):
        spec = scalar_spec()
        x_hat = np.array([1.0])
        y_hat = np.array([1.0])
        st = pdhg_init(spec, x_hat, y_hat)
        pdhg_iterate(st, spec)
        assert abs(st.x[0] - 1.0) <= 1e-12
        assert abs(st.y[0] - 1.0) <= 1e-12

    def test_scalar_convergence_to_closed_form(self):
        # f(v) = v^2/2, g(x) = (x-2)^2/2, K=1: saddle at (1, 1)
        spec = scalar_spec()
        st = pdhg_init(spec, np.zeros(1), np.zeros(1))
        for _ in range(200):
            pdhg_iterate(st, spec)
        assert abs(st.x[0] - 1.0) <= 1e-12
        assert abs(st.y[0] - 1.0) <= 1e-12

    def test_long_run_drives_bound_down(self):
        rng = np.random.default_rng(0)
        inst, _ = random_quadratic_spec(rng)
        st = pdhg_init(inst.spec, *inst.initial_state())
        for _ in range(1000):
            pdhg_iterate(st, inst.spec)
        assert primal_residual_bound(inst.spec, st.x) < 1e-10


class TestResidualBounds:
    def test_equality_for_isolated_quadratic(self):
        # K = 0 decouples: bound equals the exact distance
        spec = SaddleSpec(
            ZeroOp((4,), (4,)),
            quadratic_bundle(np.array([1.0, 2.0, 3.0, 4.0]), 0.7),
            quadratic_bundle(np.zeros(4), 1.0),
        )
        x = np.array([2.0, 2.0, 0.0, 5.0])
        expect = np.linalg.norm(x - np.array([1.0, 2.0, 3.0, 4.0]))
        assert primal_residual_bound(spec, x) == pytest.approx(expect)

    def test_dual_equality_for_isolated_quadratic(self):
        b = np.array([0.5, -1.0])
        spec = SaddleSpec(
            ZeroOp((2,), (2,)),
            quadratic_bundle(np.zeros(2), 1.0),
            quadratic_bundle(b, 0.3),
        )
        y = np.array([1.0, 1.0])
        assert dual_residual_bound(spec, y) == pytest.approx(np.linalg.norm(y - b))

    def test_zero_at_scalar_saddle(self):
        spec = scalar_spec()
        assert primal_residual_bound(spec, np.array([1.0])) <= 1e-12
        assert dual_residual_bound(spec, np.array([1.0])) <= 1e-12

    def test_bounds_dominate_true_distance(self):
        rng = np.random.default_rng(1)
        for trial in range(5):
            inst, _ = random_quadratic_spec(rng)
            x_hat, y_hat = dense_saddle_solution(inst.spec)
            x = x_hat + 0.1 * rng.standard_normal(x_hat.shape)
            y = y_hat + 0.1 * rng.standard_normal(y_hat.shape)
            assert primal_residual_bound(inst.spec, x) >= np.linalg.norm(x - x_hat) * (1 - 1e-9)
            assert dual_residual_bound(inst.spec, y) >= np.linalg.norm(y - y_hat) * (1 - 1e-9)


class TestSolve:
    def test_scalar_accuracy(self):
        spec = scalar_spec()
        x, y, iters = solve_saddle(spec, 1e-8, 1e-8)
        assert abs(x[0] - 1.0) <= 1e-8
        assert abs(y[0] - 1.0) <= 1e-8

    def test_warm_start_at_solution_returns_fast(self):
        spec = scalar_spec()
        x, y, iters = solve_saddle(spec, 1e-10, 1e-10, warm=(np.array([1.0]), np.array([1.0])))
        assert iters <= 10

    def test_vacuous_tolerance_immediate(self):
        rng = np.random.default_rng(2)
        inst, _ = random_quadratic_spec(rng)
        x, y, iters = solve_saddle(inst.spec, 1e10, 1e10)
        assert iters <= 10

    def test_guarantee_transport(self):
        # accepted outputs obey the promised distances (dense reference)
        rng = np.random.default_rng(3)
        for size in (8, 16):
            inst, _ = random_quadratic_spec(rng, size=size)
            x_hat, y_hat = dense_saddle_solution(inst.spec)
            for eps in (1e-2, 1e-5):
                x, y, _ = solve_saddle(inst.spec, eps, eps, warm=inst.initial_state())
                assert np.linalg.norm(x - x_hat) <= eps
                assert np.linalg.norm(y - y_hat) <= eps

    def test_monotone_tolerance_cost(self):
        rng = np.random.default_rng(4)
        inst, _ = random_quadratic_spec(rng)
        _, _, it_loose = solve_saddle(inst.spec, 1e-2, 1e-2, warm=inst.initial_state())
        _, _, it_tight = solve_saddle(inst.spec, 1e-3, 1e-3, warm=inst.initial_state())
        assert it_tight >= it_loose

    def test_geometric_residual_decrease(self):
        rng = np.random.default_rng(5)
        inst, _ = random_quadratic_spec(rng)
        st = pdhg_init(inst.spec, *inst.initial_state())
        bounds = {}
        for k in range(1, 201):
            pdhg_iterate(st, inst.spec)
            if k in (50, 100, 200):
                bounds[k] = primal_residual_bound(inst.spec, st.x)
        assert bounds[100] <= bounds[50]
        assert bounds[200] <= bounds[100]

    def test_budget_exhaustion_reports_best(self):
        spec = scalar_spec()
        with pytest.raises(ToleranceNotReached) as info:
            solve_saddle(spec, 1e-14, 1e-14, max_iter=5)
        assert info.value.best_primal is not None
