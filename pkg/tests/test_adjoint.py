"""Adjoint problem construction, residual bounds and solver guarantees."""

import numpy as np
import pytest

from pdbilevel.adjoint import (
    adjoint_residual_X,
    adjoint_residual_Y,
    build_adjoint,
    solve_adjoint,
)
from pdbilevel.bundles import SquaredLoss, ZeroLoss, quadratic_bundle
from pdbilevel.errors import SpecError
from pdbilevel.linops import MatrixOp, ZeroOp
from pdbilevel.problems import (
    QuadraticProblem,
    TrainingPair,
    dense_adjoint_solution,
    dense_saddle_solution,
)
from pdbilevel.saddle import SaddleSpec, solve_saddle


def scalar_adjoint(k=1.0, c=1.0):
    spec = SaddleSpec(
        MatrixOp(np.array([[k]])),
        quadratic_bundle(np.zeros(1), 1.0),
        quadratic_bundle(np.zeros(1), 1.0),
    )
    loss1 = SquaredLoss(np.array([-c]))  # grad at 0 equals c
    return build_adjoint(spec, np.zeros(1), np.zeros(1), loss1, ZeroLoss())


def solved_instance(rng, size=8):
    prob = QuadraticProblem(mu_g=1.0, mu_fstar=1.0, n_filters=2, kernel_size=3)
    pair = TrainingPair(rng.standard_normal((size, size)), rng.standard_normal((size, size)))
    theta = prob.init_theta(seed=int(rng.integers(1 << 30))) + 0.2 * rng.standard_normal((2, 3, 3))
    inst = prob.build(theta, pair)
    x, y, _ = solve_saddle(inst.spec, 1e-6, 1e-6, warm=inst.initial_state())
    return inst, x, y


class TestBuild:
    def test_zero_dual_loss_gives_zero_gradient(self):
        rng = np.random.default_rng(0)
        inst, x, y = solved_instance(rng)
        aspec = build_adjoint(inst.spec, x, y, inst.loss1, inst.loss2)
        np.testing.assert_array_equal(aspec.grad_l2, np.zeros_like(y))

    def test_quadratic_hessians_constant(self):
        rng = np.random.default_rng(1)
        inst, x, y = solved_instance(rng)
        aspec = build_adjoint(inst.spec, x, y, inst.loss1, inst.loss2)
        d = rng.standard_normal(x.shape)
        np.testing.assert_allclose(aspec.g.hess_apply(x, d), 1.0 * d)
        e = rng.standard_normal(y.shape)
        np.testing.assert_allclose(aspec.fstar.hess_apply(y, e), 1.0 * e)

    def test_scalar_loss_gradient(self):
        target = np.array([0.5])
        spec = SaddleSpec(
            MatrixOp(np.array([[1.0]])),
            quadratic_bundle(np.zeros(1), 1.0),
            quadratic_bundle(np.zeros(1), 1.0),
        )
        x_tilde = np.array([2.0])
        aspec = build_adjoint(spec, x_tilde, np.zeros(1), SquaredLoss(target), ZeroLoss())
        np.testing.assert_allclose(aspec.grad_l1, x_tilde - target)

    def test_missing_hessian_rejected(self):
        class NoHess:
            mu = 1.0

            def supports_hessian(self):
                return False

        spec = SaddleSpec(ZeroOp((1,), (1,)), quadratic_bundle(np.zeros(1), 1.0), NoHess())
        with pytest.raises(SpecError):
            build_adjoint(spec, np.zeros(1), np.zeros(1), ZeroLoss(), ZeroLoss())


class TestResiduals:
    def test_scalar_formula(self):
        # delta_1(X) = |(1+k^2) X + c|, zero at X = -c/(1+k^2)
        k, c = 1.5, 0.7
        aspec = scalar_adjoint(k, c)
        for X in (-1.0, 0.0, 2.0):
            expect = abs((1 + k * k) * X + c)
            assert adjoint_residual_X(aspec, np.array([X])) == pytest.approx(expect)
        x_star = -c / (1 + k * k)
        assert adjoint_residual_X(aspec, np.array([x_star])) <= 1e-14

    def test_k_zero_dual_formula(self):
        spec = SaddleSpec(
            ZeroOp((3,), (3,)),
            quadratic_bundle(np.zeros(3), 1.0),
            quadratic_bundle(np.zeros(3), 2.0),
        )
        gl2 = np.array([0.3, -0.5, 1.0])

        class Lin(ZeroLoss):
            def grad(self, y):
                return gl2.copy()

        aspec = build_adjoint(spec, np.zeros(3), np.zeros(3), ZeroLoss(), Lin())
        y = np.array([1.0, 2.0, 3.0])
        expect = np.linalg.norm(2.0 * y - gl2) / 2.0
        assert adjoint_residual_Y(aspec, y) == pytest.approx(expect)

    def test_zero_at_dense_solution(self):
        rng = np.random.default_rng(2)
        inst, x, y = solved_instance(rng)
        aspec = build_adjoint(inst.spec, x, y, inst.loss1, inst.loss2)
        x_bar, y_bar = dense_adjoint_solution(aspec)
        assert adjoint_residual_X(aspec, x_bar) <= 1e-10
        assert adjoint_residual_Y(aspec, y_bar) <= 1e-10

    def test_dominates_true_distance(self):
        rng = np.random.default_rng(3)
        inst, x, y = solved_instance(rng)
        aspec = build_adjoint(inst.spec, x, y, inst.loss1, inst.loss2)
        x_bar, y_bar = dense_adjoint_solution(aspec)
        for _ in range(10):
            X = x_bar + 0.2 * rng.standard_normal(x_bar.shape)
            Y = y_bar + 0.2 * rng.standard_normal(y_bar.shape)
            assert adjoint_residual_X(aspec, X) >= np.linalg.norm(X - x_bar) * (1 - 1e-9)
            assert adjoint_residual_Y(aspec, Y) >= np.linalg.norm(Y - y_bar) * (1 - 1e-9)


class TestSolve:
    def test_zero_rhs_accepted_immediately(self):
        rng = np.random.default_rng(4)
        inst, x, y = solved_instance(rng)
        aspec = build_adjoint(inst.spec, x, y, ZeroLoss(), ZeroLoss())
        X, Y, iters = solve_adjoint(aspec, 1e-12, 1e-12)
        assert iters == 0
        np.testing.assert_array_equal(X, np.zeros_like(X))
        np.testing.assert_array_equal(Y, np.zeros_like(Y))

    def test_scalar_closed_form(self):
        k, c = 1.0, 0.8
        aspec = scalar_adjoint(k, c)
        X, Y, _ = solve_adjoint(aspec, 1e-8, 1e-8)
        assert abs(X[0] + c / (1 + k * k)) <= 1e-8

    def test_warm_start_at_solution(self):
        rng = np.random.default_rng(5)
        inst, x, y = solved_instance(rng)
        aspec = build_adjoint(inst.spec, x, y, inst.loss1, inst.loss2)
        x_bar, y_bar = dense_adjoint_solution(aspec)
        X, Y, iters = solve_adjoint(aspec, 1e-8, 1e-8, warm=(x_bar, y_bar))
        assert iters <= 10

    def test_soundness_against_dense(self):
        rng = np.random.default_rng(6)
        for size in (8, 16):
            inst, x, y = solved_instance(rng, size=size)
            aspec = build_adjoint(inst.spec, x, y, inst.loss1, inst.loss2)
            x_bar, y_bar = dense_adjoint_solution(aspec)
            for tol in (1e-2, 1e-5):
                X, Y, _ = solve_adjoint(aspec, tol, tol)
                assert np.linalg.norm(X - x_bar) <= tol
                assert np.linalg.norm(Y - y_bar) <= tol

    def test_saddle_matches_primal_form_minimizer(self):
        # minimizing 1/2 <B1 X, X> + <gl1 + K* Hf^-1 gl2, X> directly
        rng = np.random.default_rng(7)
        inst, x, y = solved_instance(rng)
        aspec = build_adjoint(inst.spec, x, y, inst.loss1, inst.loss2)
        from pdbilevel.linops import op_to_matrix

        kmat = op_to_matrix(inst.spec.k_op)
        n = kmat.shape[1]
        b1 = 1.0 * np.eye(n) + kmat.T @ kmat / 1.0
        rhs = -(aspec.grad_l1.ravel())
        x_primal = np.linalg.solve(b1, rhs).reshape(aspec.k_op.in_shape)
        X, Y, _ = solve_adjoint(aspec, 1e-9, 1e-9)
        np.testing.assert_allclose(X, x_primal, atol=2e-9)
