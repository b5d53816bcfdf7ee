"""Hypergradient assembly, error-bound constants and soundness."""

import numpy as np
import pytest

from pdbilevel.bundles import SquaredLoss, ZeroLoss, quadratic_bundle
from pdbilevel.hypergrad import (
    BoundConstants,
    batch_hypergradient,
    bound_constants,
    hypergradient_bound,
    inexact_piggyback,
)
from pdbilevel.problems import QuadraticProblem, TrainingPair


def scalar_problem():
    prob = QuadraticProblem(mu_g=1.0, mu_fstar=1.0, n_filters=1, kernel_size=1)
    pair = TrainingPair(np.zeros((1, 1)), 2.0 * np.ones((1, 1)))
    theta = np.ones((1, 1, 1))
    return prob, theta, pair


class TestBoundConstants:
    def test_quadratic_case(self):
        g = quadratic_bundle(np.zeros(2), 2.0)      # mu_g = 2, no hess variation
        fstar = quadratic_bundle(np.zeros(3), 0.5)  # mu_f* = 0.5
        loss1 = SquaredLoss(np.zeros(2))
        loss2 = ZeroLoss()
        k = 1.5
        c = bound_constants(g, fstar, loss1, loss2, k, np.zeros(2), np.zeros(3),
                            np.ones(2), np.ones(3))
        assert c.cx1 == pytest.approx(1.0 / 2.0)
        assert c.cx2 == 0.0
        assert c.cy1 == pytest.approx(k / (2.0 * 0.5))
        assert c.cy2 == 0.0

    def test_all_zero_losses(self):
        g = quadratic_bundle(np.zeros(2), 1.0)
        fstar = quadratic_bundle(np.zeros(2), 1.0)
        c = bound_constants(g, fstar, ZeroLoss(), ZeroLoss(), 2.0, np.zeros(2),
                            np.zeros(2), np.zeros(2), np.zeros(2))
        assert c.cx1 == 0.0 and c.cx2 == 0.0 and c.cy1 == 0.0 and c.cy2 == 0.0

    def test_hessian_variation_term(self):
        class FakeBundle:
            mu = 1.0
            l_grad = 3.0
            l_hess_conj = 2.0

        g = FakeBundle()
        fstar = quadratic_bundle(np.zeros(1), 1.0)
        c = bound_constants(g, fstar, SquaredLoss(np.zeros(1)), ZeroLoss(), 1.0,
                            np.zeros(1), np.zeros(1), np.ones(1), np.zeros(1))
        assert c.cx1 == pytest.approx(55.0)  # 2*27*1 + 1


class TestHypergradientBound:
    def test_zero_tolerances(self):
        c = BoundConstants(1.0, 2.0, 3.0, 4.0)
        assert hypergradient_bound(c, 0, 0, 0, 0, np.ones(2), np.ones(2),
                                   np.ones(2), np.ones(2)) == 0.0

    def test_hand_computed_value(self):
        c = BoundConstants(cx1=1.0, cx2=0.0, cy1=2.0, cy2=0.0)
        x = np.zeros(3); x[0] = 3.0       # ||x|| = 3
        y = np.zeros(3); y[0] = 4.0       # ||y|| = 4
        x_ad = np.zeros(3)                # ||X|| = 0
        y_ad = np.zeros(3); y_ad[0] = 5.0 # ||Y|| = 5
        val = hypergradient_bound(c, 1.0, 0.0, 0.0, 0.0, x, y, x_ad, y_ad)
        assert val == pytest.approx(17.0)  # (2*3 + 1*4 + 5)*1 + 2*1


class TestPiggyback:
    def test_scalar_closed_form(self):
        prob, theta, pair = scalar_problem()
        res = inexact_piggyback(prob, theta, pair, 1e-8, 1e-8, 1e-8, 1e-8)
        assert abs(res.z_theta.ravel()[0] + 1.0) <= 1e-6

    def test_stationary_loss_gives_zero(self):
        # clean equals the exact lower-level solution: adjoint rhs vanishes
        prob = QuadraticProblem(mu_g=1.0, mu_fstar=1.0, n_filters=1, kernel_size=1)
        pair0 = TrainingPair(np.zeros((1, 1)), 2.0 * np.ones((1, 1)))
        theta = np.ones((1, 1, 1))
        x_hat, _ = prob.exact_lower_level(theta, pair0)
        pair = TrainingPair(x_hat, pair0.corrupted)
        res = inexact_piggyback(prob, theta, pair, 1e-10, 1e-10, 1e-10, 1e-10)
        assert np.linalg.norm(res.z_theta) <= 1e-8

    def test_budget_monotonicity(self):
        prob, theta, pair = scalar_problem()
        loose = inexact_piggyback(prob, theta, pair, 1e-2, 1e-2, 1e-2, 1e-2)
        tight = inexact_piggyback(prob, theta, pair, 1e-6, 1e-6, 1e-6, 1e-6)
        assert tight.lower_iters > loose.lower_iters

    def test_bound_soundness_grid(self):
        rng = np.random.default_rng(0)
        prob = QuadraticProblem(mu_g=1.0, mu_fstar=1.0, n_filters=2, kernel_size=3)
        for seed in range(5):
            r2 = np.random.default_rng(seed)
            pair = TrainingPair(r2.standard_normal((8, 8)), r2.standard_normal((8, 8)))
            theta = prob.init_theta(seed) + 0.2 * r2.standard_normal((2, 3, 3))
            exact = prob.exact_hypergradient(theta, pair)
            warm = None
            for tol in (1e-1, 1e-3, 1e-6):
                res = inexact_piggyback(prob, theta, pair, tol, tol, tol, tol, warm=warm)
                warm = (res.x_tilde, res.y_tilde, res.X_tilde, res.Y_tilde)
                err = np.linalg.norm(res.z_theta - exact)
                assert err <= res.bound_theta

    def test_error_converges_with_tolerances(self):
        prob, theta, pair = scalar_problem()
        exact = prob.exact_hypergradient(theta, pair)
        errs = []
        warm = None
        tol = 1e-1
        for _ in range(8):
            res = inexact_piggyback(prob, theta, pair, tol, tol, tol, tol, warm=warm)
            warm = (res.x_tilde, res.y_tilde, res.X_tilde, res.Y_tilde)
            errs.append(np.linalg.norm(res.z_theta - exact))
            tol /= 2
        assert errs[-1] <= max(1e-10, errs[0])

    def test_outer_product_structure(self):
        # <z, dtheta> == <y, K(dtheta) X> + <Y, K(dtheta) x> for any points
        rng = np.random.default_rng(1)
        prob = QuadraticProblem(mu_g=1.0, mu_fstar=1.0, n_filters=2, kernel_size=3)
        pair = TrainingPair(rng.standard_normal((6, 6)), rng.standard_normal((6, 6)))
        theta = prob.init_theta(0)
        inst = prob.build(theta, pair)
        x = rng.standard_normal(inst.spec.k_op.in_shape)
        y = rng.standard_normal(inst.spec.k_op.out_shape)
        x_ad = rng.standard_normal(inst.spec.k_op.in_shape)
        y_ad = rng.standard_normal(inst.spec.k_op.out_shape)
        z = inst.theta_grad(x_ad, y) + inst.theta_grad(x, y_ad)
        from pdbilevel.linops import FilterBank2D

        for _ in range(10):
            dth = rng.standard_normal(theta.shape)
            bank_d = FilterBank2D(dth, (6, 6))
            lhs = np.vdot(z, dth)
            rhs = np.vdot(y, bank_d.apply(x_ad)) + np.vdot(y_ad, bank_d.apply(x))
            assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))

    def test_adjoint_distance_diagnostics(self):
        prob, theta, pair = scalar_problem()
        res = inexact_piggyback(prob, theta, pair, 1e-4, 1e-4, 1e-4, 1e-4)
        x_ad, y_ad = prob.exact_adjoint(theta, pair)
        # the piggyback adjoint target is the exact-adjoint pair here
        assert np.linalg.norm(res.X_tilde - x_ad) <= res.bound_adjoint_x
        assert np.linalg.norm(res.Y_tilde - y_ad) <= res.bound_adjoint_y


class TestBatch:
    def test_single_sample_matches(self):
        prob, theta, pair = scalar_problem()
        z, bound, iters, results = batch_hypergradient(prob, theta, [pair],
                                                       1e-6, 1e-6, 1e-6, 1e-6)
        solo = inexact_piggyback(prob, theta, pair, 1e-6, 1e-6, 1e-6, 1e-6)
        np.testing.assert_array_equal(z, solo.z_theta)
        assert bound == solo.bound_theta
        assert iters == solo.lower_iters

    def test_duplicate_samples_average(self):
        prob, theta, pair = scalar_problem()
        z1, _, _, _ = batch_hypergradient(prob, theta, [pair], 1e-6, 1e-6, 1e-6, 1e-6)
        z2, _, _, _ = batch_hypergradient(prob, theta, [pair, pair], 1e-6, 1e-6, 1e-6, 1e-6)
        np.testing.assert_allclose(z1, z2, rtol=1e-12)

    def test_batch_bound_soundness(self):
        rng = np.random.default_rng(2)
        prob = QuadraticProblem(mu_g=1.0, mu_fstar=1.0, n_filters=2, kernel_size=3)
        pairs = [
            TrainingPair(rng.standard_normal((6, 6)), rng.standard_normal((6, 6)))
            for _ in range(4)
        ]
        theta = prob.init_theta(1)
        z, bound, _, _ = batch_hypergradient(prob, theta, pairs, 1e-3, 1e-3, 1e-3, 1e-3)
        exact = np.mean([prob.exact_hypergradient(theta, p) for p in pairs], axis=0)
        assert np.linalg.norm(z - exact) <= bound

    def test_empty_batch_rejected(self):
        prob, theta, _ = scalar_problem()
        with pytest.raises(ValueError):
            batch_hypergradient(prob, theta, [], 1e-3, 1e-3, 1e-3, 1e-3)
