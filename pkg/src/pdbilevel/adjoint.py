"""Adjoint saddle-point problem at an inexact lower-level solution.

Given (x~, y~), the adjoint problem is the quadratic saddle

    min_X max_Y  <KX, Y> + 1/2 <H_g X, X> - 1/2 <H_f Y, Y>
                 + <grad l1(x~), X> + <grad l2(y~), Y>

with H_g = hess g(x~) and H_f = hess f*(y~).  Its PDHG reuses the
original mu_g/mu_f* step rule (the quadratic blocks inherit exactly
those moduli), and each prox is a closed-form shifted Hessian solve.
Stopping uses the computable residual bounds delta_1/delta_2.
"""

from types import SimpleNamespace

import numpy as np

from .errors import DivergenceError, SpecError, ToleranceNotReached
from .saddle import CHECK_EVERY, pdhg_init, pdhg_iterate


class AdjointSpec:
    """Frozen data of the adjoint problem at (x~, y~)."""

    def __init__(self, k_op, hx, hy, g_bundle, fstar_bundle, grad_l1, grad_l2):
        self.k_op = k_op
        self.hx = hx
        self.hy = hy
        self.g = g_bundle
        self.fstar = fstar_bundle
        self.grad_l1 = grad_l1
        self.grad_l2 = grad_l2
        # constant terms of the residuals, cached
        self._kstar_hf_inv_gl2 = k_op.adjoint_apply(
            fstar_bundle.hess_inv_apply(hy, grad_l2)
        )
        self._k_hg_inv_gl1 = k_op.apply(g_bundle.hess_inv_apply(hx, grad_l1))

    @property
    def mu_g(self):
        return self.g.mu

    @property
    def mu_fstar(self):
        return self.fstar.mu


def build_adjoint(spec, x_tilde, y_tilde, loss1, loss2):
    """AdjointSpec for the saddle spec at (x~, y~) and the given losses."""
    if not (spec.g.supports_hessian() and spec.fstar.supports_hessian()):
        raise SpecError("adjoint problem needs Hessian actions on both bundles")
    return AdjointSpec(
        spec.k_op,
        np.asarray(x_tilde, dtype=np.float64),
        np.asarray(y_tilde, dtype=np.float64),
        spec.g,
        spec.fstar,
        loss1.grad(np.asarray(x_tilde, dtype=np.float64)),
        loss2.grad(np.asarray(y_tilde, dtype=np.float64)),
    )


def adjoint_residual_X(aspec, X):
    """delta_1: certified bound on ||X - X_bar||."""
    k = aspec.k_op
    b1x = aspec.g.hess_apply(aspec.hx, X) + k.adjoint_apply(
        aspec.fstar.hess_inv_apply(aspec.hy, k.apply(X))
    )
    res = b1x + aspec.grad_l1 + aspec._kstar_hf_inv_gl2
    return float(np.linalg.norm(res)) / aspec.mu_g


def adjoint_residual_Y(aspec, Y):
    """delta_2: certified bound on ||Y - Y_bar||."""
    k = aspec.k_op
    b2y = k.apply(aspec.g.hess_inv_apply(aspec.hx, k.adjoint_apply(Y))) + (
        aspec.fstar.hess_apply(aspec.hy, Y)
    )
    res = b2y + aspec._k_hg_inv_gl1 - aspec.grad_l2
    return float(np.linalg.norm(res)) / aspec.mu_fstar


def solve_adjoint(aspec, delta_x, delta_y, warm=None, max_iter=200_000,
                  check_every=CHECK_EVERY):
    """PDHG on the adjoint problem until delta_1 <= delta_x, delta_2 <= delta_y.

    Returns (X, Y, iters).  ``warm`` defaults to zero, which is accepted
    immediately when both loss gradients vanish.
    """
    if delta_x <= 0 or delta_y <= 0:
        raise SpecError("tolerances must be positive")
    if warm is not None:
        x0, y0 = warm
    else:
        x0 = np.zeros(aspec.k_op.in_shape)
        y0 = np.zeros(aspec.k_op.out_shape)

    # present the quadratic adjoint objective through the SaddleSpec
    # interface so the PDHG kernel is shared: each prox is a closed-form
    # shifted Hessian solve
    shim = SimpleNamespace(
        k_op=aspec.k_op,
        g=SimpleNamespace(
            mu=aspec.mu_g,
            prox=lambda tau, p: aspec.g.hess_shift_solve(
                aspec.hx, tau, p - tau * aspec.grad_l1
            ),
        ),
        fstar=SimpleNamespace(
            mu=aspec.mu_fstar,
            prox=lambda sigma, p: aspec.fstar.hess_shift_solve(
                aspec.hy, sigma, p + sigma * aspec.grad_l2
            ),
        ),
    )
    state = pdhg_init(shim, x0, y0)
    best = (np.inf, np.inf)
    while True:
        dx = adjoint_residual_X(aspec, state.x)
        dy = adjoint_residual_Y(aspec, state.y)
        if not (np.isfinite(dx) and np.isfinite(dy)):
            raise DivergenceError(f"non-finite adjoint residuals at iter {state.iter}")
        best = (min(best[0], dx), min(best[1], dy))
        if dx <= delta_x and dy <= delta_y:
            return state.x.copy(), state.y.copy(), state.iter
        if state.iter >= max_iter:
            raise ToleranceNotReached(
                f"adjoint solve: {max_iter} iterations, best bounds {best}",
                best_primal=best[0], best_dual=best[1], iters=state.iter,
            )
        for _ in range(min(check_every, max_iter - state.iter)):
            pdhg_iterate(state, shim)
