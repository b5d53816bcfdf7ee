"""Inexact piggyback hypergradients with a-posteriori error bounds.

The driver solves the lower-level saddle problem to (eps_x, eps_y),
solves the adjoint problem at the inexact point to (delta_X, delta_Y),
assembles the hypergradient in kernel coordinates and evaluates a fully
computable bound on its distance to the exact hypergradient.  The bound
lives in operator space; transport to kernel coordinates multiplies by
the parametrization-adjoint norm, and both numbers are kept.
"""

from dataclasses import dataclass, field

import numpy as np

from .adjoint import build_adjoint, solve_adjoint
from .saddle import solve_saddle


@dataclass
class BoundConstants:
    """Error-amplification constants of the a-posteriori bound."""

    cx1: float
    cx2: float
    cy1: float
    cy2: float


def bound_constants(g, fstar, loss1, loss2, k_norm, x_tilde, y_tilde,
                    X_tilde, Y_tilde):
    """Constants relating lower-level accuracy to adjoint accuracy.

    Conventions: ``g.l_hess_conj`` is the Lipschitz constant of the
    Hessian of g*, ``fstar.l_hess_conj`` of the Hessian of f.
    """
    norm_x_ad = float(np.linalg.norm(X_tilde))
    norm_y_ad = float(np.linalg.norm(Y_tilde))
    norm_gl1 = float(np.linalg.norm(loss1.grad(x_tilde)))
    norm_gl2 = float(np.linalg.norm(loss2.grad(y_tilde)))
    l1 = loss1.l_smooth
    l2 = loss2.l_smooth
    cx1 = (g.l_hess_conj * g.l_grad**3 * norm_x_ad + l1) / g.mu
    cx2 = (
        fstar.l_hess_conj * fstar.l_grad * k_norm * (k_norm * norm_x_ad + norm_gl2)
    ) / g.mu + l2 * k_norm / (g.mu * fstar.mu)
    cy1 = (
        g.l_hess_conj * g.l_grad * k_norm * (k_norm * norm_y_ad + norm_gl1)
    ) / fstar.mu + l1 * k_norm / (g.mu * fstar.mu)
    cy2 = (fstar.l_hess_conj * fstar.l_grad**3 * norm_y_ad + l2) / fstar.mu
    return BoundConstants(cx1=cx1, cx2=cx2, cy1=cy1, cy2=cy2)


def hypergradient_bound(consts, eps_x, eps_y, delta_x, delta_y,
                        x_tilde, y_tilde, X_tilde, Y_tilde):
    """Computable bound on ||z - grad L(K)|| in operator coordinates."""
    nx = float(np.linalg.norm(x_tilde))
    ny = float(np.linalg.norm(y_tilde))
    nx_ad = float(np.linalg.norm(X_tilde))
    ny_ad = float(np.linalg.norm(Y_tilde))
    return (
        (consts.cy1 * nx + consts.cx1 * ny + ny_ad) * eps_x
        + (consts.cy2 * nx + consts.cx2 * ny + nx_ad) * eps_y
        + ny * delta_x
        + nx * delta_y
        + consts.cy1 * eps_x**2
        + consts.cx2 * eps_y**2
        + delta_x * eps_y
        + delta_y * eps_x
    )


@dataclass
class PiggybackResult:
    """One inexact piggyback evaluation at a fixed parameter point."""

    x_tilde: np.ndarray
    y_tilde: np.ndarray
    X_tilde: np.ndarray
    Y_tilde: np.ndarray
    z_theta: np.ndarray
    bound_operator: float
    bound_theta: float
    lower_iters: int
    eps_x: float
    eps_y: float
    delta_x: float
    delta_y: float
    # diagnostics: certified distances of the adjoint iterates to the
    # exact-adjoint solution, and loss data at the inexact point
    bound_adjoint_x: float = 0.0
    bound_adjoint_y: float = 0.0
    loss_value: float = 0.0
    loss_grad_norm: float = 0.0
    heuristic: bool = False
    constants: BoundConstants = field(default=None)


def inexact_piggyback(problem, theta, sample, eps_x, eps_y, delta_x, delta_y,
                      warm=None, max_iter=200_000):
    """Run the full piggyback pipeline for one training sample.

    ``warm`` is an optional (x, y, X, Y) tuple from a previous call at a
    nearby parameter point.  The hypergradient is materialized only in
    kernel coordinates; the rank-two operator-space form is never built.
    """
    inst = problem.build(theta, sample)
    if warm is not None:
        warm_xy = (warm[0], warm[1])
        warm_ad = (warm[2], warm[3])
    else:
        warm_xy = inst.initial_state()
        warm_ad = None
    x_t, y_t, it_saddle = solve_saddle(
        inst.spec, eps_x, eps_y, warm=warm_xy, max_iter=max_iter
    )
    aspec = build_adjoint(inst.spec, x_t, y_t, inst.loss1, inst.loss2)
    x_ad, y_ad, it_adj = solve_adjoint(
        aspec, delta_x, delta_y, warm=warm_ad, max_iter=max_iter
    )
    z_theta = inst.theta_grad(x_ad, y_t) + inst.theta_grad(x_t, y_ad)

    k_norm = inst.spec.k_op.norm_est
    consts = bound_constants(
        inst.spec.g, inst.spec.fstar, inst.loss1, inst.loss2, k_norm,
        x_t, y_t, x_ad, y_ad,
    )
    bound_op = hypergradient_bound(
        consts, eps_x, eps_y, delta_x, delta_y, x_t, y_t, x_ad, y_ad
    )
    gl1 = inst.loss1.grad(x_t)
    gl2 = inst.loss2.grad(y_t)
    grad_norm = float(np.sqrt(np.vdot(gl1, gl1).real + np.vdot(gl2, gl2).real))
    return PiggybackResult(
        x_tilde=x_t,
        y_tilde=y_t,
        X_tilde=x_ad,
        Y_tilde=y_ad,
        z_theta=z_theta,
        bound_operator=float(bound_op),
        bound_theta=float(inst.param_adjoint_norm * bound_op),
        lower_iters=it_saddle + it_adj,
        eps_x=eps_x,
        eps_y=eps_y,
        delta_x=delta_x,
        delta_y=delta_y,
        bound_adjoint_x=consts.cx1 * eps_x + consts.cx2 * eps_y + delta_x,
        bound_adjoint_y=consts.cy1 * eps_x + consts.cy2 * eps_y + delta_y,
        loss_value=inst.loss1.value(x_t) + inst.loss2.value(y_t),
        loss_grad_norm=grad_norm,
        heuristic=inst.heuristic,
        constants=consts,
    )


def batch_hypergradient(problem, theta, samples, eps_x, eps_y, delta_x, delta_y,
                        warms=None, max_iter=200_000):
    """Average the per-sample hypergradients and bounds (index order).

    Returns (z_theta, bound_theta, lower_iters, per_sample_results).
    """
    if not samples:
        raise ValueError("batch_hypergradient needs at least one sample")
    if warms is None:
        warms = [None] * len(samples)
    results = []
    for i, sample in enumerate(samples):
        results.append(
            inexact_piggyback(
                problem, theta, sample, eps_x, eps_y, delta_x, delta_y,
                warm=warms[i], max_iter=max_iter,
            )
        )
    n = float(len(samples))
    z = results[0].z_theta.copy()
    for r in results[1:]:
        z += r.z_theta
    z /= n
    bound = sum(r.bound_theta for r in results) / n
    iters = sum(r.lower_iters for r in results)
    return z, bound, iters, results
