"""Adaptive inexact descent on the kernel parameters.

Backtracking gradient descent where the line-search test accounts for
the inexactness of every loss evaluation: an accepted step certifies a
true sufficient decrease despite only approximate lower-level solves.
On backtracking failure all four solver tolerances shrink and the
descent direction is recomputed; on success tolerances and step size
are relaxed.  Every lower-level PDHG iteration (saddle, adjoint and
candidate evaluations alike) is charged to one cumulative budget.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import StagnationError
from .hypergrad import batch_hypergradient
from .saddle import solve_saddle

TOLERANCE_FLOOR = 1e-12


@dataclass
class MaidConfig:
    rho_down: float = 0.5
    rho_up: float = 10.0 / 9.0
    nu_down: float = 0.5
    nu_up: float = 1.05
    max_bt: int = 5
    lam: float = 1e-4
    alpha0: float = 1e-2
    eps_x0: float = 1e-1
    eps_y0: float = 1e-1
    delta_x0: float = 1e-1
    delta_y0: float = 1e-1
    max_outer: int = 100
    budget_cap: int | None = None  # total lower-level iterations; None = uncapped
    solver_max_iter: int = 200_000

    def __post_init__(self):
        if not (0.0 < self.rho_down < 1.0):
            raise ValueError("rho_down must lie in (0, 1)")
        if self.rho_up <= 1.0:
            raise ValueError("rho_up must exceed 1")
        if not (0.0 < self.nu_down < 1.0):
            raise ValueError("nu_down must lie in (0, 1)")
        if self.nu_up <= 1.0:
            raise ValueError("nu_up must exceed 1")
        if self.max_bt < 1:
            raise ValueError("max_bt must be positive")


@dataclass
class LogRow:
    t: int
    attempt: int
    alpha: float
    eps_x: float
    eps_y: float
    delta_x: float
    delta_y: float
    loss_upper_bound: float
    grad_norm: float
    bound_theta: float
    psi: float
    accepted: int
    cumulative_lower_iters: int

    FIELDS = (
        "t", "attempt", "alpha", "eps_x", "eps_y", "delta_X", "delta_Y",
        "loss_upper_bound", "grad_norm", "bound_theta", "psi", "accepted",
        "cumulative_lower_iters",
    )

    def values(self):
        return (
            self.t, self.attempt, repr(self.alpha), repr(self.eps_x),
            repr(self.eps_y), repr(self.delta_x), repr(self.delta_y),
            repr(self.loss_upper_bound), repr(self.grad_norm),
            repr(self.bound_theta), repr(self.psi), self.accepted,
            self.cumulative_lower_iters,
        )


class CsvLog:
    """Incremental CSV writer, flushed per row so interrupts keep history."""

    def __init__(self, path, fields):
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(fields)
        self._fh.flush()

    def write(self, values):
        self._writer.writerow(values)
        self._fh.flush()

    def close(self):
        self._fh.close()


def psi_value(loss_new, grad_norm_new, loss_old, grad_norm_old, eps_bar,
              l_smooth_sum, lam, alpha, z_norm_sq):
    """Inexactness-aware sufficient-decrease test; <= 0 certifies descent.

    Equals loss_new - loss_old + lam*alpha*||z||^2 plus the worst-case
    evaluation slack of both loss values at accuracy eps_bar.
    """
    return (
        loss_new
        + grad_norm_new * eps_bar
        + 0.5 * l_smooth_sum * eps_bar**2
        - loss_old
        + grad_norm_old * eps_bar
        + lam * alpha * z_norm_sq
    )


@dataclass
class MaidResult:
    theta: np.ndarray
    history: list
    budget_rows: list
    status: str
    cumulative_lower_iters: int
    accepted_steps: int
    warms: list = field(default=None, repr=False)
    theta_trace: list = field(default_factory=list, repr=False)  # after each accepted step


def _candidate_losses(problem, theta, samples, eps_x, eps_y, warms, max_iter):
    """Solve the lower level at a candidate point; batch loss statistics.

    Returns (mean loss, mean grad norm, iters, per-sample (x, y) pairs).
    """
    losses = []
    grad_norms = []
    iters = 0
    states = []
    for i, sample in enumerate(samples):
        inst = problem.build(theta, sample)
        warm = None
        if warms is not None and warms[i] is not None:
            warm = (warms[i][0], warms[i][1])
        else:
            warm = inst.initial_state()
        x_t, y_t, it = solve_saddle(
            inst.spec, eps_x, eps_y, warm=warm, max_iter=max_iter
        )
        iters += it
        losses.append(inst.loss1.value(x_t) + inst.loss2.value(y_t))
        gl1 = inst.loss1.grad(x_t)
        gl2 = inst.loss2.grad(y_t)
        grad_norms.append(float(np.sqrt(np.vdot(gl1, gl1).real + np.vdot(gl2, gl2).real)))
        states.append((x_t, y_t))
    return float(np.mean(losses)), float(np.mean(grad_norms)), iters, states


def maid_run(config, problem, theta0, samples, history_log=None, budget_log=None):
    """Adaptive inexact descent; returns the final parameters and history.

    ``history_log``/``budget_log`` are optional :class:`CsvLog` objects;
    one history row is written per backtracking attempt and one budget
    row per accepted step.
    """
    theta = np.array(theta0, dtype=np.float64)
    alpha = config.alpha0
    tols = [config.eps_x0, config.eps_y0, config.delta_x0, config.delta_y0]
    l_sum = problem.loss_smooth_sum()
    warms = [None] * len(samples)
    history = []
    budget_rows = []
    theta_trace = []
    cum_iters = 0
    accepted_steps = 0
    status = "max_outer"

    def over_budget():
        return config.budget_cap is not None and cum_iters >= config.budget_cap

    if over_budget():
        return MaidResult(theta, history, budget_rows, "budget", cum_iters, 0, warms,
                          theta_trace)

    stop = False
    for t in range(config.max_outer):
        if stop or over_budget():
            status = "budget"
            break
        j = config.max_bt
        attempt = 0
        accepted = False
        while not accepted:
            z, bound_theta, iters, results = batch_hypergradient(
                problem, theta, samples, tols[0], tols[1], tols[2], tols[3],
                warms=warms, max_iter=config.solver_max_iter,
            )
            cum_iters += iters
            warms = [
                (r.x_tilde, r.y_tilde, r.X_tilde, r.Y_tilde) for r in results
            ]
            loss_old = float(np.mean([r.loss_value for r in results]))
            gnorm_old = float(np.mean([r.loss_grad_norm for r in results]))
            z_norm_sq = float(np.vdot(z, z).real)
            tols_next = [config.nu_up * v for v in tols]
            eps_bar = max(tols[0], tols[1], tols_next[0], tols_next[1])
            # each refinement round restarts the line search from the
            # round-entry step size; only an accepted trial changes alpha
            trial_alpha = alpha
            for _ in range(j):
                theta_cand = problem.project_theta(theta - trial_alpha * z)
                loss_new, gnorm_new, it_cand, cand_states = _candidate_losses(
                    problem, theta_cand, samples, tols_next[0], tols_next[1],
                    warms, config.solver_max_iter,
                )
                cum_iters += it_cand
                psi = psi_value(
                    loss_new, gnorm_new, loss_old, gnorm_old, eps_bar,
                    l_sum, config.lam, trial_alpha, z_norm_sq,
                )
                loss_ub = (
                    loss_new + gnorm_new * eps_bar + 0.5 * l_sum * eps_bar**2
                )
                ok = psi <= 0.0
                row = LogRow(
                    t=t, attempt=attempt, alpha=trial_alpha,
                    eps_x=tols[0], eps_y=tols[1], delta_x=tols[2], delta_y=tols[3],
                    loss_upper_bound=loss_ub,
                    grad_norm=float(np.sqrt(z_norm_sq)),
                    bound_theta=bound_theta, psi=psi,
                    accepted=int(ok), cumulative_lower_iters=cum_iters,
                )
                history.append(row)
                if history_log is not None:
                    history_log.write(row.values())
                attempt += 1
                if ok:
                    theta = theta_cand
                    warms = [
                        (cand_states[i][0], cand_states[i][1],
                         warms[i][2], warms[i][3])
                        for i in range(len(samples))
                    ]
                    tols = tols_next
                    alpha = config.rho_up * trial_alpha
                    accepted = True
                    accepted_steps += 1
                    theta_trace.append(theta.copy())
                    budget_rows.append((cum_iters, loss_ub))
                    if budget_log is not None:
                        budget_log.write((cum_iters, repr(loss_ub)))
                    break
                trial_alpha = config.rho_down * trial_alpha
            if not accepted:
                j += 1
                tols = [config.nu_down * v for v in tols]
                if min(tols) < TOLERANCE_FLOOR:
                    raise StagnationError(
                        f"tolerances reached {min(tols):.3e} at outer step {t} "
                        f"without an accepted step (grad norm "
                        f"{np.sqrt(z_norm_sq):.3e}, bound {bound_theta:.3e})"
                    )
                if over_budget():
                    stop = True  # budget exhausted during backtracking
                    break
    if status == "max_outer" and (stop or over_budget()):
        status = "budget"
    return MaidResult(
        theta, history, budget_rows, status, cum_iters, accepted_steps, warms,
        theta_trace,
    )


def nonadaptive_run(config, problem, theta0, samples, history_log=None,
                    budget_log=None):
    """Fixed-step, fixed-tolerance inexact descent baseline.

    Uses alpha0 and the initial tolerances throughout; iterates until the
    budget cap or max_outer.  The loss sequence is recorded but no
    descent test is applied, so it may oscillate.
    """
    theta = np.array(theta0, dtype=np.float64)
    tols = [config.eps_x0, config.eps_y0, config.delta_x0, config.delta_y0]
    l_sum = problem.loss_smooth_sum()
    eps_bar = max(tols[0], tols[1])
    warms = [None] * len(samples)
    history = []
    budget_rows = []
    cum_iters = 0
    status = "max_outer"
    for t in range(config.max_outer):
        if config.budget_cap is not None and cum_iters >= config.budget_cap:
            status = "budget"
            break
        z, bound_theta, iters, results = batch_hypergradient(
            problem, theta, samples, tols[0], tols[1], tols[2], tols[3],
            warms=warms, max_iter=config.solver_max_iter,
        )
        cum_iters += iters
        warms = [(r.x_tilde, r.y_tilde, r.X_tilde, r.Y_tilde) for r in results]
        loss = float(np.mean([r.loss_value for r in results]))
        gnorm = float(np.mean([r.loss_grad_norm for r in results]))
        loss_ub = loss + gnorm * eps_bar + 0.5 * l_sum * eps_bar**2
        row = LogRow(
            t=t, attempt=0, alpha=config.alpha0,
            eps_x=tols[0], eps_y=tols[1], delta_x=tols[2], delta_y=tols[3],
            loss_upper_bound=loss_ub,
            grad_norm=float(np.linalg.norm(z)),
            bound_theta=bound_theta, psi=np.nan,
            accepted=1, cumulative_lower_iters=cum_iters,
        )
        history.append(row)
        if history_log is not None:
            history_log.write(row.values())
        budget_rows.append((cum_iters, loss_ub))
        if budget_log is not None:
            budget_log.write((cum_iters, repr(loss_ub)))
        theta = problem.project_theta(theta - config.alpha0 * z)
    return MaidResult(theta, history, budget_rows, status, cum_iters, len(budget_rows), warms)
