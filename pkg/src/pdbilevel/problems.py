"""Bilevel problem factories.

Each factory maps a kernel parameter tensor and a training pair to a
saddle-point specification plus loss bundles, and knows how to project
the hypergradient into kernel coordinates.  The quadratic factory also
carries dense closed-form oracles used as the reference for every
error-bound test.
"""

from dataclasses import dataclass

import numpy as np

from .bundles import (
    BoxQuadraticBundle,
    ConcatBundle,
    EpigraphSupportBundle,
    GroupNormBundle,
    QuadraticBundle,
    SquaredLoss,
    ZeroLoss,
    psi_w,
)
from .errors import DimensionError, OracleSizeError
from .linops import (
    BlockLayout,
    BlockMatrixOp,
    FilterBank2D,
    ConvLayer2D,
    Grad2D,
    IdentityOp,
    LinOp,
    ScaledOp,
    TransposedOp,
    gram_norm_estimate,
    op_to_matrix,
    power_norm_raw,
    shift_overlap_gram,
)
from .rng import Xoshiro256StarStar
from .saddle import SaddleSpec

ORACLE_MAX_PIXELS = 1024  # dense solves up to 32x32 images

# operator-norm upper estimates for theta-dependent operators: many power
# iterations would dominate the build cost, so fewer iterations with a
# larger inflation keep the estimate conservative and cheap
BUILD_NORM_ITERS = 150
BUILD_NORM_SAFETY = 1.05


@dataclass
class TrainingPair:
    """One supervised sample: ground truth and its corrupted observation."""

    clean: np.ndarray
    corrupted: np.ndarray
    source: str = None
    noise_seed: int = None

    def __post_init__(self):
        self.clean = np.asarray(self.clean, dtype=np.float64)
        self.corrupted = np.asarray(self.corrupted, dtype=np.float64)
        if self.clean.shape != self.corrupted.shape:
            raise DimensionError("training pair images must share dimensions")


class ProblemInstance:
    """A built problem at fixed (theta, sample)."""

    def __init__(self, spec, loss1, loss2, theta_grad, param_adjoint_norm,
                 initial_state, extract_image, primal_objective=None,
                 heuristic=False):
        self.spec = spec
        self.loss1 = loss1
        self.loss2 = loss2
        self.theta_grad = theta_grad
        self.param_adjoint_norm = param_adjoint_norm
        self._initial_state = initial_state
        self.extract_image = extract_image
        self.primal_objective = primal_objective
        self.heuristic = heuristic

    def initial_state(self):
        x0, y0 = self._initial_state
        return x0.copy(), y0.copy()


def _init_filters(n_filters, kh, kw, seed):
    """Zero-mean Gaussian kernels, per-filter mean subtracted."""
    rng = Xoshiro256StarStar(seed)
    theta = 0.1 / np.sqrt(kh * kw) * rng.standard_normal((n_filters, kh, kw))
    return theta - theta.mean(axis=(1, 2), keepdims=True)


class ProblemFactory:
    kind = "base"
    bounds_heuristic = False
    assumptions_violated = False

    def __init__(self):
        self._cache = {}

    def init_theta(self, seed=0):
        raise NotImplementedError

    def build(self, theta, pair):
        raise NotImplementedError

    def project_theta(self, theta):
        return np.asarray(theta, dtype=np.float64)

    def loss_smooth_sum(self):
        # squared loss on the primal block, zero dual loss
        return 1.0

    def _bank_norm(self, op, theta):
        key = ("Knorm", theta.tobytes(), op.in_shape)
        if key not in self._cache:
            self._cache[key] = BUILD_NORM_SAFETY * power_norm_raw(
                op, BUILD_NORM_ITERS, seed=7
            )
        return self._cache[key]

    def _param_norm(self, image_shape, kh, kw, multiplicity=1):
        key = ("Pnorm", image_shape, kh, kw, multiplicity)
        if key not in self._cache:
            gram = shift_overlap_gram(image_shape, kh, kw)
            self._cache[key] = gram_norm_estimate(gram, multiplicity)
        return self._cache[key]

    def _check_oracle_size(self, pair):
        if pair.clean.size > ORACLE_MAX_PIXELS:
            raise OracleSizeError(
                f"dense oracle limited to {ORACLE_MAX_PIXELS} pixels, "
                f"got {pair.clean.size}"
            )


class QuadraticProblem(ProblemFactory):
    """Fully quadratic instance with closed-form lower level and hypergradient.

    g(x) = (mu_g/2)||x - u||^2, f*(y) = (mu_fstar/2)||y||^2, K a filter
    bank; the lower-level solution solves
    (mu_g I + K^T K / mu_fstar) x = mu_g u.
    """

    kind = "quadratic"

    def __init__(self, mu_g=1.0, mu_fstar=1.0, n_filters=2, kernel_size=3):
        super().__init__()
        if mu_g <= 0 or mu_fstar <= 0:
            raise ValueError("strong convexity moduli must be positive")
        self.mu_g = float(mu_g)
        self.mu_fstar = float(mu_fstar)
        self.n_filters = int(n_filters)
        self.kernel_size = int(kernel_size)

    def init_theta(self, seed=0):
        return _init_filters(self.n_filters, self.kernel_size, self.kernel_size, seed)

    def build(self, theta, pair):
        theta = np.asarray(theta, dtype=np.float64)
        shape = pair.corrupted.shape
        bank = FilterBank2D(theta, shape)
        bank._norm_est = self._bank_norm(bank, theta)
        spec = SaddleSpec(
            bank,
            QuadraticBundle(pair.corrupted, self.mu_g),
            QuadraticBundle(np.zeros(bank.out_shape), self.mu_fstar),
        )
        return ProblemInstance(
            spec=spec,
            loss1=SquaredLoss(pair.clean),
            loss2=ZeroLoss(),
            theta_grad=bank.kernel_gradient,
            param_adjoint_norm=self._param_norm(shape, self.kernel_size, self.kernel_size),
            initial_state=(pair.corrupted.copy(), np.zeros(bank.out_shape)),
            extract_image=lambda x: x,
        )

    def _dense_system(self, theta, pair):
        self._check_oracle_size(pair)
        bank = FilterBank2D(np.asarray(theta, dtype=np.float64), pair.corrupted.shape)
        kmat = op_to_matrix(bank)
        lhs = self.mu_g * np.eye(kmat.shape[1]) + kmat.T @ kmat / self.mu_fstar
        return bank, kmat, lhs

    def exact_lower_level(self, theta, pair):
        """Dense (x_hat, y_hat)."""
        bank, kmat, lhs = self._dense_system(theta, pair)
        x_hat = np.linalg.solve(lhs, self.mu_g * pair.corrupted.ravel())
        y_hat = kmat @ x_hat / self.mu_fstar
        return x_hat.reshape(bank.in_shape), y_hat.reshape(bank.out_shape)

    def exact_adjoint(self, theta, pair):
        """Dense (X_hat, Y_hat) for the squared loss against pair.clean."""
        bank, kmat, lhs = self._dense_system(theta, pair)
        x_hat, _ = self.exact_lower_level(theta, pair)
        grad_l1 = (x_hat - pair.clean).ravel()
        x_ad = np.linalg.solve(lhs, -grad_l1)
        y_ad = kmat @ x_ad / self.mu_fstar
        return x_ad.reshape(bank.in_shape), y_ad.reshape(bank.out_shape)

    def exact_hypergradient(self, theta, pair):
        """Closed-form hypergradient in kernel coordinates."""
        bank, _, _ = self._dense_system(theta, pair)
        x_hat, y_hat = self.exact_lower_level(theta, pair)
        x_ad, y_ad = self.exact_adjoint(theta, pair)
        return bank.kernel_gradient(x_ad, y_hat) + bank.kernel_gradient(x_hat, y_ad)

    def exact_loss(self, theta, pair):
        x_hat, _ = self.exact_lower_level(theta, pair)
        d = x_hat - pair.clean
        return 0.5 * float(np.vdot(d, d))


def quadratic_make(mu_g, mu_fstar, **kwargs):
    return QuadraticProblem(mu_g=mu_g, mu_fstar=mu_fstar, **kwargs)


class TVDiscretizationProblem(ProblemFactory):
    """Learned interpolation filters for the coupled-field TV model.

    Lower level over (x, q) with multiplier field y:

        min_{x,q} max_y  (mu_g/2)||x-u||^2 + lam * ||q||_smooth
                         + (mu_q/2)||q||^2 + <Dx - K(theta)* q, y>
                         - (mu_fstar/2)||y||^2

    The quadratic f* side relaxes the hard constraint Dx = K* q into a
    penalty ||Dx - K* q||^2 / (2 mu_fstar), keeping the dual strongly
    convex as the solver requires.  ``nonsmooth=True`` uses the raw
    group norm with generalized-Hessian selections; bounds are then
    heuristic.
    """

    kind = "tvdisc"

    def __init__(self, lambda_reg=20.0, mu_g=1.0, eps_s=1e-3, n_filters=8,
                 kernel_size=5, mu_q=1e-4, mu_fstar=1e-2, nonsmooth=False):
        super().__init__()
        if lambda_reg <= 0 or mu_g <= 0 or mu_q <= 0 or mu_fstar <= 0:
            raise ValueError("tvdisc parameters must be positive")
        if not nonsmooth and eps_s <= 0:
            raise ValueError("smoothed mode requires eps_s > 0")
        self.lambda_reg = float(lambda_reg)
        self.mu_g = float(mu_g)
        self.eps_s = float(eps_s)
        self.n_filters = int(n_filters)
        self.kernel_size = int(kernel_size)
        self.mu_q = float(mu_q)
        self.mu_fstar = float(mu_fstar)
        self.nonsmooth = bool(nonsmooth)

    @property
    def bounds_heuristic(self):
        return self.nonsmooth

    def init_theta(self, seed=0):
        return _init_filters(self.n_filters, self.kernel_size, self.kernel_size, seed)

    def build(self, theta, pair):
        theta = np.asarray(theta, dtype=np.float64)
        height, width = pair.corrupted.shape
        q_shape = (self.n_filters, 2, height, width)
        grad_op = Grad2D(height, width)
        bank = FilterBank2D(theta, (height, width), channels=2)
        norm_k = self._bank_norm(bank, theta)
        k_tot = BlockMatrixOp(
            [[grad_op, ScaledOp(TransposedOp(bank), -1.0)]],
            [(height, width), q_shape],
            [(2, height, width)],
        )
        # ||[D, -K*]|| <= sqrt(||D||^2 + ||K||^2); forward differences on a
        # 2-d grid have norm below sqrt(8)
        k_tot._norm_est = float(np.sqrt(8.0 + norm_k**2))
        layout = k_tot.in_layout
        eps = 0.0 if self.nonsmooth else self.eps_s
        g = ConcatBundle(
            [
                QuadraticBundle(pair.corrupted, self.mu_g),
                GroupNormBundle(self.lambda_reg, eps, q_shape, group_axis=1,
                                mu_quad=self.mu_q),
            ],
            [(height, width), q_shape],
        )
        fstar = QuadraticBundle(np.zeros(2 * height * width), self.mu_fstar)
        spec = SaddleSpec(k_tot, g, fstar)

        def theta_grad(primal, dual):
            q_part = layout.unpack(primal)[1]
            y = dual.reshape((2, height, width))
            return -bank.kernel_gradient(y, q_part)

        def primal_objective(primal):
            x_part, q_part = layout.unpack(primal)
            resid = grad_op.apply(x_part) - bank.adjoint_apply(q_part)
            return (
                g.value(primal)
                + 0.5 * float(np.vdot(resid, resid)) / self.mu_fstar
            )

        x0 = layout.pack([pair.corrupted, np.zeros(q_shape)])
        return ProblemInstance(
            spec=spec,
            loss1=SquaredLoss(pair.clean, layout=layout, block=0),
            loss2=ZeroLoss(),
            theta_grad=theta_grad,
            param_adjoint_norm=self._param_norm(
                (height, width), self.kernel_size, self.kernel_size, multiplicity=2
            ),
            initial_state=(x0, np.zeros(2 * height * width)),
            extract_image=lambda p: layout.unpack(p)[0],
            primal_objective=primal_objective,
            heuristic=self.nonsmooth,
        )


def tvdisc_make(lambda_reg, mu_g=1.0, eps_s=1e-3, n_filters=8, kernel=(5, 5),
                **kwargs):
    return TVDiscretizationProblem(
        lambda_reg=lambda_reg, mu_g=mu_g, eps_s=eps_s, n_filters=n_filters,
        kernel_size=kernel[0], **kwargs,
    )


class FoEProblem(ProblemFactory):
    """Single-layer learned smooth-rectifier regularizer (denoising).

    Lower level min_x 0.5||x-u||^2 + (mu_g/2)||x||^2 + gamma*psi_w(Kx),
    dualized into stacked duals (y1, y2) with the exact conjugate of the
    rectifier: a quadratic on [0, gamma] with curvature w/gamma.  The
    rectifier's second derivative jumps at its breakpoints, so the
    Hessian-Lipschitz constant feeding the error bound is a surrogate
    and bounds are flagged heuristic.
    """

    kind = "foe"
    bounds_heuristic = True

    def __init__(self, gamma=1.0, mu_g=1.0, w=0.01, n_filters=16, kernel_size=5):
        super().__init__()
        if gamma <= 0 or mu_g <= 0 or w <= 0:
            raise ValueError("foe parameters must be positive")
        self.gamma = float(gamma)
        self.mu_g = float(mu_g)
        self.w = float(w)
        self.n_filters = int(n_filters)
        self.kernel_size = int(kernel_size)

    def init_theta(self, seed=0):
        return _init_filters(self.n_filters, self.kernel_size, self.kernel_size, seed)

    def build(self, theta, pair):
        theta = np.asarray(theta, dtype=np.float64)
        height, width = pair.corrupted.shape
        bank = FilterBank2D(theta, (height, width))
        norm_k = self._bank_norm(bank, theta)
        k_tot = BlockMatrixOp(
            [[IdentityOp((height, width))], [bank]],
            [(height, width)],
            [(height, width), bank.out_shape],
        )
        k_tot._norm_est = float(np.sqrt(1.0 + norm_k**2))
        out_layout = k_tot.out_layout
        g = QuadraticBundle(np.zeros(height * width), self.mu_g)
        fstar = ConcatBundle(
            [
                QuadraticBundle(-pair.corrupted, 1.0),
                BoxQuadraticBundle(self.w / self.gamma, self.gamma, bank.out_shape),
            ],
            [(height, width), bank.out_shape],
        )
        spec = SaddleSpec(k_tot, g, fstar)

        def theta_grad(primal, dual):
            x = primal.reshape((height, width))
            y2 = out_layout.unpack(dual)[1]
            return bank.kernel_gradient(x, y2)

        def primal_objective(primal):
            x = primal.reshape((height, width))
            fidelity = x - pair.corrupted
            return (
                0.5 * float(np.vdot(fidelity, fidelity))
                + 0.5 * self.mu_g * float(np.vdot(x, x))
                + self.gamma * float(psi_w(bank.apply(x), self.w).sum())
            )

        return ProblemInstance(
            spec=spec,
            loss1=SquaredLoss(pair.clean.ravel()),
            loss2=ZeroLoss(),
            theta_grad=theta_grad,
            param_adjoint_norm=self._param_norm(
                (height, width), self.kernel_size, self.kernel_size
            ),
            initial_state=(pair.corrupted.ravel().copy(), out_layout.zeros()),
            extract_image=lambda p: p.reshape((height, width)),
            primal_objective=primal_objective,
            heuristic=True,
        )


def foe_make(gamma, mu_g=1.0, w=0.01, n_filters=16, kernel=(5, 5), **kwargs):
    return FoEProblem(gamma=gamma, mu_g=mu_g, w=w, n_filters=n_filters,
                      kernel_size=kernel[0], **kwargs)


class _PairSlotOp(LinOp):
    """Embed an operator's output into slot 0 or 1 of a paired variable."""

    def __init__(self, inner, slot):
        super().__init__(inner.in_shape, (2,) + inner.out_shape)
        self.inner = inner
        self.slot = int(slot)

    def _forward(self, x):
        out = np.zeros(self.out_shape)
        out[self.slot] = self.inner.apply(x)
        return out

    def _adjoint(self, y):
        return self.inner.adjoint_apply(y[self.slot])


class ICNN2Problem(ProblemFactory):
    """Two-layer input-convex regularizer (denoising), constraint dualized.

    Lower level over (x, z):

        0.5||x-u||^2 + (mu_g/2)||x||^2 + ind_C(Vx, z) + gamma*psi_w(Wz)

    with C the epigraph of psi_w taken pairwise, V a filter bank and W a
    nonnegative multi-channel layer.  The shipped model relaxes the
    structural gaps: the z block gets a (mu_z/2)||z||^2 term and the
    indicator's conjugate a (mu_reg/2)||.||^2 term, making both sides
    strongly convex so the solver and bound machinery run; the original
    formulation violates those assumptions, so the factory is flagged
    and every bound is heuristic.  Nonnegativity of the second layer is
    enforced by projection after each descent update.
    """

    kind = "icnn2"
    bounds_heuristic = True
    assumptions_violated = True

    def __init__(self, gamma=1.0, mu_g=1.0, w=0.01, n_filters1=16, n_filters2=4,
                 kernel_size=5, mu_z=1e-3, mu_reg=1e-3):
        super().__init__()
        if min(gamma, mu_g, w, mu_z, mu_reg) <= 0:
            raise ValueError("icnn2 parameters must be positive")
        self.gamma = float(gamma)
        self.mu_g = float(mu_g)
        self.w = float(w)
        self.n_filters1 = int(n_filters1)
        self.n_filters2 = int(n_filters2)
        self.kernel_size = int(kernel_size)
        self.mu_z = float(mu_z)
        self.mu_reg = float(mu_reg)
        k = self.kernel_size
        self.theta_layout = BlockLayout(
            [(self.n_filters1, k, k), (self.n_filters2, self.n_filters1, k, k)]
        )

    def init_theta(self, seed=0):
        k = self.kernel_size
        first = _init_filters(self.n_filters1, k, k, seed)
        rng = Xoshiro256StarStar(seed + 1)
        second = np.abs(
            0.1 / k * rng.standard_normal((self.n_filters2, self.n_filters1, k, k))
        )
        return self.theta_layout.pack([first, second])

    def project_theta(self, theta):
        first, second = self.theta_layout.unpack(np.asarray(theta, dtype=np.float64))
        return self.theta_layout.pack([first, np.maximum(second, 0.0)])

    def build(self, theta, pair):
        theta = np.asarray(theta, dtype=np.float64)
        theta_v, theta_w = self.theta_layout.unpack(theta)
        height, width = pair.corrupted.shape
        m1 = self.n_filters1
        v_op = FilterBank2D(theta_v, (height, width))
        w_op = ConvLayer2D(theta_w, (height, width))
        norm_v = self._bank_norm(v_op, theta_v)
        norm_w = self._bank_norm(w_op, theta_w)
        in_shapes = [(height, width), (m1, height, width)]
        out_shapes = [
            (height, width),
            (2, m1, height, width),
            (self.n_filters2, height, width),
        ]
        blocks = [
            [IdentityOp((height, width)), None],
            [_PairSlotOp(v_op, 0), _PairSlotOp(IdentityOp((m1, height, width)), 1)],
            [None, w_op],
        ]
        k_tot = BlockMatrixOp(blocks, in_shapes, out_shapes)
        # rows act on disjoint inputs: ||K_tot||^2 <= 1 + max(||V||, ||W||)^2
        k_tot._norm_est = float(np.sqrt(1.0 + max(norm_v, norm_w) ** 2))
        in_layout = k_tot.in_layout
        out_layout = k_tot.out_layout
        g = ConcatBundle(
            [
                QuadraticBundle(np.zeros((height, width)), self.mu_g),
                QuadraticBundle(np.zeros((m1, height, width)), self.mu_z),
            ],
            in_shapes,
        )
        fstar = ConcatBundle(
            [
                QuadraticBundle(-pair.corrupted, 1.0),
                EpigraphSupportBundle(self.w, (2, m1, height, width), self.mu_reg),
                BoxQuadraticBundle(self.w / self.gamma, self.gamma, out_shapes[2]),
            ],
            out_shapes,
        )
        spec = SaddleSpec(k_tot, g, fstar)

        def theta_grad(primal, dual):
            x_part, z_part = in_layout.unpack(primal)
            parts = out_layout.unpack(dual)
            grad_v = v_op.kernel_gradient(x_part, parts[1][0])
            grad_w = w_op.kernel_gradient(z_part, parts[2])
            return self.theta_layout.pack([grad_v, grad_w])

        z0 = psi_w(v_op.apply(pair.corrupted), self.w)
        x0 = in_layout.pack([pair.corrupted, z0])
        inst = ProblemInstance(
            spec=spec,
            loss1=SquaredLoss(pair.clean, layout=in_layout, block=0),
            loss2=ZeroLoss(),
            theta_grad=theta_grad,
            param_adjoint_norm=self._param_norm(
                (height, width), self.kernel_size, self.kernel_size
            ),
            initial_state=(x0, out_layout.zeros()),
            extract_image=lambda p: in_layout.unpack(p)[0],
            heuristic=True,
        )

        def lift_feasible(primal):
            """Raise z onto the rectifier epigraph for reporting."""
            x_part, z_part = in_layout.unpack(primal)
            z_ok = np.maximum(z_part, psi_w(v_op.apply(x_part), self.w))
            return in_layout.pack([x_part, z_ok])

        inst.lift_feasible = lift_feasible
        inst.v_op = v_op
        return inst


def icnn2_make(gamma, mu_g=1.0, w=0.01, layer_dims=(16, 4), **kwargs):
    return ICNN2Problem(gamma=gamma, mu_g=mu_g, w=w, n_filters1=layer_dims[0],
                        n_filters2=layer_dims[1], **kwargs)


PROBLEM_KINDS = {
    "quadratic": QuadraticProblem,
    "tvdisc": TVDiscretizationProblem,
    "foe": FoEProblem,
    "icnn2": ICNN2Problem,
}


def make_problem(kind, **params):
    try:
        cls = PROBLEM_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown problem kind: {kind!r}") from None
    return cls(**params)


def dense_saddle_solution(spec):
    """Dense (x_hat, y_hat) for specs with quadratic g and f* bundles."""
    g, fstar = spec.g, spec.fstar
    if not isinstance(g, QuadraticBundle) or not isinstance(fstar, QuadraticBundle):
        raise OracleSizeError("dense saddle oracle needs quadratic bundles")
    kmat = op_to_matrix(spec.k_op)
    n = kmat.shape[1]
    if n > 8 * ORACLE_MAX_PIXELS:
        raise OracleSizeError("operator too large to densify")
    lhs = g.weight * np.eye(n) + kmat.T @ kmat / fstar.weight
    rhs = g.weight * g.center.ravel() - kmat.T @ fstar.center.ravel()
    x_hat = np.linalg.solve(lhs, rhs)
    y_hat = kmat @ x_hat / fstar.weight + fstar.center.ravel()
    return x_hat.reshape(spec.k_op.in_shape), y_hat.reshape(spec.k_op.out_shape)


def dense_adjoint_solution(aspec):
    """Dense (X_bar, Y_bar) of the adjoint problem, bundle-agnostic.

    Materializes the Hessians by applying them to basis vectors, so it
    is restricted to small instances.
    """
    kmat = op_to_matrix(aspec.k_op)
    m, n = kmat.shape
    if max(m, n) > 8 * ORACLE_MAX_PIXELS:
        raise OracleSizeError("operator too large to densify")

    def densify_hess(bundle, point, dim, shape):
        mat = np.zeros((dim, dim))
        basis = np.zeros(dim)
        for j in range(dim):
            basis[j] = 1.0
            mat[:, j] = bundle.hess_apply(point, basis.reshape(shape)).ravel()
            basis[j] = 0.0
        return mat

    h_g = densify_hess(aspec.g, aspec.hx, n, aspec.k_op.in_shape)
    h_f = densify_hess(aspec.fstar, aspec.hy, m, aspec.k_op.out_shape)
    h_f_inv = np.linalg.inv(h_f)
    b1 = h_g + kmat.T @ h_f_inv @ kmat
    rhs = -(aspec.grad_l1.ravel() + kmat.T @ h_f_inv @ aspec.grad_l2.ravel())
    x_bar = np.linalg.solve(b1, rhs)
    y_bar = h_f_inv @ (kmat @ x_bar + aspec.grad_l2.ravel())
    return x_bar.reshape(aspec.k_op.in_shape), y_bar.reshape(aspec.k_op.out_shape)
