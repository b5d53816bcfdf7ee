"""Convex-function capsules used by the saddle-point machinery.

A :class:`FunctionBundle` packages value, gradient, prox, conjugate
gradient, Hessian actions and the convexity/smoothness constants the
error bounds consume.  All shipped bundles have closed-form proxes and
per-group (diagonal or rank-one-corrected) Hessians, so every Hessian
solve here is exact.
"""

import numpy as np

from .errors import DimensionError, ParameterError
from .linops import BlockLayout

# Lipschitz bound for the Hessian of sqrt(1 + |p|^2).  Sampled supremum
# over 1-3d sections (rotational symmetry makes low dimensions
# exhaustive) is 0.859; 3.0 leaves a wide margin.
_SQRT1P_HESS_LIP = 3.0


def psi_w(x, w, order=0):
    """One-sided Huber rectifier with smoothing width w.

    order 0/1/2 selects value, first or second derivative, elementwise.
    Second-derivative values at the breakpoints take the left limit
    (0 at x=0, 1/w at x=w) for determinism.
    """
    if w <= 0:
        raise ParameterError("psi_w requires w > 0")
    x = np.asarray(x, dtype=np.float64)
    if order == 0:
        return np.where(x <= 0, 0.0, np.where(x < w, x * x / (2.0 * w), x - w / 2.0))
    if order == 1:
        return np.clip(x / w, 0.0, 1.0)
    if order == 2:
        return np.where((x > 0) & (x <= w), 1.0 / w, 0.0)
    raise ParameterError(f"psi_w order must be 0, 1 or 2, got {order}")


class FunctionBundle:
    """Interface: value/grad/prox/conj_grad plus Hessian actions.

    Constants: ``mu`` (strong convexity), ``l_grad`` (gradient
    Lipschitz), ``l_hess_conj`` (Lipschitz constant of the conjugate's
    Hessian).  ``heuristic`` marks bundles whose constants or Hessian
    selections are surrogates rather than certified values.
    """

    mu = 0.0
    l_grad = np.inf
    l_hess_conj = np.inf
    heuristic = False

    def value(self, x):
        raise NotImplementedError

    def grad(self, x):
        raise NotImplementedError

    def prox(self, tau, p):
        raise NotImplementedError

    def conj_grad(self, v):
        raise NotImplementedError

    def hess_apply(self, point, d):
        raise NotImplementedError

    def hess_inv_apply(self, point, d):
        raise NotImplementedError

    def hess_shift_solve(self, point, tau, r):
        """Solve (I + tau * hess(point)) v = r."""
        raise NotImplementedError

    def subgrad_residual(self, point, target):
        """xi - target for the subgradient xi at ``point`` closest to ``target``.

        Residual bounds stay valid for any subgradient selection, but only
        the minimal-residual selection vanishes at points where the
        subdifferential is set-valued (active constraints, norm kinks).
        Smooth bundles use the gradient.
        """
        return self.grad(point) - target

    def supports_hessian(self):
        """True when Hessian apply/inverse actions are implemented."""
        return type(self).hess_inv_apply is not FunctionBundle.hess_inv_apply


def hessian_lipschitz_self(bundle):
    """Lipschitz constant of the bundle's own Hessian.

    Propagated from the conjugate: a mu-strongly convex, L-smooth h with
    C^{1,1} conjugate Hessian has nabla^2 h Lipschitz with constant
    l_hess_conj * l_grad^3.
    """
    return bundle.l_hess_conj * bundle.l_grad**3


class QuadraticBundle(FunctionBundle):
    """x -> (weight/2) ||x - center||^2."""

    def __init__(self, center, weight):
        if weight <= 0:
            raise ParameterError("quadratic bundle requires weight > 0")
        self.center = np.asarray(center, dtype=np.float64)
        self.weight = float(weight)
        self.mu = self.weight
        self.l_grad = self.weight
        self.l_hess_conj = 0.0

    def value(self, x):
        d = x - self.center
        return 0.5 * self.weight * float(np.vdot(d, d))

    def grad(self, x):
        return self.weight * (x - self.center)

    def prox(self, tau, p):
        return (p + tau * self.weight * self.center) / (1.0 + tau * self.weight)

    def conj_grad(self, v):
        return v / self.weight + self.center

    def hess_apply(self, point, d):
        return self.weight * d

    def hess_inv_apply(self, point, d):
        return d / self.weight

    def hess_shift_solve(self, point, tau, r):
        return r / (1.0 + tau * self.weight)


def quadratic_bundle(center, weight):
    return QuadraticBundle(center, weight)


class GroupNormBundle(FunctionBundle):
    """q -> lam * sum_groups sqrt(||q_g||^2 + eps_s^2) + (mu_quad/2) ||q||^2.

    Groups run over ``group_axis``.  With eps_s > 0 the function is
    smooth and all constants are certified; eps_s == 0 gives the raw
    group norm with a generalized Hessian selection (zero at q_g = 0)
    and infinite smoothness constants, flagged heuristic.

    conj_grad and the Hessian inverses exist only when mu_quad > 0.
    """

    def __init__(self, lam, eps_s, shape, group_axis=0, mu_quad=0.0):
        if lam <= 0:
            raise ParameterError("group norm bundle requires lam > 0")
        if eps_s < 0:
            raise ParameterError("eps_s must be >= 0")
        if mu_quad < 0:
            raise ParameterError("mu_quad must be >= 0")
        self.lam = float(lam)
        self.eps = float(eps_s)
        self.shape = tuple(shape)
        self.axis = int(group_axis)
        self.mu = float(mu_quad)
        if self.eps > 0:
            self.l_grad = self.lam / self.eps + self.mu
            if self.mu > 0:
                hess_lip = self.lam * _SQRT1P_HESS_LIP / self.eps**2
                self.l_hess_conj = hess_lip / self.mu**3
            else:
                self.l_hess_conj = np.inf
        else:
            self.heuristic = True
            self.l_grad = np.inf
            self.l_hess_conj = np.inf

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.shape:
            raise DimensionError(f"expected shape {self.shape}, got {x.shape}")
        return x

    def _sigma(self, q):
        return np.sqrt(np.sum(q * q, axis=self.axis, keepdims=True) + self.eps**2)

    def value(self, q):
        q = self._check(q)
        sig = self._sigma(q)
        return self.lam * float(sig.sum()) + 0.5 * self.mu * float(np.vdot(q, q))

    def grad(self, q):
        q = self._check(q)
        sig = self._sigma(q)
        if self.eps > 0:
            return self.lam * q / sig + self.mu * q
        safe = np.where(sig > 0, sig, 1.0)
        return self.lam * np.where(sig > 0, q / safe, 0.0) + self.mu * q

    def prox(self, tau, p):
        p = self._check(p)
        m = np.sqrt(np.sum(p * p, axis=self.axis, keepdims=True))
        if self.eps == 0.0:
            scale = np.maximum(1.0 - tau * self.lam / np.where(m > 0, m, 1.0), 0.0)
            return scale * p / (1.0 + tau * self.mu)
        # radial Newton on r*(1 + tau*mu) + tau*lam*r/sqrt(r^2+eps^2) = m;
        # the residual is concave on r >= 0, so Newton clamped to r >= 0
        # converges monotonically from either side of the root
        r = m / (1.0 + tau * self.mu)
        for _ in range(60):
            sig = np.sqrt(r * r + self.eps**2)
            f = r * (1.0 + tau * self.mu) + tau * self.lam * r / sig - m
            df = (1.0 + tau * self.mu) + tau * self.lam * self.eps**2 / sig**3
            step = f / df
            r = np.maximum(r - step, 0.0)
            if np.all(np.abs(step) <= 1e-14 * (1.0 + np.abs(r))):
                break
        scale = np.where(m > 0, r / np.where(m > 0, m, 1.0), 0.0)
        return scale * p

    def conj_grad(self, v):
        if self.mu <= 0:
            raise ParameterError("conj_grad needs mu_quad > 0")
        v = self._check(v)
        m = np.sqrt(np.sum(v * v, axis=self.axis, keepdims=True))
        if self.eps == 0.0:
            r = np.maximum(m - self.lam, 0.0) / self.mu
        else:
            # invert m = r*(mu + lam/sqrt(r^2+eps^2)); concave on r >= 0,
            # clamped Newton as in prox
            r = m / self.mu
            for _ in range(60):
                sig = np.sqrt(r * r + self.eps**2)
                f = r * (self.mu + self.lam / sig) - m
                df = self.mu + self.lam * self.eps**2 / sig**3
                step = f / df
                r = np.maximum(r - step, 0.0)
                if np.all(np.abs(step) <= 1e-14 * (1.0 + np.abs(r))):
                    break
        scale = np.where(m > 0, r / np.where(m > 0, m, 1.0), 0.0)
        return scale * v

    def _coeffs(self, q):
        """Per-group (a, b) with hess = a I + b q q^T restricted to the group."""
        sig = self._sigma(q)
        if self.eps == 0.0:
            pos = sig > 0
            safe = np.where(pos, sig, 1.0)
            a = np.where(pos, self.lam / safe, 0.0) + self.mu
            b = np.where(pos, -self.lam / safe**3, 0.0)
        else:
            a = self.lam / sig + self.mu
            b = -self.lam / sig**3
        return a, b

    def hess_apply(self, point, d):
        point = self._check(point)
        d = self._check(d)
        a, b = self._coeffs(point)
        dot = np.sum(point * d, axis=self.axis, keepdims=True)
        return a * d + b * dot * point

    def hess_inv_apply(self, point, d):
        if self.mu <= 0:
            raise ParameterError("hess_inv_apply needs mu_quad > 0")
        point = self._check(point)
        d = self._check(d)
        a, b = self._coeffs(point)
        rsq = np.sum(point * point, axis=self.axis, keepdims=True)
        s = a + b * rsq  # equals mu + lam*eps^2/sigma^3 > 0
        dot = np.sum(point * d, axis=self.axis, keepdims=True)
        return d / a - (b * dot / (a * s)) * point

    def hess_shift_solve(self, point, tau, r):
        point = self._check(point)
        r = self._check(r)
        a, b = self._coeffs(point)
        rsq = np.sum(point * point, axis=self.axis, keepdims=True)
        big_a = 1.0 + tau * a
        big_s = big_a + tau * b * rsq
        dot = np.sum(point * r, axis=self.axis, keepdims=True)
        return r / big_a - (tau * b * dot / (big_a * big_s)) * point

    def supports_hessian(self):
        return self.mu > 0

    def subgrad_residual(self, point, target):
        if self.eps > 0:
            return self.grad(point) - target
        # raw norm: at a zero group the subdifferential is the lam-ball,
        # absorbing targets up to norm lam
        q = self._check(point)
        target = self._check(target)
        sig = self._sigma(q)
        res = self.grad(q) - target
        tnorm = np.sqrt(np.sum(target * target, axis=self.axis, keepdims=True))
        scale = np.maximum(1.0 - self.lam / np.where(tnorm > 0, tnorm, 1.0), 0.0)
        return np.where(sig > 0, res, -scale * target)


def smoothed_group_norm_bundle(eps_s, lam, shape, group_axis=0, mu_quad=0.0):
    if eps_s <= 0:
        raise ParameterError("smoothed group norm requires eps_s > 0")
    return GroupNormBundle(lam, eps_s, shape, group_axis, mu_quad)


class BoxQuadraticBundle(FunctionBundle):
    """y -> (curv/2) ||y||^2 on the box [0, upper]^m (+inf outside).

    This is the conjugate of v -> gamma * psi_w(v) summed elementwise,
    with curv = w / gamma and upper = gamma.  The prox is a clipped
    scaling.  Components sitting on a box face correspond to the flat or
    linear pieces of the rectifier: the conjugate curvature blows up
    there, so the Hessian uses a large surrogate (1/reg) and its inverse
    the frozen limit (reg ~ 0), which is what makes adjoint sensitivities
    of saturated components vanish as they should.
    """

    def __init__(self, curv, upper, shape, hess_reg=1e-6):
        if curv <= 0 or upper <= 0:
            raise ParameterError("box quadratic requires curv > 0 and upper > 0")
        self.curv = float(curv)
        self.upper = float(upper)
        self.shape = tuple(shape)
        self.hess_reg = float(hess_reg)
        self.mu = self.curv
        self.l_grad = self.curv
        # conjugate Hessian jumps at the Huber breakpoints; 1/(curv^2*upper)
        # treats the jump as spread over the smoothing width
        self.l_hess_conj = 1.0 / (self.curv**2 * self.upper)
        self.heuristic = True

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.shape:
            raise DimensionError(f"expected shape {self.shape}, got {x.shape}")
        return x

    def value(self, y):
        y = self._check(y)
        tol = 1e-9 * self.upper
        if np.any(y < -tol) or np.any(y > self.upper + tol):
            return np.inf
        return 0.5 * self.curv * float(np.vdot(y, y))

    def grad(self, y):
        return self.curv * self._check(y)

    def prox(self, tau, p):
        p = self._check(p)
        return np.clip(p / (1.0 + tau * self.curv), 0.0, self.upper)

    def conj_grad(self, v):
        v = self._check(v)
        return np.clip(v / self.curv, 0.0, self.upper)

    def _factors(self, point):
        boundary = (point <= 0.0) | (point >= self.upper)
        return np.where(boundary, max(self.curv, 1.0 / self.hess_reg), self.curv)

    def hess_apply(self, point, d):
        return self._factors(self._check(point)) * self._check(d)

    def hess_inv_apply(self, point, d):
        return self._check(d) / self._factors(self._check(point))

    def hess_shift_solve(self, point, tau, r):
        return self._check(r) / (1.0 + tau * self._factors(self._check(point)))

    def subgrad_residual(self, point, target):
        # at the box faces the subdifferential curv*y + normal cone absorbs
        # any one-sided excess of the target
        y = self._check(point)
        target = self._check(target)
        res = self.curv * y - target
        res = np.where((y <= 0.0) & (res > 0.0), 0.0, res)
        res = np.where((y >= self.upper) & (res < 0.0), 0.0, res)
        return res


class EpigraphSupportBundle(FunctionBundle):
    """Regularized support function of C = epi(psi_w) on paired variables.

    Acts on arrays of shape (2, ...): component 0 pairs with the
    pre-activation argument, component 1 with the epigraph variable.
    The function is f2*(y) + (mu_reg/2)||y||^2 where f2 is the indicator
    of C, i.e. the conjugate of the Moreau envelope of that indicator.
    The prox is exact via projection onto C (1-d bisection on the psi_w
    graph); gradient and Hessian use surrogate selections, so the bundle
    is flagged heuristic.
    """

    def __init__(self, w, shape, mu_reg=1e-3):
        if w <= 0 or mu_reg <= 0:
            raise ParameterError("epigraph support bundle requires w > 0, mu_reg > 0")
        if shape[0] != 2:
            raise DimensionError("paired variable must have leading axis 2")
        self.w = float(w)
        self.shape = tuple(shape)
        self.mu = float(mu_reg)
        self.l_grad = np.inf
        self.l_hess_conj = np.inf
        self.heuristic = True

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.shape:
            raise DimensionError(f"expected shape {self.shape}, got {x.shape}")
        return x

    def project_epigraph(self, a, b):
        """Componentwise Euclidean projection of (a, b) onto epi(psi_w)."""
        vals = psi_w(a, self.w)
        infeasible = vals > b
        pa = a.copy()
        pb = np.maximum(b, 0.0)
        if not np.any(infeasible):
            return pa, pb
        ai = a[infeasible]
        bi = b[infeasible]
        # projection lands on the graph q = psi_w(p); the root of
        # G(p) = p - a + psi_w'(p) (psi_w(p) - b) is bracketed by
        # [a - (psi_w(a) - b), a] with G <= 0 on the left end
        lo = ai - (vals[infeasible] - bi)
        hi = ai.copy()
        for _ in range(55):
            mid = 0.5 * (lo + hi)
            g = mid - ai + psi_w(mid, self.w, 1) * (psi_w(mid, self.w) - bi)
            neg = g <= 0
            lo = np.where(neg, mid, lo)
            hi = np.where(neg, hi, mid)
        p = 0.5 * (lo + hi)
        pa[infeasible] = p
        pb[infeasible] = psi_w(p, self.w)
        return pa, pb

    def _support_point(self, y):
        """A maximizer of <c, y> over C (subgradient of the support function)."""
        s, t = y[0], y[1]
        denom = np.maximum(-t, 1e-300)
        slope = np.clip(s / denom, 0.0, 1.0)
        p = self.w * slope
        return np.stack([p, psi_w(p, self.w)])

    def value(self, y):
        y = self._check(y)
        s, t = y[0], y[1]
        scale = 1.0 + float(np.max(np.abs(y), initial=1.0))
        tol = 1e-9 * scale
        if np.any(t > tol) or np.any(s < -tol) or np.any(s + t > tol):
            return np.inf
        denom = np.maximum(-t, 1e-300)
        sup = np.sum(denom * 0.5 * self.w * np.clip(s / denom, 0.0, 1.0) ** 2)
        return float(sup) + 0.5 * self.mu * float(np.vdot(y, y))

    def grad(self, y):
        y = self._check(y)
        return self.mu * y + self._support_point(y)

    def prox(self, tau, p):
        p = self._check(p)
        shrunk = p / (1.0 + tau * self.mu)
        sigma = tau / (1.0 + tau * self.mu)
        a, b = shrunk[0] / sigma, shrunk[1] / sigma
        pa, pb = self.project_epigraph(a, b)
        proj = np.stack([pa, pb])
        return shrunk - sigma * proj

    def conj_grad(self, v):
        # conjugate is the Moreau envelope of the indicator of C:
        # gradient (v - proj_C(v)) / mu_reg, exact
        v = self._check(v)
        pa, pb = self.project_epigraph(v[0], v[1])
        return (v - np.stack([pa, pb])) / self.mu

    def hess_apply(self, point, d):
        return self.mu * self._check(d)

    def hess_inv_apply(self, point, d):
        return self._check(d) / self.mu

    def hess_shift_solve(self, point, tau, r):
        return self._check(r) / (1.0 + tau * self.mu)

    def subgrad_residual(self, point, target):
        # the support-function subdifferential is the optimal face of C;
        # pick the face point closest to the target remainder
        y = self._check(point)
        target = self._check(target)
        s, t = y[0], y[1]
        rem = target - self.mu * y
        a, b = rem[0], rem[1]
        denom = np.maximum(-t, 1e-300)
        slope = s / denom
        p_mid = self.w * np.clip(slope, 0.0, 1.0)
        # upper face: any p >= w on the linear branch q = p - w/2
        p_hi = np.maximum(0.5 * (a + b + 0.5 * self.w), self.w)
        # lower face: any p <= 0 with q = 0
        p_lo = np.minimum(a, 0.0)
        # tolerance bands absorb float noise in the face classification
        band = 1e-7
        p = np.where(slope >= 1.0 - band, p_hi,
                     np.where(slope <= band, p_lo, p_mid))
        c_first = p
        c_second = psi_w(p, self.w)
        # pairs at the cone apex (inactive constraints land there exactly):
        # the subdifferential is all of C, so project the remainder onto it
        scale = 1.0 + float(np.max(np.abs(y), initial=0.0))
        apex = (np.abs(s) <= 1e-10 * scale) & (np.abs(t) <= 1e-10 * scale)
        if np.any(apex):
            pa, pb = self.project_epigraph(a, b)
            c_first = np.where(apex, pa, c_first)
            c_second = np.where(apex, pb, c_second)
        c = np.stack([c_first, c_second])
        return self.mu * y + c - target


class ConcatBundle(FunctionBundle):
    """Block-separable sum of bundles over a packed flat variable."""

    def __init__(self, bundles, shapes):
        if len(bundles) != len(shapes):
            raise DimensionError("one shape per bundle required")
        self.bundles = list(bundles)
        self.layout = BlockLayout(shapes)
        self.mu = min(b.mu for b in bundles)
        self.l_grad = max(b.l_grad for b in bundles)
        self.l_hess_conj = max(b.l_hess_conj for b in bundles)
        self.heuristic = any(b.heuristic for b in bundles)

    def _parts(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.layout.total,):
            raise DimensionError(f"expected flat length {self.layout.total}")
        return self.layout.unpack(x)

    def value(self, x):
        return float(sum(b.value(p) for b, p in zip(self.bundles, self._parts(x))))

    def grad(self, x):
        return self.layout.pack(
            [b.grad(p) for b, p in zip(self.bundles, self._parts(x))]
        )

    def prox(self, tau, p):
        return self.layout.pack(
            [b.prox(tau, q) for b, q in zip(self.bundles, self._parts(p))]
        )

    def conj_grad(self, v):
        return self.layout.pack(
            [b.conj_grad(p) for b, p in zip(self.bundles, self._parts(v))]
        )

    def hess_apply(self, point, d):
        return self.layout.pack(
            [
                b.hess_apply(p, q)
                for b, p, q in zip(self.bundles, self._parts(point), self._parts(d))
            ]
        )

    def hess_inv_apply(self, point, d):
        return self.layout.pack(
            [
                b.hess_inv_apply(p, q)
                for b, p, q in zip(self.bundles, self._parts(point), self._parts(d))
            ]
        )

    def hess_shift_solve(self, point, tau, r):
        return self.layout.pack(
            [
                b.hess_shift_solve(p, tau, q)
                for b, p, q in zip(self.bundles, self._parts(point), self._parts(r))
            ]
        )

    def supports_hessian(self):
        return all(b.supports_hessian() for b in self.bundles)

    def subgrad_residual(self, point, target):
        return self.layout.pack(
            [
                b.subgrad_residual(p, q)
                for b, p, q in zip(self.bundles, self._parts(point), self._parts(target))
            ]
        )


class LossBundle:
    """Upper-level loss piece: value, gradient, smoothness constant."""

    l_smooth = 0.0

    def value(self, x):
        raise NotImplementedError

    def grad(self, x):
        raise NotImplementedError


class SquaredLoss(LossBundle):
    """x -> 0.5 ||x - target||^2, optionally restricted to one packed block."""

    l_smooth = 1.0

    def __init__(self, target, layout=None, block=0):
        self.target = np.asarray(target, dtype=np.float64)
        self.layout = layout
        self.block = block

    def _part(self, x):
        if self.layout is None:
            return x
        return self.layout.unpack(x)[self.block]

    def value(self, x):
        d = self._part(x) - self.target
        return 0.5 * float(np.vdot(d, d))

    def grad(self, x):
        if self.layout is None:
            return x - self.target
        out = np.zeros_like(x)
        self.layout.unpack(out)[self.block][...] = self._part(x) - self.target
        return out


class ZeroLoss(LossBundle):
    l_smooth = 0.0

    def value(self, x):
        return 0.0

    def grad(self, x):
        return np.zeros_like(x)
