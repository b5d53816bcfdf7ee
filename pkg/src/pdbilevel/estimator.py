"""Scikit-learn style estimator wrapping the bilevel training loop.

``BilevelDenoiser.fit`` learns filter kernels from clean/noisy image
pairs by adaptive inexact descent; ``transform`` denoises images by
solving the learned variational problem.  The class follows the
estimator contract (``get_params``/``set_params``, fitted attributes
with trailing underscores) so it composes with pipelines and model
selection utilities.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .hypergrad import inexact_piggyback
from .imaging import add_gaussian_noise, psnr
from .maid import MaidConfig, maid_run
from .problems import TrainingPair, make_problem
from .saddle import solve_saddle


def check_image_stack(X, name="X"):
    """Validate and coerce input to a float64 (n_images, H, W) stack."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"{name} must be one image or a stack, got shape {X.shape}")
    if X.shape[1] < 1 or X.shape[2] < 1:
        raise ValueError(f"{name} has empty images: {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


class BilevelDenoiser(BaseEstimator, TransformerMixin):
    """Learns a linear-operator regularizer for denoising, end to end.

    Parameters mirror the problem factories and the descent loop; see
    ``pdbilevel.problems`` for the model zoo.  When ``fit`` receives
    only clean images, corrupted observations are synthesized with
    Gaussian noise of ``noise_sigma`` using the package PRNG, so runs
    are reproducible across platforms.

    Attributes
    ----------
    filters_ : ndarray
        Learned kernel parameters.
    history_ : list of LogRow
        One row per backtracking attempt.
    budget_rows_ : list of (cumulative_lower_iters, loss_upper_bound)
        Accepted-step loss curve for budget plots.
    lower_iters_ : int
        Total lower-level PDHG iterations spent during fit.
    """

    def __init__(self, problem="tvdisc", n_filters=8, kernel_size=5,
                 lambda_reg=20.0, gamma=1.0, mu_g=1.0, eps_smooth=1e-3,
                 w_smooth=0.01, mu_q=1e-2, mu_fstar=1e-2, nonsmooth_tv=False,
                 noise_sigma=25.5, noise_seed=0, init_seed=0,
                 alpha0=1e-2, eps0=1.0, delta0=1.0, rho_down=0.5,
                 rho_up=10.0 / 9.0, nu_down=0.5, nu_up=1.05, max_bt=5,
                 lambda_armijo=1e-4, max_outer=30, budget_cap=None,
                 transform_tol=1e-3):
        self.problem = problem
        self.n_filters = n_filters
        self.kernel_size = kernel_size
        self.lambda_reg = lambda_reg
        self.gamma = gamma
        self.mu_g = mu_g
        self.eps_smooth = eps_smooth
        self.w_smooth = w_smooth
        self.mu_q = mu_q
        self.mu_fstar = mu_fstar
        self.nonsmooth_tv = nonsmooth_tv
        self.noise_sigma = noise_sigma
        self.noise_seed = noise_seed
        self.init_seed = init_seed
        self.alpha0 = alpha0
        self.eps0 = eps0
        self.delta0 = delta0
        self.rho_down = rho_down
        self.rho_up = rho_up
        self.nu_down = nu_down
        self.nu_up = nu_up
        self.max_bt = max_bt
        self.lambda_armijo = lambda_armijo
        self.max_outer = max_outer
        self.budget_cap = budget_cap
        self.transform_tol = transform_tol

    def _make_factory(self):
        kind = self.problem
        if kind == "quadratic":
            return make_problem(
                kind, mu_g=self.mu_g, mu_fstar=self.mu_fstar,
                n_filters=self.n_filters, kernel_size=self.kernel_size,
            )
        if kind == "tvdisc":
            return make_problem(
                kind, lambda_reg=self.lambda_reg, mu_g=self.mu_g,
                eps_s=self.eps_smooth, n_filters=self.n_filters,
                kernel_size=self.kernel_size, mu_q=self.mu_q,
                mu_fstar=self.mu_fstar, nonsmooth=self.nonsmooth_tv,
            )
        if kind == "foe":
            return make_problem(
                kind, gamma=self.gamma, mu_g=self.mu_g, w=self.w_smooth,
                n_filters=self.n_filters, kernel_size=self.kernel_size,
            )
        if kind == "icnn2":
            return make_problem(
                kind, gamma=self.gamma, mu_g=self.mu_g, w=self.w_smooth,
                n_filters1=self.n_filters, kernel_size=self.kernel_size,
            )
        raise ValueError(f"unknown problem kind: {kind!r}")

    def _maid_config(self):
        return MaidConfig(
            rho_down=self.rho_down, rho_up=self.rho_up, nu_down=self.nu_down,
            nu_up=self.nu_up, max_bt=self.max_bt, lam=self.lambda_armijo,
            alpha0=self.alpha0, eps_x0=self.eps0, eps_y0=self.eps0,
            delta_x0=self.delta0, delta_y0=self.delta0,
            max_outer=self.max_outer, budget_cap=self.budget_cap,
        )

    def fit(self, X, y=None):
        """Learn filters from noisy images X and clean targets y.

        With y=None, X is treated as the clean set and observations are
        synthesized by adding Gaussian noise.
        """
        X = check_image_stack(X)
        if y is None:
            clean = X
            corrupted = np.stack(
                [
                    add_gaussian_noise(img, self.noise_sigma, self.noise_seed + i)
                    for i, img in enumerate(clean)
                ]
            )
        else:
            corrupted = X
            clean = check_image_stack(y, "y")
            if clean.shape != corrupted.shape:
                raise ValueError("X and y must have matching shapes")
        pairs = [
            TrainingPair(c, n, noise_seed=self.noise_seed + i)
            for i, (c, n) in enumerate(zip(clean, corrupted))
        ]
        factory = self._make_factory()
        theta0 = factory.init_theta(self.init_seed)
        result = maid_run(self._maid_config(), factory, theta0, pairs)
        self.factory_ = factory
        self.filters_ = result.theta
        self.history_ = result.history
        self.budget_rows_ = result.budget_rows
        self.lower_iters_ = result.cumulative_lower_iters
        self.status_ = result.status
        self.n_accepted_ = result.accepted_steps
        return self

    def _check_fitted(self):
        if not hasattr(self, "filters_"):
            raise NotFittedError("BilevelDenoiser must be fitted before use")

    def transform(self, X):
        """Denoise images by solving the lower-level problem at filters_."""
        self._check_fitted()
        X = check_image_stack(X)
        out = np.empty_like(X)
        for i, img in enumerate(X):
            pair = TrainingPair(img, img)  # target unused during solve
            inst = self.factory_.build(self.filters_, pair)
            tol = self.transform_tol
            x, _, _ = solve_saddle(inst.spec, tol, tol, warm=inst.initial_state())
            out[i] = inst.extract_image(x)
        return out

    def hypergradient(self, X, y, tol=1e-6):
        """Diagnostic: batch hypergradient with its error bound at filters_."""
        self._check_fitted()
        corrupted = check_image_stack(X)
        clean = check_image_stack(y, "y")
        results = [
            inexact_piggyback(
                self.factory_, self.filters_, TrainingPair(c, n), tol, tol, tol, tol
            )
            for c, n in zip(clean, corrupted)
        ]
        z = np.mean([r.z_theta for r in results], axis=0)
        bound = float(np.mean([r.bound_theta for r in results]))
        return z, bound

    def score(self, X, y):
        """Mean PSNR of the reconstructions against clean references."""
        recon = self.transform(X)
        clean = check_image_stack(y, "y")
        return float(np.mean([psnr(r, c) for r, c in zip(recon, clean)]))
