"""Bilevel learning of linear-operator regularizers via primal-dual
differentiation, with computable a-posteriori hypergradient error bounds
and an adaptively inexact descent loop."""

from .bundles import (
    BoxQuadraticBundle,
    ConcatBundle,
    FunctionBundle,
    GroupNormBundle,
    LossBundle,
    QuadraticBundle,
    SquaredLoss,
    ZeroLoss,
    hessian_lipschitz_self,
    psi_w,
    quadratic_bundle,
    smoothed_group_norm_bundle,
)
from .estimator import BilevelDenoiser, check_image_stack
from .hypergrad import (
    BoundConstants,
    PiggybackResult,
    batch_hypergradient,
    bound_constants,
    hypergradient_bound,
    inexact_piggyback,
)
from .imaging import add_gaussian_noise, load_pgm, psnr, save_pgm, ssim, synthetic_image
from .linops import (
    BlockMatrixOp,
    ConvLayer2D,
    FilterBank2D,
    Grad2D,
    IdentityOp,
    LinOp,
    MatrixOp,
    power_norm_estimate,
)
from .maid import MaidConfig, MaidResult, maid_run, nonadaptive_run, psi_value
from .problems import (
    FoEProblem,
    ICNN2Problem,
    QuadraticProblem,
    TrainingPair,
    TVDiscretizationProblem,
    foe_make,
    icnn2_make,
    make_problem,
    quadratic_make,
    tvdisc_make,
)
from .adjoint import AdjointSpec, adjoint_residual_X, adjoint_residual_Y, build_adjoint, solve_adjoint
from .saddle import (
    SaddleSpec,
    dual_residual_bound,
    pdhg_init,
    pdhg_iterate,
    primal_residual_bound,
    solve_saddle,
)
from .tensorio import load_f64t, save_csv, save_f64t

__version__ = "0.1.0"
