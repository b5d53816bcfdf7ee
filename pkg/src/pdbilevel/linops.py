"""Matrix-free linear operators.

All operators expose ``apply``/``adjoint_apply`` plus shape metadata and a
cached conservative spectral-norm estimate.  Convolutions use correlation
orientation (no kernel flip) with Neumann (replicate-edge) boundary
handling, so outputs keep the input's spatial size; adjoints accumulate
the replicated borders back into edge cells.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError
from .rng import Xoshiro256StarStar

NORM_SAFETY = 1.01
NORM_POWER_ITERS = 200


def power_norm_raw(op, iters, seed=0):
    """Plain power-method estimate of the operator 2-norm.

    Deterministic given ``seed``; returns 0.0 for the zero operator.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = Xoshiro256StarStar(seed)
    v = rng.standard_normal(op.in_shape)
    nv = np.linalg.norm(v)
    if nv == 0.0:
        return 0.0
    v /= nv
    for _ in range(iters):
        w = op.adjoint_apply(op.apply(v))
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
    return float(np.linalg.norm(op.apply(v)))


def power_norm_estimate(op, iters=NORM_POWER_ITERS, seed=0):
    """Power-method norm estimate inflated by 1.01 for conservatism."""
    return NORM_SAFETY * power_norm_raw(op, iters, seed)


class LinOp:
    """Base class: linear map with adjoint and cached norm estimate."""

    def __init__(self, in_shape, out_shape):
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(out_shape)
        self._norm_est = None

    def _forward(self, x):
        raise NotImplementedError

    def _adjoint(self, y):
        raise NotImplementedError

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.in_shape:
            raise DimensionError(
                f"{type(self).__name__}.apply: got {x.shape}, expected {self.in_shape}"
            )
        return self._forward(x)

    def adjoint_apply(self, y):
        y = np.asarray(y, dtype=np.float64)
        if y.shape != self.out_shape:
            raise DimensionError(
                f"{type(self).__name__}.adjoint_apply: got {y.shape}, "
                f"expected {self.out_shape}"
            )
        return self._adjoint(y)

    @property
    def norm_est(self):
        if self._norm_est is None:
            self._norm_est = power_norm_estimate(self)
        return self._norm_est


class IdentityOp(LinOp):
    def __init__(self, shape):
        super().__init__(shape, shape)

    def _forward(self, x):
        return x.copy()

    def _adjoint(self, y):
        return y.copy()


class ScaledOp(LinOp):
    """c * inner."""

    def __init__(self, inner, c):
        super().__init__(inner.in_shape, inner.out_shape)
        self.inner = inner
        self.c = float(c)

    def _forward(self, x):
        return self.c * self.inner.apply(x)

    def _adjoint(self, y):
        return self.c * self.inner.adjoint_apply(y)


class ZeroOp(LinOp):
    def __init__(self, in_shape, out_shape):
        super().__init__(in_shape, out_shape)
        self._norm_est = 0.0

    def _forward(self, x):
        return np.zeros(self.out_shape)

    def _adjoint(self, y):
        return np.zeros(self.in_shape)


class TransposedOp(LinOp):
    """Swaps forward and adjoint of the wrapped operator."""

    def __init__(self, inner):
        super().__init__(inner.out_shape, inner.in_shape)
        self.inner = inner

    def _forward(self, x):
        return self.inner.adjoint_apply(x)

    def _adjoint(self, y):
        return self.inner.apply(y)

    @property
    def norm_est(self):
        return self.inner.norm_est


class CompositionOp(LinOp):
    """outer(inner(x))."""

    def __init__(self, outer, inner):
        if inner.out_shape != outer.in_shape:
            raise DimensionError("composition shape mismatch")
        super().__init__(inner.in_shape, outer.out_shape)
        self.outer = outer
        self.inner = inner

    def _forward(self, x):
        return self.outer.apply(self.inner.apply(x))

    def _adjoint(self, y):
        return self.inner.adjoint_apply(self.outer.adjoint_apply(y))


class MatrixOp(LinOp):
    """Dense matrix as an operator on 1-d vectors (small problems, oracles)."""

    def __init__(self, matrix):
        matrix = np.asarray(matrix, dtype=np.float64)
        super().__init__((matrix.shape[1],), (matrix.shape[0],))
        self.matrix = matrix

    def _forward(self, x):
        return self.matrix @ x

    def _adjoint(self, y):
        return self.matrix.T @ y


class Grad2D(LinOp):
    """Forward differences on an H-by-W grid, Neumann boundary.

    Output channel 0 is the vertical difference, channel 1 horizontal;
    the last row/column of each channel is zero (replicated edge).
    The adjoint is the negative divergence.
    """

    def __init__(self, height, width):
        super().__init__((height, width), (2, height, width))

    def _forward(self, x):
        out = np.zeros(self.out_shape)
        out[0, :-1, :] = x[1:, :] - x[:-1, :]
        out[1, :, :-1] = x[:, 1:] - x[:, :-1]
        return out

    def _adjoint(self, y):
        out = np.zeros(self.in_shape)
        out[:-1, :] -= y[0, :-1, :]
        out[1:, :] += y[0, :-1, :]
        out[:, :-1] -= y[1, :, :-1]
        out[:, 1:] += y[1, :, :-1]
        return out


def _pad_edge(x, kh, kw):
    ph = ((kh - 1) // 2, kh - 1 - (kh - 1) // 2)
    pw = ((kw - 1) // 2, kw - 1 - (kw - 1) // 2)
    pad = [(0, 0)] * (x.ndim - 2) + [ph, pw]
    return np.pad(x, pad, mode="edge")


def _fold_edge_adjoint(acc, height, width, kh, kw):
    """Adjoint of replicate-edge padding: sums duplicated borders back."""
    ph0 = (kh - 1) // 2
    pw0 = (kw - 1) // 2
    r = acc[..., ph0:ph0 + height, :].copy()
    if ph0 > 0:
        r[..., 0, :] += acc[..., :ph0, :].sum(axis=-2)
    if kh - 1 - ph0 > 0:
        r[..., height - 1, :] += acc[..., ph0 + height:, :].sum(axis=-2)
    out = r[..., :, pw0:pw0 + width].copy()
    if pw0 > 0:
        out[..., :, 0] += r[..., :, :pw0].sum(axis=-1)
    if kw - 1 - pw0 > 0:
        out[..., :, width - 1] += r[..., :, pw0 + width:].sum(axis=-1)
    return out


class FilterBank2D(LinOp):
    """Bank of 2-d correlation filters applied to every input channel.

    ``theta`` has shape (n_filters, kh, kw).  Input (H, W) maps to
    (n_filters, H, W); input (C, H, W) maps to (n_filters, C, H, W),
    each filter acting on each channel independently.  The induced map
    is linear in ``theta``, and ``kernel_gradient`` realizes the adjoint
    of that linearity.
    """

    def __init__(self, theta, image_shape, channels=0):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.ndim != 3:
            raise DimensionError("theta must have shape (n_filters, kh, kw)")
        height, width = image_shape
        self.theta = theta
        self.channels = int(channels)
        self.image_shape = (height, width)
        n = theta.shape[0]
        if channels:
            in_shape = (channels, height, width)
            out_shape = (n, channels, height, width)
        else:
            in_shape = (height, width)
            out_shape = (n, height, width)
        super().__init__(in_shape, out_shape)

    @property
    def kernel_shape(self):
        return self.theta.shape

    def _forward(self, x):
        kh, kw = self.theta.shape[1:]
        height, width = self.image_shape
        padded = _pad_edge(x, kh, kw)
        win = sliding_window_view(padded, (height, width), axis=(-2, -1))
        if self.channels:
            # win: (C, kh, kw, H, W) -> out (n, C, H, W)
            return np.tensordot(self.theta, win, axes=([1, 2], [1, 2]))
        # win: (kh, kw, H, W) -> out (n, H, W)
        return np.tensordot(self.theta, win, axes=([1, 2], [0, 1]))

    def _adjoint(self, y):
        kh, kw = self.theta.shape[1:]
        height, width = self.image_shape
        # coeff[a, b] = sum_f theta[f, a, b] * y[f]
        coeff = np.tensordot(self.theta, y, axes=([0], [0]))
        if self.channels:
            acc = np.zeros((self.channels, height + kh - 1, width + kw - 1))
        else:
            acc = np.zeros((height + kh - 1, width + kw - 1))
        for a in range(kh):
            for b in range(kw):
                acc[..., a:a + height, b:b + width] += coeff[a, b]
        return _fold_edge_adjoint(acc, height, width, kh, kw)

    def kernel_gradient(self, xin, yout):
        """Gradient of theta -> <bank(theta) xin, yout> at the current shape."""
        xin = np.asarray(xin, dtype=np.float64)
        yout = np.asarray(yout, dtype=np.float64)
        if xin.shape != self.in_shape or yout.shape != self.out_shape:
            raise DimensionError("kernel_gradient operand shape mismatch")
        kh, kw = self.theta.shape[1:]
        height, width = self.image_shape
        padded = _pad_edge(xin, kh, kw)
        win = sliding_window_view(padded, (height, width), axis=(-2, -1))
        if self.channels:
            # win (C, kh, kw, H, W), yout (n, C, H, W) -> (n, kh, kw)
            return np.tensordot(yout, win, axes=([1, 2, 3], [0, 3, 4]))
        return np.tensordot(yout, win, axes=([1, 2], [2, 3]))

    def with_theta(self, theta):
        return FilterBank2D(theta, self.image_shape, self.channels)


class ConvLayer2D(LinOp):
    """Multi-channel correlation layer: (ic, H, W) -> (oc, H, W).

    ``theta`` has shape (oc, ic, kh, kw); output channel o sums the
    correlations of every input channel with its own kernel.
    """

    def __init__(self, theta, image_shape):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.ndim != 4:
            raise DimensionError("theta must have shape (oc, ic, kh, kw)")
        height, width = image_shape
        self.theta = theta
        self.image_shape = (height, width)
        oc, ic = theta.shape[:2]
        super().__init__((ic, height, width), (oc, height, width))

    @property
    def kernel_shape(self):
        return self.theta.shape

    def _forward(self, x):
        kh, kw = self.theta.shape[2:]
        height, width = self.image_shape
        padded = _pad_edge(x, kh, kw)
        win = sliding_window_view(padded, (height, width), axis=(-2, -1))
        # theta (oc, ic, kh, kw) x win (ic, kh, kw, H, W) -> (oc, H, W)
        return np.tensordot(self.theta, win, axes=([1, 2, 3], [0, 1, 2]))

    def _adjoint(self, y):
        kh, kw = self.theta.shape[2:]
        height, width = self.image_shape
        ic = self.theta.shape[1]
        # coeff[ic, a, b] = sum_o theta[o, ic, a, b] * y[o]
        coeff = np.tensordot(self.theta, y, axes=([0], [0]))
        acc = np.zeros((ic, height + kh - 1, width + kw - 1))
        for a in range(kh):
            for b in range(kw):
                acc[:, a:a + height, b:b + width] += coeff[:, a, b]
        return _fold_edge_adjoint(acc, height, width, kh, kw)

    def kernel_gradient(self, xin, yout):
        xin = np.asarray(xin, dtype=np.float64)
        yout = np.asarray(yout, dtype=np.float64)
        if xin.shape != self.in_shape or yout.shape != self.out_shape:
            raise DimensionError("kernel_gradient operand shape mismatch")
        kh, kw = self.theta.shape[2:]
        height, width = self.image_shape
        padded = _pad_edge(xin, kh, kw)
        win = sliding_window_view(padded, (height, width), axis=(-2, -1))
        # yout (oc, H, W) x win (ic, kh, kw, H, W) -> (oc, ic, kh, kw)
        return np.tensordot(yout, win, axes=([1, 2], [3, 4]))

    def with_theta(self, theta):
        return ConvLayer2D(theta, self.image_shape)


class BlockLayout:
    """Packing of a list of array shapes into one flat vector."""

    def __init__(self, shapes):
        self.shapes = [tuple(s) for s in shapes]
        self.sizes = [int(np.prod(s)) for s in self.shapes]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        self.total = int(self.offsets[-1])

    def pack(self, parts):
        return np.concatenate([np.asarray(p).ravel() for p in parts])

    def unpack(self, v):
        return [
            v[self.offsets[i]:self.offsets[i + 1]].reshape(self.shapes[i])
            for i in range(len(self.shapes))
        ]

    def zeros(self):
        return np.zeros(self.total)


class BlockMatrixOp(LinOp):
    """Block matrix of operators acting on packed flat vectors.

    ``blocks[i][j]`` maps primal part j to dual part i; ``None`` means a
    zero block.  Adjoints are derived componentwise.
    """

    def __init__(self, blocks, in_shapes, out_shapes):
        self.blocks = blocks
        self.in_layout = BlockLayout(in_shapes)
        self.out_layout = BlockLayout(out_shapes)
        for i, row in enumerate(blocks):
            if len(row) != len(in_shapes):
                raise DimensionError("ragged block row")
            for j, blk in enumerate(row):
                if blk is None:
                    continue
                if blk.in_shape != self.in_layout.shapes[j]:
                    raise DimensionError(f"block ({i},{j}) input shape mismatch")
                if blk.out_shape != self.out_layout.shapes[i]:
                    raise DimensionError(f"block ({i},{j}) output shape mismatch")
        super().__init__((self.in_layout.total,), (self.out_layout.total,))

    def _forward(self, x):
        parts = self.in_layout.unpack(x)
        outs = []
        for row in self.blocks:
            acc = None
            for j, blk in enumerate(row):
                if blk is None:
                    continue
                term = blk.apply(parts[j])
                acc = term if acc is None else acc + term
            if acc is None:
                acc = np.zeros(self.out_layout.shapes[len(outs)])
            outs.append(acc)
        return self.out_layout.pack(outs)

    def _adjoint(self, y):
        parts = self.out_layout.unpack(y)
        outs = []
        for j in range(len(self.in_layout.shapes)):
            acc = None
            for i, row in enumerate(self.blocks):
                blk = row[j]
                if blk is None:
                    continue
                term = blk.adjoint_apply(parts[i])
                acc = term if acc is None else acc + term
            if acc is None:
                acc = np.zeros(self.in_layout.shapes[j])
            outs.append(acc)
        return self.in_layout.pack(outs)


def hstack_op(ops):
    """Row block [op_1, ..., op_k]: packed input, shared output space."""
    return BlockMatrixOp([list(ops)], [op.in_shape for op in ops], [ops[0].out_shape])


def vstack_op(ops):
    """Column block: shared input, packed stacked output."""
    return BlockMatrixOp([[op] for op in ops], [ops[0].in_shape], [op.out_shape for op in ops])


def op_to_matrix(op):
    """Densify a small operator column by column (oracle/testing use)."""
    n = int(np.prod(op.in_shape))
    m = int(np.prod(op.out_shape))
    mat = np.zeros((m, n))
    basis = np.zeros(n)
    for j in range(n):
        basis[j] = 1.0
        mat[:, j] = op.apply(basis.reshape(op.in_shape)).ravel()
        basis[j] = 0.0
    return mat


def shift_overlap_gram(image_shape, kh, kw):
    """Gram matrix of the clamped-shift operators underlying a filter bank.

    Entry ((a,b),(c,d)) is the Frobenius inner product of the two
    single-tap correlation operators on an H-by-W grid with Neumann
    clamping; it factors into row and column overlap counts.
    """
    height, width = image_shape
    ph0 = (kh - 1) // 2
    pw0 = (kw - 1) // 2

    def overlaps(n, k, p0):
        idx = np.arange(n)
        src = [np.clip(idx + a - p0, 0, n - 1) for a in range(k)]
        cnt = np.zeros((k, k))
        for a in range(k):
            for c in range(k):
                cnt[a, c] = np.count_nonzero(src[a] == src[c])
        return cnt

    rows = overlaps(height, kh, ph0)
    cols = overlaps(width, kw, pw0)
    return np.kron(rows, cols)


def gram_norm_estimate(gram, multiplicity=1, iters=NORM_POWER_ITERS, seed=0):
    """Conservative sqrt of the largest Gram eigenvalue, scaled by multiplicity."""
    rng = Xoshiro256StarStar(seed)
    v = rng.standard_normal((gram.shape[0],))
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = gram @ v
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        v = w / lam
    return NORM_SAFETY * float(np.sqrt(multiplicity * lam))
