"""Grayscale image I/O, synthetic data, corruption and quality metrics.

Images are float64 arrays with values in the [0, 255] range.  PGM is
the only file format (P5 binary and P2 ASCII, maxval 255).  Noise uses
the package's portable PRNG so corrupted datasets are reproducible
bit-for-bit across platforms.
"""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, FormatError
from .rng import Xoshiro256StarStar


def _read_token(fh):
    """Next whitespace-delimited token, skipping '#' comments."""
    token = b""
    while True:
        c = fh.read(1)
        if not c:
            if token:
                return token
            raise FormatError("unexpected end of PGM header")
        if c == b"#":
            while c and c != b"\n":
                c = fh.read(1)
            continue
        if c.isspace():
            if token:
                return token
            continue
        token += c


def load_pgm(path):
    """Load a P5 or P2 PGM with maxval 255 as a float64 (H, W) array."""
    with open(path, "rb") as fh:
        magic = _read_token(fh)
        if magic not in (b"P5", b"P2"):
            raise FormatError(f"{path}: not a P2/P5 PGM (magic {magic!r})")
        try:
            width = int(_read_token(fh))
            height = int(_read_token(fh))
            maxval = int(_read_token(fh))
        except ValueError as exc:
            raise FormatError(f"{path}: malformed header") from exc
        if width <= 0 or height <= 0:
            raise FormatError(f"{path}: invalid dimensions {width}x{height}")
        if maxval != 255:
            raise FormatError(f"{path}: maxval must be 255, got {maxval}")
        if magic == b"P5":
            raw = fh.read(width * height)
            if len(raw) != width * height:
                raise FormatError(f"{path}: truncated P5 payload")
            data = np.frombuffer(raw, dtype=np.uint8).astype(np.float64)
        else:
            values = fh.read().split()
            if len(values) < width * height:
                raise FormatError(f"{path}: truncated P2 payload")
            try:
                data = np.array(values[: width * height], dtype=np.float64)
            except ValueError as exc:
                raise FormatError(f"{path}: non-numeric P2 payload") from exc
            if np.any(data < 0) or np.any(data > 255):
                raise FormatError(f"{path}: P2 values outside [0, 255]")
    return data.reshape(height, width)


def save_pgm(path, image):
    """Write a binary P5 PGM; clamps to [0, 255] and rounds half-to-even."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DimensionError("save_pgm expects a 2-d image")
    data = np.rint(np.clip(image, 0.0, 255.0)).astype(np.uint8)
    height, width = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(data.tobytes(order="C"))


def add_gaussian_noise(image, sigma, seed):
    """Add i.i.d. N(0, sigma^2) noise; deterministic per (seed, shape).

    The output is intentionally not clamped: fidelity terms operate on
    the raw corrupted data.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    image = np.asarray(image, dtype=np.float64)
    if sigma == 0:
        return image.copy()
    rng = Xoshiro256StarStar(seed)
    return image + sigma * rng.standard_normal(image.shape)


def psnr(a, b, peak=255.0):
    """10 log10(peak^2 / MSE); +inf when the images coincide."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return np.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size=11, sigma=1.5):
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(a, b, peak=255.0):
    """Mean local SSIM over valid 11x11 Gaussian-window positions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if a.shape[0] < 11 or a.shape[1] < 11:
        raise DimensionError("ssim needs images of at least 11x11")
    win = _gaussian_window()
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2

    def filt(img):
        patches = sliding_window_view(img, (11, 11))
        return np.tensordot(patches, win, axes=([2, 3], [0, 1]))

    mu_a = filt(a)
    mu_b = filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def synthetic_image(height, width, seed, kind="shapes"):
    """Deterministic test image in [0, 255].

    ``shapes`` overlays random rectangles and disks on a smooth ramp
    (piecewise-constant structure suits edge-preserving regularizers);
    ``ramp`` is the smooth background alone.
    """
    rng = Xoshiro256StarStar(seed)
    ii, jj = np.mgrid[0:height, 0:width]
    u = rng.uniform(4)
    img = 40.0 + 60.0 * (u[0] * ii / max(height - 1, 1) + u[1] * jj / max(width - 1, 1))
    if kind == "ramp":
        return np.clip(img, 0.0, 255.0)
    if kind != "shapes":
        raise ValueError(f"unknown synthetic image kind: {kind}")
    n_shapes = 6
    for _ in range(n_shapes):
        p = rng.uniform(6)
        level = 30.0 + 200.0 * p[4]
        if p[5] < 0.5:
            r0 = int(p[0] * height * 0.7)
            c0 = int(p[1] * width * 0.7)
            r1 = r0 + max(2, int(p[2] * height * 0.4))
            c1 = c0 + max(2, int(p[3] * width * 0.4))
            img[r0:r1, c0:c1] = level
        else:
            cy = p[0] * height
            cx = p[1] * width
            rad = max(2.0, p[2] * min(height, width) * 0.3)
            mask = (ii - cy) ** 2 + (jj - cx) ** 2 <= rad**2
            img[mask] = level
    return np.clip(img, 0.0, 255.0)
