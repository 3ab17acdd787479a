"""Nonexpansive denoisers used as priors, plus numerical audits.

Every built-in prior is nonexpansive by construction rather than by
training: circular convolution with a nonnegative unit-sum kernel has
spectral norm <= 1, and orthonormal-transform soft-thresholding composes
isometries with the 1-Lipschitz shrinkage map. ``check_nonexpansive``
measures the worst sampled Lipschitz ratio of any denoiser.
"""

from __future__ import annotations

import abc
import math

import numpy as np

__all__ = [
    "Denoiser",
    "IdentityDenoiser",
    "GainDenoiser",
    "ConvolutionDenoiser",
    "TransformShrinkDenoiser",
    "gaussian_kernel",
    "check_nonexpansive",
    "residual_map",
]


class Denoiser(abc.ABC):
    """Image denoiser acting on flat vectors with an explicit 2D geometry.

    Immutable after construction; ``apply`` is reentrant and safe to call
    concurrently. ``is_linear`` marks denoisers usable in direct fixed-point
    solves.
    """

    sigma: float = 0.0
    claims_nonexpansive: bool = False
    is_linear: bool = False

    @abc.abstractmethod
    def apply(self, x: np.ndarray, geometry: tuple[int, int]) -> np.ndarray:
        """Denoise a flat image of shape ``geometry`` (height, width)."""

    def _as_image(self, x: np.ndarray, geometry: tuple[int, int]) -> np.ndarray:
        h, w = geometry
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (h * w,):
            raise ValueError(f"expected flat image of length {h * w}, got {x.shape}")
        return x.reshape(h, w)


class IdentityDenoiser(Denoiser):
    """No-op prior; reduces the composite operator to pure least squares."""

    claims_nonexpansive = True
    is_linear = True

    def apply(self, x, geometry):
        return self._as_image(x, geometry).reshape(-1)


class GainDenoiser(Denoiser):
    """Constant-gain map ``D(x) = gain * x``.

    Nonexpansive only for ``|gain| <= 1``; gains above one give a Lipschitz
    constant of exactly ``gain``, which makes this the negative control
    for the operator-theory audits.
    """

    is_linear = True

    def __init__(self, gain: float):
        self.gain = float(gain)
        self.claims_nonexpansive = abs(self.gain) <= 1.0

    def apply(self, x, geometry):
        return self.gain * self._as_image(x, geometry).reshape(-1)


def gaussian_kernel(width: float, radius: int | None = None) -> np.ndarray:
    """Normalized 2D Gaussian kernel (nonnegative, sums to one).

    ``width`` is the Gaussian std in pixels; the support radius defaults to
    ``ceil(3 * width)`` (at least 1).
    """
    if width <= 0:
        raise ValueError("kernel width must be positive")
    if radius is None:
        radius = max(1, int(math.ceil(3.0 * width)))
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (ax / width) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


class ConvolutionDenoiser(Denoiser):
    """Circular convolution with a nonnegative unit-sum kernel.

    Linear, and nonexpansive because every DFT magnitude of such a kernel is
    bounded by its l1 norm, which is one.
    """

    claims_nonexpansive = True
    is_linear = True

    def __init__(self, kernel: np.ndarray, sigma: float = 0.0):
        kernel = np.asarray(kernel, dtype=np.float64)
        if kernel.ndim != 2:
            raise ValueError("kernel must be 2D")
        if np.any(kernel < 0):
            raise ValueError("kernel entries must be nonnegative")
        if not math.isclose(float(kernel.sum()), 1.0, rel_tol=1e-12):
            raise ValueError("kernel must sum to 1")
        self.kernel = kernel
        self.sigma = float(sigma)
        self._fft_cache: dict[tuple[int, int], np.ndarray] = {}

    @classmethod
    def gaussian(cls, width: float, sigma: float = 0.0,
                 radius: int | None = None) -> "ConvolutionDenoiser":
        return cls(gaussian_kernel(width, radius), sigma=sigma)

    def _wrapped_kernel(self, h: int, w: int) -> np.ndarray:
        # fold the centered kernel onto the grid modulo the geometry; for a
        # circular convolution this aliasing is exact and keeps entries
        # nonnegative with unit sum
        kh, kw = self.kernel.shape
        pad = np.zeros((h, w))
        rows = (np.arange(kh) - kh // 2) % h
        cols = (np.arange(kw) - kw // 2) % w
        np.add.at(pad, (rows[:, None], cols[None, :]), self.kernel)
        return pad

    def _kernel_fft(self, h: int, w: int) -> np.ndarray:
        key = (h, w)
        cached = self._fft_cache.get(key)
        if cached is None:
            cached = np.fft.rfft2(self._wrapped_kernel(h, w))
            self._fft_cache[key] = cached
        return cached

    def apply(self, x, geometry):
        img = self._as_image(x, geometry)
        h, w = geometry
        out = np.fft.irfft2(np.fft.rfft2(img) * self._kernel_fft(h, w), s=(h, w))
        return out.reshape(-1)

    def spectrum_max(self, geometry: tuple[int, int]) -> float:
        """Largest DFT magnitude of the kernel on this grid (its operator norm)."""
        h, w = geometry
        return float(np.abs(np.fft.fft2(self._wrapped_kernel(h, w))).max())


def _haar_forward(img: np.ndarray, levels: int) -> np.ndarray:
    out = img.astype(np.float64).copy()
    h, w = out.shape
    s = math.sqrt(2.0)
    for _ in range(levels):
        sub = out[:h, :w]
        # rows
        a = (sub[:, 0::2] + sub[:, 1::2]) / s
        d = (sub[:, 0::2] - sub[:, 1::2]) / s
        sub[:, : w // 2], sub[:, w // 2:] = a, d
        # columns
        a = (sub[0::2, :] + sub[1::2, :]) / s
        d = (sub[0::2, :] - sub[1::2, :]) / s
        sub[: h // 2, :], sub[h // 2:, :] = a, d
        h //= 2
        w //= 2
    return out


def _haar_inverse(coef: np.ndarray, levels: int) -> np.ndarray:
    out = coef.astype(np.float64).copy()
    H, W = out.shape
    sizes = [(H >> (k - 1), W >> (k - 1)) for k in range(levels, 0, -1)]
    s = math.sqrt(2.0)
    for h, w in sizes:
        sub = out[:h, :w].copy()
        tmp = np.empty((h, w))
        a, d = sub[: h // 2, :], sub[h // 2:, :]
        tmp[0::2, :] = (a + d) / s
        tmp[1::2, :] = (a - d) / s
        res = np.empty((h, w))
        a, d = tmp[:, : w // 2], tmp[:, w // 2:]
        res[:, 0::2] = (a + d) / s
        res[:, 1::2] = (a - d) / s
        out[:h, :w] = res
    return out


class TransformShrinkDenoiser(Denoiser):
    """Soft-thresholding in an orthonormal 2D Haar basis.

    The threshold is ``thresh_scale * sigma`` and is applied to every
    coefficient, so ``D(0) = 0`` and the map is nonexpansive (isometries
    around a 1-Lipschitz shrinkage). Image dimensions must be divisible by
    ``2**levels``.
    """

    claims_nonexpansive = True
    is_linear = False

    def __init__(self, sigma: float, levels: int = 1, thresh_scale: float = 0.6):
        if levels < 0:
            raise ValueError("levels must be >= 0")
        self.sigma = float(sigma)
        self.levels = int(levels)
        self.thresh_scale = float(thresh_scale)

    @property
    def threshold(self) -> float:
        return self.thresh_scale * self.sigma

    def apply(self, x, geometry):
        img = self._as_image(x, geometry)
        h, w = geometry
        f = 1 << self.levels
        if h % f or w % f:
            raise ValueError(f"geometry {h}x{w} not divisible by 2^{self.levels}")
        coef = _haar_forward(img, self.levels)
        t = self.threshold
        coef = np.sign(coef) * np.maximum(np.abs(coef) - t, 0.0)
        return _haar_inverse(coef, self.levels).reshape(-1)


def residual_map(d: Denoiser, x: np.ndarray, geometry: tuple[int, int],
                 tau: float) -> np.ndarray:
    """Scaled denoiser residual ``tau * (x - D(x))``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    x = np.asarray(x, dtype=np.float64)
    return tau * (x - d.apply(x, geometry))


def _phantom_like(geometry: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Smooth bump image standing in for natural-image structure."""
    h, w = geometry
    yy, xx = np.mgrid[0:h, 0:w]
    img = np.zeros((h, w))
    for _ in range(4):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        sy, sx = rng.uniform(h / 8, h / 3), rng.uniform(w / 8, w / 3)
        img += rng.uniform(0.2, 1.0) * np.exp(
            -((yy - cy) ** 2) / (2 * sy**2) - ((xx - cx) ** 2) / (2 * sx**2)
        )
    return (img / max(img.max(), 1e-12)).reshape(-1)


def check_nonexpansive(d: Denoiser, trials: int, geometry: tuple[int, int],
                       seed: int = 0) -> float:
    """Worst sampled Lipschitz ratio ``||D(x)-D(y)|| / ||x-y||``.

    Pairs mix random Gaussian images with structured ones (smooth phantom
    plus perturbations of several magnitudes).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    n = geometry[0] * geometry[1]
    worst = 0.0
    for t in range(trials):
        if t % 3 == 2:
            x = _phantom_like(geometry, rng)
            scale = rng.choice([1e-3, 1e-1, 1.0])
            y = x + scale * rng.standard_normal(n)
        else:
            x = rng.standard_normal(n)
            y = rng.standard_normal(n)
        dist = np.linalg.norm(x - y)
        if dist == 0.0:
            continue
        ratio = np.linalg.norm(d.apply(x, geometry) - d.apply(y, geometry)) / dist
        worst = max(worst, float(ratio))
    return worst
