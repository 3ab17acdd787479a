"""The composite first-order operator ``G = grad g + tau (I - D)``.

Zeros of ``G`` are the reconstruction targets; every solver in this package
is some schedule of (block, possibly minibatched) evaluations of ``G``.
This module also houses the convergence-bound calculators for the batch and
stochastic schedules, the cocoercivity audit, the gradient-noise estimator,
and a conjugate-gradient oracle that solves for a zero of ``G`` directly
when the denoiser is linear.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from .blocks import GridPartition, Partition, make_uniform_partition
from .denoisers import Denoiser
from .operators import LeastSquaresFidelity

__all__ = [
    "RedConfig",
    "RedOperator",
    "BoundInputs",
    "step_size_bound",
    "theoretical_bound_bg",
    "theoretical_bound_sg",
    "cocoercivity_check",
    "nu_estimate",
    "fixed_point_direct_solve",
]


@dataclass(frozen=True)
class RedConfig:
    """Solver parameters: prior strength ``tau``, stepsize ``gamma``,
    denoiser level ``sigma`` (informational)."""

    tau: float
    gamma: float
    sigma: float = 0.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")


class RedOperator:
    """Data-fidelity gradient plus scaled denoiser residual.

    ``apply(x) = grad g(x) + tau * (x - D(x))``. Solver vectors are
    block-major when a :class:`GridPartition` is given; the denoiser always
    sees row-major images of shape ``geometry``. With ``block_local_denoise``
    the denoiser runs on each tile as its own image (the cheap per-block
    variant); by default the full image is denoised and the block extracted,
    which is the normative block operator.

    Immutable and reentrant; stochastic evaluations take explicit rng
    handles so concurrent workers own independent streams.
    """

    def __init__(self, fidelity: LeastSquaresFidelity, denoiser: Denoiser,
                 tau: float, partition: Partition | None = None,
                 grid: GridPartition | None = None,
                 block_local_denoise: bool = False):
        if tau <= 0:
            raise ValueError("tau must be positive")
        if grid is not None:
            partition = grid.partition
        if partition is None:
            partition = make_uniform_partition(fidelity.n, 1)
        if partition.n != fidelity.n:
            raise ValueError("partition does not match fidelity dimension")
        if block_local_denoise and grid is None:
            raise ValueError("block-local denoising needs a grid partition")
        self.fidelity = fidelity
        self.denoiser = denoiser
        self.tau = float(tau)
        self.partition = partition
        self.grid = grid
        self.block_local_denoise = block_local_denoise
        self.geometry = (grid.height, grid.width) if grid else (1, fidelity.n)

    @property
    def n(self) -> int:
        return self.fidelity.n

    @property
    def b(self) -> int:
        return self.partition.b

    @property
    def lipschitz(self) -> float:
        """``L + 2 tau``: Lipschitz constant of the composite operator."""
        return self.fidelity.lipschitz + 2.0 * self.tau

    def denoise(self, x: np.ndarray) -> np.ndarray:
        """Apply the denoiser in solver coordinates."""
        if self.grid is not None:
            img = self.grid.to_row_major(x)
            return self.grid.to_block_major(self.denoiser.apply(img, self.geometry))
        return self.denoiser.apply(x, self.geometry)

    def _residual_block(self, x: np.ndarray, i: int) -> np.ndarray:
        """Block ``i`` of ``tau * (x - D(x))``."""
        sl = self.partition.block_slice(i)
        if self.block_local_denoise:
            tile = (self.grid.block_h, self.grid.block_w)
            xi = x[sl]
            return self.tau * (xi - self.denoiser.apply(xi, tile))
        return self.tau * (x[sl] - self.denoise(x)[sl])

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Full operator ``G(x)``."""
        x = np.asarray(x, dtype=np.float64)
        return self.fidelity.grad_full(x) + self.tau * (x - self.denoise(x))

    def apply_block(self, x: np.ndarray, i: int) -> np.ndarray:
        """Block ``i`` of ``G(x)`` as a dense block vector."""
        if not 0 <= i < self.b:
            raise IndexError(f"block index {i} out of range [0, {self.b})")
        if self.b == 1:
            return self.apply(x)
        grad_i = self.fidelity.grad_block(x, self.partition, i)
        return grad_i + self._residual_block(x, i)

    def apply_stochastic(self, x: np.ndarray, w: int,
                         rng: np.random.Generator | None = None,
                         indices: np.ndarray | None = None) -> np.ndarray:
        """Minibatch operator: sampled gradient, exact denoiser term."""
        x = np.asarray(x, dtype=np.float64)
        g = self.fidelity.stochastic_grad(x, w, rng, indices=indices)
        return g + self.tau * (x - self.denoise(x))

    def apply_stochastic_block(self, x: np.ndarray, i: int, w: int,
                               rng: np.random.Generator | None = None,
                               indices: np.ndarray | None = None) -> np.ndarray:
        """Block ``i`` of the minibatch operator."""
        if not 0 <= i < self.b:
            raise IndexError(f"block index {i} out of range [0, {self.b})")
        if self.fidelity.ell == 1:
            return self.apply_block(x, i) if self.b > 1 else self.apply(x)
        if self.b == 1:
            return self.apply_stochastic(x, w, rng, indices=indices)
        g = self.fidelity.stochastic_grad_block(x, self.partition, i, w, rng,
                                                indices=indices)
        return g + self._residual_block(x, i)

    def residual_norm_sq(self, x: np.ndarray) -> float:
        """``||G(x)||^2``, the fixed-point convergence metric."""
        g = self.apply(x)
        return float(g @ g)

    def normalized_residual(self, x: np.ndarray, x0: np.ndarray) -> float:
        """``||G(x)||^2 / ||G(x0)||^2``."""
        denom = self.residual_norm_sq(x0)
        if denom == 0.0:
            raise ValueError("||G(x0)|| is zero; starting point already solves the problem")
        return self.residual_norm_sq(x) / denom


def step_size_bound(L: float, tau: float, lam: int) -> float:
    """Largest stepsize covered by the convergence analysis,
    ``1 / ((1 + 2 lam) (L + 2 tau))``."""
    if L < 0 or tau <= 0 or lam < 0:
        raise ValueError("need L >= 0, tau > 0, lambda >= 0")
    return 1.0 / ((1.0 + 2.0 * lam) * (L + 2.0 * tau))


@dataclass(frozen=True)
class BoundInputs:
    """Everything the convergence-rate formulas consume.

    ``t`` counts block updates, ``lam`` is the maximal delay, ``R0`` bounds
    the start-to-solution distance, ``nu`` scales the gradient noise and
    ``w`` the minibatch size.
    """

    t: int
    b: int
    gamma: float
    L: float
    tau: float
    lam: int = 0
    R0: float = 0.0
    nu: float = 0.0
    w: int = 1

    def __post_init__(self):
        if self.b < 1 or self.gamma <= 0 or self.tau <= 0:
            raise ValueError("need b >= 1, gamma > 0, tau > 0")
        if self.lam < 0 or self.L < 0 or self.R0 < 0 or self.nu < 0:
            raise ValueError("L, lambda, R0, nu must be nonnegative")

    @property
    def delay_constant(self) -> float:
        """``2 lam^2 / (1 + lam)^2``; zero for the serial case, tending to 2."""
        return 2.0 * self.lam**2 / (1.0 + self.lam) ** 2


def theoretical_bound_bg(inputs: BoundInputs) -> float:
    """Batch-gradient rate bound on ``min_k ||G(x^k)||^2`` after ``t`` updates."""
    if inputs.t < 1:
        raise ValueError("t must be >= 1")
    D = inputs.delay_constant
    scale = (inputs.L + 2.0 * inputs.tau) * inputs.b / (inputs.gamma * inputs.t)
    return (D / inputs.b + 2.0) * scale * inputs.R0**2


def theoretical_bound_sg(inputs: BoundInputs) -> float:
    """Stochastic-gradient bound: the batch term plus a variance floor."""
    if inputs.w < 1:
        raise ValueError("w must be >= 1")
    D = inputs.delay_constant
    C = (inputs.L + 2.0 * inputs.tau) * (1.0 + inputs.lam) * inputs.nu**2
    floor = (2.0 * D / inputs.b + 2.0) * inputs.gamma / inputs.w * C
    return theoretical_bound_bg(inputs) + floor


def cocoercivity_check(r: RedOperator, trials: int, seed: int = 0) -> tuple[float, float]:
    """Sampled cocoercivity margin of ``G`` with constant ``1/(L + 2 tau)``.

    Returns ``(min_margin, scale)`` where the margin of a pair is
    ``(G(x)-G(y))^T (x-y) - ||G(x)-G(y)||^2 / (L + 2 tau)`` and ``scale`` is
    the largest quadratic term seen; a compliant operator keeps
    ``min_margin >= -tol * scale``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    beta = 1.0 / r.lipschitz
    min_margin = math.inf
    scale = 0.0
    for _ in range(trials):
        x = rng.standard_normal(r.n)
        y = rng.standard_normal(r.n)
        d = r.apply(x) - r.apply(y)
        quad = beta * float(d @ d)
        margin = float(d @ (x - y)) - quad
        min_margin = min(min_margin, margin)
        scale = max(scale, quad)
    return min_margin, scale


def nu_estimate(r: RedOperator, x_samples, draws: int,
                seed: int = 0) -> float:
    """Empirical gradient-noise scale ``nu``.

    At each sample point the single-draw minibatch variance
    ``E ||G_hat(x) - G(x)||^2`` is measured; ``nu`` is the square root of the
    worst case (the variance at minibatch size ``w`` is then ``<= nu^2 / w``).
    """
    if draws < 1:
        raise ValueError("draws must be >= 1")
    if r.fidelity.ell == 1:
        return 0.0
    rng = np.random.default_rng(seed)
    worst = 0.0
    for x in x_samples:
        x = np.asarray(x, dtype=np.float64)
        g = r.apply(x)
        acc = 0.0
        for _ in range(draws):
            d = r.apply_stochastic(x, 1, rng) - g
            acc += float(d @ d)
        worst = max(worst, acc / draws)
    return math.sqrt(worst)


def fixed_point_direct_solve(r: RedOperator, tol: float = 1e-10,
                             max_n: int = 4096) -> np.ndarray:
    """Solve ``G(x) = 0`` directly for a linear denoiser.

    ``G`` is then affine, ``G(x) = (2 A^T A + tau (I - K)) x - 2 A^T y``, and
    the system matrix is symmetric positive semidefinite, so conjugate
    gradients apply. Serves as the independent oracle against which all
    iterative solvers are checked.
    """
    if not r.denoiser.is_linear:
        raise ValueError("direct solve requires a linear denoiser")
    if r.n > max_n:
        raise ValueError(f"direct solve limited to n <= {max_n}, got {r.n}")
    b = 2.0 * r.fidelity.A.apply_adjoint(r.fidelity.y)

    def matvec(v):
        v = np.asarray(v, dtype=np.float64)
        return (2.0 * r.fidelity.A.apply_adjoint(r.fidelity.A.apply(v))
                + r.tau * (v - r.denoise(v)))

    M = spla.LinearOperator((r.n, r.n), matvec=matvec, rmatvec=matvec)
    x, info = spla.cg(M, b, rtol=tol, atol=0.0, maxiter=20 * r.n)
    if info != 0:
        raise RuntimeError(f"conjugate gradient failed to converge (info={info})")
    resid = np.linalg.norm(matvec(x) - b)
    bn = np.linalg.norm(b)
    if bn > 0 and resid > 10 * tol * bn:
        raise RuntimeError("conjugate gradient stagnated above the requested tolerance")
    return x
