"""Linear forward models and the least-squares data fidelity.

Provides block-diagonal Gaussian sensing matrices, a sparse parallel-beam
Radon transform, the fidelity ``g(x) = ||y - A x||^2`` with its full,
per-measurement-block, and minibatch gradients, and power-iteration
Lipschitz estimation. Component gradients use the scaling
``g_j(x) = ell * ||y_j - A_j x||^2`` so that ``g = (1/ell) sum_j g_j``
holds exactly and minibatch averages are unbiased for ``grad g``.
"""

from __future__ import annotations

import abc
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .blocks import GridPartition, Partition, make_uniform_partition

__all__ = [
    "LinearOperator",
    "BlockDiagonalGaussian",
    "ParallelBeamRadon",
    "PermutedColumnsOperator",
    "MeasurementPartition",
    "LeastSquaresFidelity",
    "build_radon",
    "lipschitz_estimate",
    "synthesize_measurements",
]


class LinearOperator(abc.ABC):
    """Matrix-free linear map with adjoint and contiguous row-range access.

    Implementations are immutable after construction and safe for concurrent
    read-only use; ``apply``/``apply_adjoint`` allocate their outputs.
    """

    rows: int
    cols: int

    @abc.abstractmethod
    def apply(self, x: np.ndarray) -> np.ndarray:
        """Return ``A x``."""

    @abc.abstractmethod
    def apply_adjoint(self, r: np.ndarray) -> np.ndarray:
        """Return ``A^T r``."""

    @abc.abstractmethod
    def apply_row_range(self, x: np.ndarray, r0: int, r1: int) -> np.ndarray:
        """Return rows ``r0:r1`` of ``A x``."""

    @abc.abstractmethod
    def apply_row_range_adjoint(self, r: np.ndarray, r0: int, r1: int) -> np.ndarray:
        """Return ``A[r0:r1]^T r`` for a vector over rows ``r0:r1``."""

    def apply_rows(self, x: np.ndarray, j: int, mp: "MeasurementPartition") -> np.ndarray:
        """Rows of measurement block ``j`` of ``A x``."""
        sl = mp.block_slice(j)
        return self.apply_row_range(x, sl.start, sl.stop)

    def apply_rows_adjoint(self, r: np.ndarray, j: int, mp: "MeasurementPartition") -> np.ndarray:
        sl = mp.block_slice(j)
        return self.apply_row_range_adjoint(r, sl.start, sl.stop)

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.cols,):
            raise ValueError(f"expected vector of length {self.cols}, got {x.shape}")
        return x


@dataclass(frozen=True)
class MeasurementPartition:
    """Decomposition of the measurement space into ``ell`` contiguous row blocks."""

    m: int
    ell: int
    offsets: np.ndarray

    def __post_init__(self):
        offsets = np.asarray(self.offsets, dtype=np.int64)
        object.__setattr__(self, "offsets", offsets)
        if self.ell < 1 or self.ell > self.m:
            raise ValueError(f"need 1 <= ell <= m, got ell={self.ell}, m={self.m}")
        if offsets.shape != (self.ell + 1,) or offsets[0] != 0 or offsets[-1] != self.m:
            raise ValueError("offsets must run from 0 to m with ell+1 entries")
        if np.any(np.diff(offsets) < 1):
            raise ValueError("offsets must be strictly increasing")

    @classmethod
    def uniform(cls, m: int, ell: int) -> "MeasurementPartition":
        p = make_uniform_partition(m, ell)
        return cls(m=m, ell=ell, offsets=p.offsets)

    @classmethod
    def from_sizes(cls, sizes) -> "MeasurementPartition":
        sizes = np.asarray(sizes, dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        return cls(m=int(offsets[-1]), ell=len(sizes), offsets=offsets)

    @property
    def block_sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def block_slice(self, j: int) -> slice:
        if not 0 <= j < self.ell:
            raise IndexError(f"measurement block {j} out of range [0, {self.ell})")
        return slice(int(self.offsets[j]), int(self.offsets[j + 1]))


class BlockDiagonalGaussian(LinearOperator):
    """Block-diagonal sensing matrix with i.i.d. Gaussian blocks.

    Block ``i`` is an ``m_i x n_i`` dense matrix whose entries are zero-mean
    Gaussian with variance ``1/m_i``, aligned with the variable partition so
    that ``(A x)_i = A_i x_i`` exactly.
    """

    def __init__(self, partition: Partition, row_counts, seed: int):
        row_counts = np.asarray(row_counts, dtype=np.int64)
        if row_counts.shape != (partition.b,) or np.any(row_counts < 1):
            raise ValueError("need one positive row count per variable block")
        self.partition = partition
        self.seed = int(seed)
        self.row_offsets = np.concatenate([[0], np.cumsum(row_counts)])
        self.rows = int(self.row_offsets[-1])
        self.cols = partition.n
        self.block_matrices = []
        sizes = partition.block_sizes
        for i in range(partition.b):
            rng = np.random.default_rng([self.seed, i])
            mi = int(row_counts[i])
            self.block_matrices.append(rng.normal(0.0, 1.0 / math.sqrt(mi), size=(mi, int(sizes[i]))))

    @property
    def nblocks(self) -> int:
        return self.partition.b

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = self._check_input(x)
        out = np.empty(self.rows)
        for i, Ai in enumerate(self.block_matrices):
            out[self.row_offsets[i]:self.row_offsets[i + 1]] = Ai @ x[self.partition.block_slice(i)]
        return out

    def apply_adjoint(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=np.float64)
        if r.shape != (self.rows,):
            raise ValueError(f"expected vector of length {self.rows}, got {r.shape}")
        out = np.empty(self.cols)
        for i, Ai in enumerate(self.block_matrices):
            out[self.partition.block_slice(i)] = Ai.T @ r[self.row_offsets[i]:self.row_offsets[i + 1]]
        return out

    def apply_block(self, xi: np.ndarray, i: int) -> np.ndarray:
        return self.block_matrices[i] @ xi

    def apply_block_adjoint(self, ri: np.ndarray, i: int) -> np.ndarray:
        return self.block_matrices[i].T @ ri

    def block_row_slice(self, i: int) -> slice:
        return slice(int(self.row_offsets[i]), int(self.row_offsets[i + 1]))

    def apply_row_range(self, x: np.ndarray, r0: int, r1: int) -> np.ndarray:
        x = self._check_input(x)
        parts = []
        for i, Ai in enumerate(self.block_matrices):
            b0, b1 = int(self.row_offsets[i]), int(self.row_offsets[i + 1])
            lo, hi = max(r0, b0), min(r1, b1)
            if lo < hi:
                parts.append(Ai[lo - b0:hi - b0] @ x[self.partition.block_slice(i)])
        return np.concatenate(parts) if parts else np.zeros(0)

    def apply_row_range_adjoint(self, r: np.ndarray, r0: int, r1: int) -> np.ndarray:
        r = np.asarray(r, dtype=np.float64)
        out = np.zeros(self.cols)
        pos = 0
        for i, Ai in enumerate(self.block_matrices):
            b0, b1 = int(self.row_offsets[i]), int(self.row_offsets[i + 1])
            lo, hi = max(r0, b0), min(r1, b1)
            if lo < hi:
                cnt = hi - lo
                out[self.partition.block_slice(i)] = Ai[lo - b0:hi - b0].T @ r[pos:pos + cnt]
                pos += cnt
        return out


class ParallelBeamRadon(LinearOperator):
    """Sparse parallel-beam Radon transform over a square pixel grid.

    Rows are rays: per-ray weights are exact ray/pixel intersection lengths
    (unit pixels), angles span ``[0, pi)``, and detectors are spaced
    ``n_pix * sqrt(2) / n_detectors`` apart so the diagonal is covered.
    Columns index pixels in row-major image order.
    """

    def __init__(self, n_pix: int, angles: np.ndarray, n_detectors: int, matrix: sp.csr_matrix):
        self.n_pix = int(n_pix)
        self.angles = np.asarray(angles, dtype=np.float64)
        self.n_detectors = int(n_detectors)
        self.matrix = matrix.tocsr()
        self.rows, self.cols = self.matrix.shape

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = self._check_input(x)
        return self.matrix @ x

    def apply_adjoint(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=np.float64)
        if r.shape != (self.rows,):
            raise ValueError(f"expected vector of length {self.rows}, got {r.shape}")
        return self.matrix.T @ r

    def apply_row_range(self, x: np.ndarray, r0: int, r1: int) -> np.ndarray:
        x = self._check_input(x)
        return self.matrix[r0:r1] @ x

    def apply_row_range_adjoint(self, r: np.ndarray, r0: int, r1: int) -> np.ndarray:
        r = np.asarray(r, dtype=np.float64)
        return self.matrix[r0:r1].T @ r

    def angle_row_slice(self, a: int) -> slice:
        return slice(a * self.n_detectors, (a + 1) * self.n_detectors)

    def export_rows(self, stream) -> None:
        """Write the sparse rows as ``row col weight`` text lines."""
        coo = self.matrix.tocoo()
        for r, c, w in zip(coo.row, coo.col, coo.data):
            stream.write(f"{r} {c} {w:.17g}\n")


def _trace_ray(n: int, theta: float, offset: float):
    """Pixel indices and intersection lengths of one ray through an n x n grid.

    The ray is ``p(t) = offset*(cos t, sin t) + t*(-sin t, cos t)`` in
    coordinates centered on the image; pixel (row r, col c) covers the unit
    square ``[c, c+1] x [r, r+1]`` after shifting by ``n/2``.
    """
    h = n / 2.0
    px = offset * math.cos(theta) + h
    py = offset * math.sin(theta) + h
    dx = -math.sin(theta)
    dy = math.cos(theta)

    t_enter, t_exit = -np.inf, np.inf
    for p, d in ((px, dx), (py, dy)):
        if abs(d) < 1e-12:
            if not (0.0 <= p <= n):
                return np.zeros(0, dtype=np.int64), np.zeros(0)
        else:
            t0, t1 = (0.0 - p) / d, (n - p) / d
            if t0 > t1:
                t0, t1 = t1, t0
            t_enter = max(t_enter, t0)
            t_exit = min(t_exit, t1)
    if not t_enter < t_exit:
        return np.zeros(0, dtype=np.int64), np.zeros(0)

    crossings = [np.array([t_enter, t_exit])]
    grid = np.arange(n + 1, dtype=np.float64)
    if abs(dx) >= 1e-12:
        crossings.append((grid - px) / dx)
    if abs(dy) >= 1e-12:
        crossings.append((grid - py) / dy)
    ts = np.concatenate(crossings)
    ts = np.unique(ts[(ts >= t_enter) & (ts <= t_exit)])
    if len(ts) < 2:
        return np.zeros(0, dtype=np.int64), np.zeros(0)

    lengths = np.diff(ts)
    mid = 0.5 * (ts[:-1] + ts[1:])
    cx = np.floor(px + mid * dx).astype(np.int64)
    cy = np.floor(py + mid * dy).astype(np.int64)
    keep = (lengths > 1e-12) & (cx >= 0) & (cx < n) & (cy >= 0) & (cy < n)
    cols = cy[keep] * n + cx[keep]
    return cols, lengths[keep]


def build_radon(n_pix: int, n_angles: int, n_detectors: int) -> ParallelBeamRadon:
    """Assemble the sparse ray-driven Radon matrix.

    Rows are grouped per angle (``n_detectors`` consecutive rows per angle);
    rays that miss the grid give all-zero rows.
    """
    if min(n_pix, n_angles, n_detectors) < 1:
        raise ValueError("n_pix, n_angles, n_detectors must all be >= 1")
    angles = np.arange(n_angles) * math.pi / n_angles
    spacing = n_pix * math.sqrt(2.0) / n_detectors
    offsets = (np.arange(n_detectors) - (n_detectors - 1) / 2.0) * spacing

    data, col_idx, row_ptr = [], [], [0]
    for theta in angles:
        for s in offsets:
            cols, weights = _trace_ray(n_pix, float(theta), float(s))
            col_idx.append(cols)
            data.append(weights)
            row_ptr.append(row_ptr[-1] + len(cols))
    matrix = sp.csr_matrix(
        (np.concatenate(data), np.concatenate(col_idx), np.array(row_ptr)),
        shape=(n_angles * n_detectors, n_pix * n_pix),
    )
    return ParallelBeamRadon(n_pix, angles, n_detectors, matrix)


class PermutedColumnsOperator(LinearOperator):
    """Adapter presenting a row-major-image operator in block-major coordinates.

    Wraps an operator whose input indexes pixels row-major (e.g. Radon) so it
    accepts the solver's block-major vectors for a given grid tiling.
    """

    def __init__(self, base: LinearOperator, grid: GridPartition):
        if base.cols != grid.n:
            raise ValueError("operator columns do not match grid size")
        self.base = base
        self.grid = grid
        self.rows = base.rows
        self.cols = base.cols

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.base.apply(self.grid.to_row_major(self._check_input(x)))

    def apply_adjoint(self, r: np.ndarray) -> np.ndarray:
        return self.grid.to_block_major(self.base.apply_adjoint(r))

    def apply_row_range(self, x: np.ndarray, r0: int, r1: int) -> np.ndarray:
        return self.base.apply_row_range(self.grid.to_row_major(self._check_input(x)), r0, r1)

    def apply_row_range_adjoint(self, r: np.ndarray, r0: int, r1: int) -> np.ndarray:
        return self.grid.to_block_major(self.base.apply_row_range_adjoint(r, r0, r1))


class _RowBlockView(LinearOperator):
    """Contiguous row slice of an operator, for per-block norm estimation."""

    def __init__(self, base: LinearOperator, r0: int, r1: int):
        self.base = base
        self.r0, self.r1 = r0, r1
        self.rows = r1 - r0
        self.cols = base.cols

    def apply(self, x):
        return self.base.apply_row_range(x, self.r0, self.r1)

    def apply_adjoint(self, r):
        return self.base.apply_row_range_adjoint(r, self.r0, self.r1)

    def apply_row_range(self, x, r0, r1):
        return self.base.apply_row_range(x, self.r0 + r0, self.r0 + r1)

    def apply_row_range_adjoint(self, r, r0, r1):
        return self.base.apply_row_range_adjoint(r, self.r0 + r0, self.r0 + r1)


def lipschitz_estimate(A: LinearOperator, iters: int = 200, tol: float = 1e-9,
                       seed: int = 0) -> float:
    """Lipschitz constant ``2 * sigma_max(A)^2`` of ``x -> 2 A^T(Ax - y)``.

    Power iteration on ``A^T A`` from a seed-fixed start; the Rayleigh
    estimate is nondecreasing in the iteration count for this PSD matrix.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(A.cols)
    nv = np.linalg.norm(v)
    if nv == 0.0:
        return 0.0
    v /= nv
    est = 0.0
    for _ in range(iters):
        u = A.apply_adjoint(A.apply(v))
        new_est = float(v @ u)
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0
        v = u / nu
        if est > 0 and abs(new_est - est) < tol * est:
            est = new_est
            break
        est = new_est
    return 2.0 * est


def synthesize_measurements(A: LinearOperator, x_true: np.ndarray,
                            input_snr_db: float, seed: int) -> np.ndarray:
    """Simulate ``y = A x_true + e`` with white Gaussian noise at a target SNR.

    The noise std is ``||A x_true|| / (10^(snr/20) * sqrt(m))`` so the
    expected amplitude ratio matches ``input_snr_db``. Pass ``math.inf`` for
    a noise-free ``y``.
    """
    clean = A.apply(np.asarray(x_true, dtype=np.float64))
    if math.isinf(input_snr_db) and input_snr_db > 0:
        return clean
    if not math.isfinite(input_snr_db):
        raise ValueError("input_snr_db must be finite or +inf")
    signal = np.linalg.norm(clean)
    if signal == 0.0:
        raise ValueError("x_true maps to zero measurements; SNR scaling undefined")
    std = signal / (10.0 ** (input_snr_db / 20.0) * math.sqrt(A.rows))
    rng = np.random.default_rng(seed)
    return clean + rng.normal(0.0, std, size=A.rows)


class LeastSquaresFidelity:
    """Least-squares data term ``g(x) = ||y - A x||^2`` with component access.

    Components are scaled as ``g_j(x) = ell * ||y_j - A_j x||^2`` so that
    ``(1/ell) sum_j g_j = g`` exactly and minibatch gradient averages are
    unbiased. The cached Lipschitz constant is ``max_j L_j`` with
    ``L_j = 2 ell sigma_max(A_j)^2`` (equal to ``2 sigma_max(A)^2`` when
    ``ell == 1``).
    """

    def __init__(self, A: LinearOperator, y: np.ndarray,
                 mp: MeasurementPartition | None = None):
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (A.rows,):
            raise ValueError(f"y must have length {A.rows}, got {y.shape}")
        self.A = A
        self.y = y
        self.mp = mp if mp is not None else MeasurementPartition.uniform(A.rows, 1)
        if self.mp.m != A.rows:
            raise ValueError("measurement partition does not match operator rows")
        self._lipschitz: float | None = None
        # block-diagonal fast path applies when measurement blocks coincide
        # with the operator's own per-variable-block row ranges
        self._aligned = (
            isinstance(A, BlockDiagonalGaussian)
            and self.mp.ell == A.nblocks
            and np.array_equal(self.mp.offsets, A.row_offsets)
        )

    @property
    def n(self) -> int:
        return self.A.cols

    @property
    def m(self) -> int:
        return self.A.rows

    @property
    def ell(self) -> int:
        return self.mp.ell

    @property
    def lipschitz(self) -> float:
        if self._lipschitz is None:
            if self.ell == 1:
                self._lipschitz = lipschitz_estimate(self.A)
            else:
                self._lipschitz = max(
                    self.ell * lipschitz_estimate(
                        _RowBlockView(self.A, *self._row_bounds(j)))
                    for j in range(self.ell)
                )
        return self._lipschitz

    def _row_bounds(self, j: int) -> tuple[int, int]:
        sl = self.mp.block_slice(j)
        return sl.start, sl.stop

    def g_value(self, x: np.ndarray) -> float:
        r = self.y - self.A.apply(x)
        return float(r @ r)

    def g_component_value(self, x: np.ndarray, j: int) -> float:
        r0, r1 = self._row_bounds(j)
        r = self.y[r0:r1] - self.A.apply_row_range(x, r0, r1)
        return self.ell * float(r @ r)

    def grad_full(self, x: np.ndarray) -> np.ndarray:
        """``2 A^T (A x - y)``."""
        return 2.0 * self.A.apply_adjoint(self.A.apply(x) - self.y)

    def grad_component(self, x: np.ndarray, j: int) -> np.ndarray:
        """``grad g_j(x) = 2 ell A_j^T (A_j x - y_j)``."""
        r0, r1 = self._row_bounds(j)
        rj = self.A.apply_row_range(x, r0, r1) - self.y[r0:r1]
        return (2.0 * self.ell) * self.A.apply_row_range_adjoint(rj, r0, r1)

    def draw_minibatch(self, w: int, rng: np.random.Generator) -> np.ndarray:
        """``w`` i.i.d. uniform component indices (with replacement)."""
        return rng.integers(0, self.ell, size=w)

    def stochastic_grad(self, x: np.ndarray, w: int,
                        rng: np.random.Generator | None = None,
                        indices: np.ndarray | None = None) -> np.ndarray:
        """Minibatch gradient ``(1/w) sum_s grad g_{j_s}(x)``.

        ``indices`` overrides the random draw (test hook). With a single
        measurement block this is exactly ``grad_full`` regardless of the rng.
        """
        if w < 1:
            raise ValueError("minibatch size w must be >= 1")
        if self.ell == 1:
            return self.grad_full(x)
        if indices is None:
            indices = self.draw_minibatch(w, rng)
        indices = np.asarray(indices, dtype=np.int64)
        if indices.shape != (w,):
            raise ValueError("need exactly w component indices")
        acc = np.zeros(self.n)
        for j in indices:
            r0, r1 = self._row_bounds(int(j))
            rj = self.A.apply_row_range(x, r0, r1) - self.y[r0:r1]
            acc += self.A.apply_row_range_adjoint(rj, r0, r1)
        return (2.0 * self.ell / w) * acc

    def grad_block(self, x: np.ndarray, partition: Partition, i: int) -> np.ndarray:
        """Variable-block ``i`` of ``grad g(x)``.

        Block-diagonal operators aligned with the partition compute the block
        locally from ``x_i``; otherwise the full gradient is formed and sliced.
        """
        sl = partition.block_slice(i)
        if self._block_local(partition):
            xi = x[sl]
            ri = self.A.apply_block(xi, i) - self.y[self.A.block_row_slice(i)]
            return 2.0 * self.A.apply_block_adjoint(ri, i)
        return self.grad_full(x)[sl]

    def stochastic_grad_block(self, x: np.ndarray, partition: Partition, i: int,
                              w: int, rng: np.random.Generator | None = None,
                              indices: np.ndarray | None = None) -> np.ndarray:
        """Variable-block ``i`` of the minibatch gradient."""
        if w < 1:
            raise ValueError("minibatch size w must be >= 1")
        sl = partition.block_slice(i)
        if self.ell == 1:
            return self.grad_block(x, partition, i)
        if indices is None:
            indices = self.draw_minibatch(w, rng)
        indices = np.asarray(indices, dtype=np.int64)
        if self._aligned and self._block_local(partition):
            # rows of component j only touch variable block j, so only draws
            # hitting block i contribute
            hits = int(np.count_nonzero(indices == i))
            if hits == 0:
                return np.zeros(sl.stop - sl.start)
            xi = x[sl]
            ri = self.A.apply_block(xi, i) - self.y[self.A.block_row_slice(i)]
            return (2.0 * self.ell * hits / w) * self.A.apply_block_adjoint(ri, i)
        return self.stochastic_grad(x, w, indices=indices)[sl]

    def _block_local(self, partition: Partition) -> bool:
        return (
            isinstance(self.A, BlockDiagonalGaussian)
            and self.A.partition.b == partition.b
            and np.array_equal(self.A.partition.offsets, partition.offsets)
        )
