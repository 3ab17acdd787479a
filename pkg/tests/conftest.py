import os

# single-threaded BLAS: worker threads own their parallelism, and OpenBLAS
# spin-waiting otherwise starves them on small machines
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from asyncred.blocks import GridPartition, make_uniform_partition
from asyncred.denoisers import ConvolutionDenoiser, IdentityDenoiser
from asyncred.operators import (LeastSquaresFidelity, LinearOperator,
                                MeasurementPartition)
from asyncred.red_core import RedOperator


class DenseOperator(LinearOperator):
    """Explicit-matrix operator for oracle tests."""

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.rows, self.cols = self.matrix.shape

    def apply(self, x):
        return self.matrix @ self._check_input(x)

    def apply_adjoint(self, r):
        return self.matrix.T @ np.asarray(r, dtype=np.float64)

    def apply_row_range(self, x, r0, r1):
        return self.matrix[r0:r1] @ self._check_input(x)

    def apply_row_range_adjoint(self, r, r0, r1):
        return self.matrix[r0:r1].T @ np.asarray(r, dtype=np.float64)


def identity_instance(n=4, y=None, tau=1.0, b=1):
    """A = I with the identity denoiser: G(x) = 2(x - y) exactly."""
    A = DenseOperator(np.eye(n))
    y = np.zeros(n) if y is None else np.asarray(y, dtype=np.float64)
    fid = LeastSquaresFidelity(A, y)
    part = make_uniform_partition(n, b)
    return RedOperator(fid, IdentityDenoiser(), tau, partition=part)


def small_grid_instance(n_side=8, block=4, ratio=0.9, seed=0, tau_rel=0.1,
                        kernel_width=0.8, ell_blocks=False):
    from asyncred.verify import make_cs_instance

    den = ConvolutionDenoiser.gaussian(kernel_width)
    return make_cs_instance(n_side, block, ratio, den, tau_rel, seed,
                            ell_blocks=ell_blocks)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
