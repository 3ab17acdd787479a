import io
import math

import numpy as np
import pytest

from asyncred.blocks import make_uniform_partition
from asyncred.operators import (BlockDiagonalGaussian, LeastSquaresFidelity,
                                MeasurementPartition, build_radon,
                                lipschitz_estimate, synthesize_measurements)

from conftest import DenseOperator


def finite_diff(f, x, h=1e-6):
    g = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@pytest.fixture
def small_fidelity(rng):
    part = make_uniform_partition(8, 2)
    A = BlockDiagonalGaussian(part, [3, 3], seed=42)
    y = rng.standard_normal(6)
    return LeastSquaresFidelity(A, y, MeasurementPartition.uniform(6, 3))


class TestMeasurementPartition:
    def test_uniform(self):
        mp = MeasurementPartition.uniform(7, 3)
        assert mp.offsets.tolist() == [0, 3, 5, 7]

    def test_from_sizes(self):
        mp = MeasurementPartition.from_sizes([4, 2, 4])
        assert mp.m == 10 and mp.ell == 3

    def test_rejects_bad(self):
        with pytest.raises(ValueError):
            MeasurementPartition(m=4, ell=2, offsets=np.array([0, 0, 4]))
        with pytest.raises(IndexError):
            MeasurementPartition.uniform(4, 2).block_slice(2)


class TestBlockDiagonalGaussian:
    def test_entry_variance(self):
        part = make_uniform_partition(800, 2)
        A = BlockDiagonalGaussian(part, [500, 700], seed=0)
        for i, mi in enumerate([500, 700]):
            sample_var = A.block_matrices[i].var()
            assert sample_var == pytest.approx(1.0 / mi, rel=0.02)

    def test_apply_decomposes_per_block(self, rng):
        part = make_uniform_partition(12, 3)
        A = BlockDiagonalGaussian(part, [5, 6, 7], seed=1)
        x = rng.standard_normal(12)
        out = A.apply(x)
        for i in range(3):
            xi = x[part.block_slice(i)]
            assert np.array_equal(out[A.block_row_slice(i)], A.block_matrices[i] @ xi)

    def test_adjoint_consistency(self, rng):
        part = make_uniform_partition(12, 3)
        A = BlockDiagonalGaussian(part, [5, 6, 7], seed=1)
        for _ in range(50):
            x = rng.standard_normal(12)
            r = rng.standard_normal(18)
            lhs = float(A.apply(x) @ r)
            rhs = float(x @ A.apply_adjoint(r))
            assert lhs == pytest.approx(rhs, rel=1e-10)

    def test_row_range_stacks_to_apply(self, rng):
        part = make_uniform_partition(12, 3)
        A = BlockDiagonalGaussian(part, [5, 6, 7], seed=1)
        mp = MeasurementPartition.uniform(18, 5)  # cuts across diagonal blocks
        x = rng.standard_normal(12)
        stacked = np.concatenate([A.apply_rows(x, j, mp) for j in range(5)])
        assert np.allclose(stacked, A.apply(x), rtol=1e-12, atol=0)


class TestGradients:
    def test_identity_operator_gradient(self, rng):
        A = DenseOperator(np.eye(5))
        fid = LeastSquaresFidelity(A, np.zeros(5))
        x = rng.standard_normal(5)
        assert np.array_equal(fid.grad_full(x), 2 * x)

    def test_zero_residual_point(self, rng):
        part = make_uniform_partition(6, 2)
        A = BlockDiagonalGaussian(part, [4, 4], seed=2)
        x = rng.standard_normal(6)
        fid = LeastSquaresFidelity(A, A.apply(x))
        assert np.allclose(fid.grad_full(x), 0.0, atol=1e-12)

    def test_grad_matches_finite_differences(self, small_fidelity, rng):
        x = rng.standard_normal(8)
        fd = finite_diff(small_fidelity.g_value, x)
        g = small_fidelity.grad_full(x)
        assert np.linalg.norm(fd - g) / np.linalg.norm(g) < 1e-6

    def test_component_grads_match_finite_differences(self, small_fidelity, rng):
        x = rng.standard_normal(8)
        for j in range(small_fidelity.ell):
            fd = finite_diff(lambda v: small_fidelity.g_component_value(v, j), x)
            gj = small_fidelity.grad_component(x, j)
            assert np.linalg.norm(fd - gj) / max(np.linalg.norm(gj), 1e-12) < 1e-6

    def test_component_mean_is_full_gradient(self, small_fidelity, rng):
        x = rng.standard_normal(8)
        mean = sum(small_fidelity.grad_component(x, j)
                   for j in range(small_fidelity.ell)) / small_fidelity.ell
        g = small_fidelity.grad_full(x)
        assert np.linalg.norm(mean - g) / np.linalg.norm(g) < 1e-12

    def test_single_block_component_equals_full(self, rng):
        A = DenseOperator(rng.standard_normal((6, 4)))
        fid = LeastSquaresFidelity(A, rng.standard_normal(6))
        x = rng.standard_normal(4)
        assert np.array_equal(fid.grad_component(x, 0), fid.grad_full(x))

    def test_component_index_out_of_range(self, small_fidelity):
        with pytest.raises(IndexError):
            small_fidelity.grad_component(np.zeros(8), 3)


class TestStochasticGradient:
    def test_single_block_returns_full(self, rng):
        A = DenseOperator(rng.standard_normal((6, 4)))
        fid = LeastSquaresFidelity(A, rng.standard_normal(6))
        x = rng.standard_normal(4)
        out = fid.stochastic_grad(x, 5, np.random.default_rng(0))
        assert np.array_equal(out, fid.grad_full(x))

    def test_unbiased_within_3se(self, small_fidelity):
        # Monte-Carlo oracle: empirical mean of 1e4 single-draw gradients
        x = np.random.default_rng(7).standard_normal(8)
        g = small_fidelity.grad_full(x)
        draws = 10_000
        mc = np.random.default_rng(77)
        samples = np.empty((draws, 8))
        for k in range(draws):
            samples[k] = small_fidelity.stochastic_grad(x, 1, mc)
        se = samples.std(axis=0, ddof=1) / math.sqrt(draws)
        z = np.abs(samples.mean(axis=0) - g) / np.maximum(se, 1e-30)
        assert z.max() <= 3.0

    def test_variance_scales_inversely_with_w(self, small_fidelity):
        x = np.random.default_rng(8).standard_normal(8)
        g = small_fidelity.grad_full(x)
        mc = np.random.default_rng(88)
        draws = 10_000

        def mean_sq_dev(w):
            acc = 0.0
            for _ in range(draws):
                d = small_fidelity.stochastic_grad(x, w, mc) - g
                acc += float(d @ d)
            return acc / draws

        ratio = mean_sq_dev(4) / mean_sq_dev(1)
        assert 0.2 <= ratio <= 0.3

    def test_enumeration_hook_equals_full(self, rng):
        part = make_uniform_partition(8, 4)
        A = BlockDiagonalGaussian(part, [2, 2, 2, 2], seed=5)
        fid = LeastSquaresFidelity(A, rng.standard_normal(8),
                                   MeasurementPartition.from_sizes([2, 2, 2, 2]))
        x = rng.standard_normal(8)
        out = fid.stochastic_grad(x, 4, indices=np.arange(4))
        assert np.array_equal(out, fid.grad_full(x))


class TestLipschitz:
    def test_identity(self):
        assert lipschitz_estimate(DenseOperator(np.eye(7))) == pytest.approx(2.0, abs=1e-9)

    def test_scalar_times_three(self):
        assert lipschitz_estimate(DenseOperator([[3.0]])) == pytest.approx(18.0, abs=1e-9)

    def test_matches_dense_svd(self, rng):
        M = rng.standard_normal((20, 16))
        est = lipschitz_estimate(DenseOperator(M), iters=500, tol=1e-14)
        oracle = 2.0 * np.linalg.svd(M, compute_uv=False)[0] ** 2
        assert est == pytest.approx(oracle, rel=1e-6)

    def test_monotone_in_iterations(self, rng):
        M = rng.standard_normal((12, 10))
        vals = [lipschitz_estimate(DenseOperator(M), iters=k, tol=0.0)
                for k in range(1, 12)]
        assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))

    def test_zero_operator(self):
        assert lipschitz_estimate(DenseOperator(np.zeros((3, 3)))) == 0.0

    def test_fidelity_uses_max_component_constant(self, rng):
        part = make_uniform_partition(8, 2)
        A = BlockDiagonalGaussian(part, [6, 6], seed=9)
        fid = LeastSquaresFidelity(A, rng.standard_normal(12),
                                   MeasurementPartition.from_sizes([6, 6]))
        expected = max(
            2 * 2 * np.linalg.svd(Ai, compute_uv=False)[0] ** 2
            for Ai in A.block_matrices)
        assert fid.lipschitz == pytest.approx(expected, rel=1e-6)


class TestSynthesize:
    def test_noise_free_sentinel(self, rng):
        A = DenseOperator(rng.standard_normal((10, 4)))
        x = rng.standard_normal(4)
        assert np.array_equal(synthesize_measurements(A, x, math.inf, seed=0),
                              A.apply(x))

    def test_realized_snr_close_to_target(self, rng):
        A = DenseOperator(rng.standard_normal((2000, 16)))
        x = rng.standard_normal(16)
        clean = A.apply(x)
        y = synthesize_measurements(A, x, 30.0, seed=3)
        realized = 20 * math.log10(np.linalg.norm(clean) / np.linalg.norm(y - clean))
        assert abs(realized - 30.0) <= 0.5

    def test_zero_signal_rejected(self):
        A = DenseOperator(np.eye(4))
        with pytest.raises(ValueError):
            synthesize_measurements(A, np.zeros(4), 30.0, seed=0)

    def test_block_row_count_at_ratio_07(self):
        # an 80x80 block at compression ratio 0.7 has 4480 rows
        assert int(0.7 * 80 * 80) == 4480


class TestRadon:
    def test_vertical_rays_through_all_ones(self):
        # hand geometry: angle 0 rays are vertical; the two inner detectors
        # cross four unit pixels, the outer two miss the 4x4 grid entirely
        r = build_radon(4, 1, 4)
        sums = np.asarray(r.matrix @ np.ones(16))
        assert np.allclose(sums, [0.0, 4.0, 4.0, 0.0], atol=1e-9)

    def test_weights_bounded_by_pixel_diagonal(self):
        r = build_radon(16, 12, 24)
        assert r.matrix.data.min() >= 0.0
        assert r.matrix.data.max() <= math.sqrt(2.0) + 1e-12

    def test_adjoint_consistency(self, rng):
        r = build_radon(8, 6, 12)
        for _ in range(50):
            x = rng.standard_normal(64)
            v = rng.standard_normal(r.rows)
            assert float(r.apply(x) @ v) == pytest.approx(
                float(x @ r.apply_adjoint(v)), rel=1e-10, abs=1e-12)

    def test_full_scale_config_shape(self):
        # documented full-scale geometry: 180 angles x 1131 detectors; the
        # acceptance-scale operator must expose the same row layout rule
        r = build_radon(16, 10, 24)
        assert r.rows == 240
        assert r.angle_row_slice(3) == slice(72, 96)

    def test_export_rows_round_trip(self):
        import scipy.sparse as sp

        r = build_radon(4, 2, 6)
        buf = io.StringIO()
        r.export_rows(buf)
        rows, cols, vals = [], [], []
        for line in buf.getvalue().splitlines():
            a, b, c = line.split()
            rows.append(int(a))
            cols.append(int(b))
            vals.append(float(c))
        rebuilt = sp.csr_matrix((vals, (rows, cols)), shape=r.matrix.shape)
        assert (abs(rebuilt - r.matrix)).max() < 1e-15

    def test_rejects_degenerate_geometry(self):
        with pytest.raises(ValueError):
            build_radon(0, 1, 1)
