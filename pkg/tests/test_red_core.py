import math

import numpy as np
import pytest

from asyncred.blocks import make_uniform_partition
from asyncred.denoisers import (ConvolutionDenoiser, GainDenoiser,
                                IdentityDenoiser)
from asyncred.operators import LeastSquaresFidelity, MeasurementPartition
from asyncred.red_core import (BoundInputs, RedConfig, RedOperator,
                               cocoercivity_check, fixed_point_direct_solve,
                               nu_estimate, step_size_bound,
                               theoretical_bound_bg, theoretical_bound_sg)

from conftest import DenseOperator, identity_instance, small_grid_instance


class TestRedConfig:
    def test_rejects_nonpositive_tau(self):
        with pytest.raises(ValueError):
            RedConfig(tau=0.0, gamma=0.1)

    def test_rejects_nonpositive_gamma(self):
        with pytest.raises(ValueError):
            RedConfig(tau=1.0, gamma=0.0)


class TestCompositeOperator:
    def test_identity_denoiser_reduces_to_gradient(self, rng):
        r, _ = small_grid_instance(8, 4)
        r_id = RedOperator(r.fidelity, IdentityDenoiser(), r.tau, grid=r.grid)
        x = rng.standard_normal(r.n)
        assert np.array_equal(r_id.apply(x), r.fidelity.grad_full(x))

    def test_rejects_nonpositive_tau(self):
        r, _ = small_grid_instance(8, 4)
        with pytest.raises(ValueError):
            RedOperator(r.fidelity, IdentityDenoiser(), 0.0, grid=r.grid)

    def test_block_decomposition_is_exact(self, rng):
        r, _ = small_grid_instance(8, 4)
        x = rng.standard_normal(r.n)
        full = r.apply(x)
        recon = np.zeros(r.n)
        for i in range(r.b):
            recon += r.partition.inject(r.apply_block(x, i), i)
        assert np.allclose(recon, full, rtol=1e-12, atol=0)

    def test_block_matches_extracted_full(self, rng):
        r, _ = small_grid_instance(8, 4)
        x = rng.standard_normal(r.n)
        full = r.apply(x)
        for i in range(r.b):
            assert np.array_equal(r.apply_block(x, i), r.partition.extract(full, i))

    def test_single_block_equals_full(self, rng):
        r, _ = small_grid_instance(8, 8)  # one 8x8 block
        assert r.b == 1
        x = rng.standard_normal(r.n)
        assert np.array_equal(r.apply_block(x, 0), r.apply(x))

    def test_block_index_checked(self):
        r, _ = small_grid_instance(8, 4)
        with pytest.raises(IndexError):
            r.apply_block(np.zeros(r.n), r.b)

    def test_block_local_denoise_matches_eq11_form(self, rng):
        # per-tile denoising: gradient block plus tau (x_i - D(x_i)) where D
        # sees the tile as its own image (dense oracle evaluation)
        r, _ = small_grid_instance(8, 4)
        r_local = RedOperator(r.fidelity, r.denoiser, r.tau, grid=r.grid,
                              block_local_denoise=True)
        x = rng.standard_normal(r.n)
        for i in range(r.b):
            sl = r.partition.block_slice(i)
            xi = x[sl]
            expected = (r.fidelity.grad_block(x, r.partition, i)
                        + r.tau * (xi - r.denoiser.apply(xi, (4, 4))))
            assert np.allclose(r_local.apply_block(x, i), expected, rtol=1e-14)

    def test_stochastic_single_measurement_block_is_exact(self, rng):
        r, _ = small_grid_instance(8, 4)  # ell == 1
        x = rng.standard_normal(r.n)
        out = r.apply_stochastic(x, 3, np.random.default_rng(0))
        assert np.array_equal(out, r.apply(x))
        blk = r.apply_stochastic_block(x, 1, 3, np.random.default_rng(0))
        assert np.array_equal(blk, r.apply_block(x, 1))

    def test_stochastic_block_enumeration_hook(self, rng):
        r, _ = small_grid_instance(8, 4, ell_blocks=True)
        x = rng.standard_normal(r.n)
        for i in range(r.b):
            out = r.apply_stochastic_block(x, i, r.fidelity.ell,
                                           indices=np.arange(r.fidelity.ell))
            assert np.array_equal(out, r.apply_block(x, i))

    def test_stochastic_mean_matches_full(self):
        r, _ = small_grid_instance(8, 4, ell_blocks=True)
        x = np.random.default_rng(3).standard_normal(r.n)
        g = r.apply(x)
        draws = 10_000
        mc = np.random.default_rng(33)
        acc = np.zeros(r.n)
        sq = np.zeros(r.n)
        for _ in range(draws):
            s = r.apply_stochastic(x, 1, mc)
            acc += s
            sq += s * s
        mean = acc / draws
        var = (sq - draws * mean * mean) / (draws - 1)
        se = np.sqrt(np.maximum(var, 0.0) / draws)
        z = np.abs(mean - g) / np.maximum(se, 1e-30)
        assert z.max() <= 3.0

    def test_stochastic_variance_quartered_at_w4(self):
        r, _ = small_grid_instance(8, 4, ell_blocks=True)
        x = np.random.default_rng(4).standard_normal(r.n)
        g = r.apply(x)
        mc = np.random.default_rng(44)
        draws = 10_000

        def msd(w):
            acc = 0.0
            for _ in range(draws):
                d = r.apply_stochastic(x, w, mc) - g
                acc += float(d @ d)
            return acc / draws

        ratio = msd(4) / msd(1)
        assert 0.2 <= ratio <= 0.3

    def test_stochastic_block_mean_matches_block(self):
        r, _ = small_grid_instance(8, 4, ell_blocks=True)
        x = np.random.default_rng(5).standard_normal(r.n)
        target = r.apply_block(x, 2)
        mc = np.random.default_rng(55)
        draws = 10_000
        acc = np.zeros(len(target))
        sq = np.zeros(len(target))
        for _ in range(draws):
            s = r.apply_stochastic_block(x, 2, 1, mc)
            acc += s
            sq += s * s
        mean = acc / draws
        var = (sq - draws * mean * mean) / (draws - 1)
        se = np.sqrt(np.maximum(var, 0.0) / draws)
        assert (np.abs(mean - target) / np.maximum(se, 1e-30)).max() <= 3.5


class TestResidualMetrics:
    def test_scaling_example(self, rng):
        # A = I, y = 0, identity denoiser: G(x) = 2x so ||G||^2 = 4 ||x||^2
        r = identity_instance(6)
        x = rng.standard_normal(6)
        assert r.residual_norm_sq(x) == pytest.approx(4 * float(x @ x), rel=1e-14)

    def test_normalized_residual_at_start_is_one(self, rng):
        r, _ = small_grid_instance(8, 4)
        x0 = rng.standard_normal(r.n)
        assert r.normalized_residual(x0, x0) == pytest.approx(1.0, rel=1e-15)

    def test_normalized_residual_rejects_converged_start(self):
        r = identity_instance(4)
        with pytest.raises(ValueError):
            r.normalized_residual(np.ones(4), np.zeros(4))  # G(0) = 0

    def test_fixed_point_residual_tiny(self):
        r, _ = small_grid_instance(8, 4)
        x_star = fixed_point_direct_solve(r)
        assert (r.residual_norm_sq(x_star)
                <= 1e-16 * r.residual_norm_sq(np.zeros(r.n)))


class TestFixedPointSolve:
    def test_identity_instance_recovers_target(self, rng):
        b0 = rng.standard_normal(5)
        r = identity_instance(5, y=b0)
        assert np.allclose(fixed_point_direct_solve(r), b0, rtol=1e-9)

    def test_self_consistency_small_instance(self):
        r, _ = small_grid_instance(4, 2, seed=9)
        x_star = fixed_point_direct_solve(r, tol=1e-12)
        g0 = math.sqrt(r.residual_norm_sq(np.zeros(r.n)))
        assert math.sqrt(r.residual_norm_sq(x_star)) <= 1e-8 * g0

    def test_unique_solution_from_cg(self):
        # positive definite system: rerunning the solve must land on the
        # same point regardless of internal start
        r, _ = small_grid_instance(4, 2, seed=10)
        a = fixed_point_direct_solve(r, tol=1e-12)
        b = fixed_point_direct_solve(r, tol=1e-8)
        assert np.linalg.norm(a - b) <= 1e-6 * max(1.0, np.linalg.norm(a))

    def test_rejects_nonlinear_denoiser(self):
        from asyncred.denoisers import TransformShrinkDenoiser

        r, _ = small_grid_instance(8, 4)
        r_nl = RedOperator(r.fidelity, TransformShrinkDenoiser(0.1, 2), r.tau,
                           grid=r.grid)
        with pytest.raises(ValueError):
            fixed_point_direct_solve(r_nl)

    def test_rejects_large_instances(self):
        r, _ = small_grid_instance(8, 4)
        with pytest.raises(ValueError):
            fixed_point_direct_solve(r, max_n=10)


class TestStepSizeBound:
    def test_zero_delay(self):
        assert step_size_bound(3.0, 0.5, 0) == pytest.approx(1 / 4.0)

    def test_arithmetic_example(self):
        assert step_size_bound(2.0, 1.0, 2) == pytest.approx(0.05)

    def test_monotone_nonincreasing(self):
        base = step_size_bound(2.0, 1.0, 1)
        assert step_size_bound(3.0, 1.0, 1) < base
        assert step_size_bound(2.0, 2.0, 1) < base
        assert step_size_bound(2.0, 1.0, 2) < base

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            step_size_bound(-1.0, 1.0, 0)
        with pytest.raises(ValueError):
            step_size_bound(1.0, 1.0, -1)


class TestBounds:
    def base(self, **kw):
        args = dict(t=100, b=4, gamma=0.05, L=2.0, tau=1.0, lam=0, R0=3.0)
        args.update(kw)
        return BoundInputs(**args)

    def test_zero_delay_constant(self):
        bi = self.base(lam=0)
        expected = 2 * (2.0 + 2.0) * 4 / (0.05 * 100) * 9.0
        assert theoretical_bound_bg(bi) == pytest.approx(expected, rel=1e-12)

    def test_delay_constant_limits(self):
        assert self.base(lam=0).delay_constant == 0.0
        assert self.base(lam=10**6).delay_constant == pytest.approx(2.0, abs=1e-5)

    def test_doubling_t_halves_bound(self):
        assert theoretical_bound_bg(self.base(t=200)) == pytest.approx(
            theoretical_bound_bg(self.base(t=100)) / 2, rel=1e-12)

    def test_requires_positive_t(self):
        with pytest.raises(ValueError):
            theoretical_bound_bg(self.base(t=0))

    def test_sg_reduces_to_bg_without_noise(self):
        bi = self.base(nu=0.0, w=2)
        assert theoretical_bound_sg(bi) == theoretical_bound_bg(bi)

    def test_quadrupling_w_quarters_floor(self):
        b1 = theoretical_bound_sg(self.base(nu=1.5, w=1))
        b4 = theoretical_bound_sg(self.base(nu=1.5, w=4))
        floor1 = b1 - theoretical_bound_bg(self.base())
        floor4 = b4 - theoretical_bound_bg(self.base())
        assert floor4 == pytest.approx(floor1 / 4, rel=1e-12)

    def test_remark_stepsize_gives_sqrt_rate(self):
        # with gamma = 1/sqrt(w t) and the delay small enough for that
        # stepsize, both bound terms scale as 1/sqrt(w t) in t: quadrupling
        # the iteration budget halves the bound
        L, tau, nu, lam, b = 2.0, 1.0, 1.5, 1, 4
        for w in (1, 4):
            vals = []
            for t in (400, 1600):
                gamma = 1.0 / math.sqrt(w * t)
                assert lam <= 0.5 * (math.sqrt(w * t) / (L + 2 * tau) - 1)
                bi = BoundInputs(t=t, b=b, gamma=gamma, L=L, tau=tau, lam=lam,
                                 R0=3.0, nu=nu, w=w)
                vals.append(theoretical_bound_sg(bi))
            assert vals[1] == pytest.approx(vals[0] / 2, rel=1e-12)
        # at w = 1 the closed form is exact
        t, w = 400, 1
        bi = BoundInputs(t=t, b=b, gamma=1.0 / math.sqrt(t), L=L, tau=tau,
                         lam=lam, R0=3.0, nu=nu, w=w)
        D = bi.delay_constant
        C = (L + 2 * tau) * (1 + lam) * nu**2
        expected = ((D / b + 2) * (L + 2 * tau) * b * 9.0
                    + (2 * D / b + 2) * C) / math.sqrt(w * t)
        assert theoretical_bound_sg(bi) == pytest.approx(expected, rel=1e-12)

    def test_sg_requires_positive_w(self):
        with pytest.raises(ValueError):
            theoretical_bound_sg(self.base(w=0))


class TestCocoercivity:
    def test_identity_instance_margin_nonnegative(self):
        # G(x) = 2x is (1/2)-cocoercive, and 1/(L+2tau) < 1/2
        r = identity_instance(6, tau=0.5)
        margin, _ = cocoercivity_check(r, 200, seed=0)
        assert margin >= -1e-12

    def test_cs_instance_margin(self):
        r, _ = small_grid_instance(8, 4)
        margin, scale = cocoercivity_check(r, 500, seed=1)
        assert margin >= -1e-8 * max(scale, 1.0)

    def test_adversarial_denoiser_detected(self):
        A = DenseOperator(np.eye(8))
        fid = LeastSquaresFidelity(A, np.zeros(8))
        bad = RedOperator(fid, GainDenoiser(3.0), tau=2.0,
                          partition=make_uniform_partition(8, 2))
        margin, _ = cocoercivity_check(bad, 100, seed=2)
        assert margin < 0


class TestNuEstimate:
    def test_single_measurement_block_gives_zero(self):
        r, _ = small_grid_instance(8, 4)
        assert nu_estimate(r, [np.zeros(r.n)], draws=10) == 0.0

    def test_stable_across_seeds(self):
        r, _ = small_grid_instance(8, 4, ell_blocks=True)
        xs = [np.random.default_rng(6).standard_normal(r.n)]
        a = nu_estimate(r, xs, draws=10_000, seed=1)
        b = nu_estimate(r, xs, draws=10_000, seed=2)
        assert abs(a - b) / a <= 0.10

    def test_scales_down_with_sqrt_w(self):
        r, _ = small_grid_instance(8, 4, ell_blocks=True)
        x = np.random.default_rng(7).standard_normal(r.n)
        g = r.apply(x)
        mc = np.random.default_rng(70)
        draws = 6000

        def rms_dev(w):
            acc = 0.0
            for _ in range(draws):
                d = r.apply_stochastic(x, w, mc) - g
                acc += float(d @ d)
            return math.sqrt(acc / draws)

        assert rms_dev(4) == pytest.approx(rms_dev(1) / 2, rel=0.15)
