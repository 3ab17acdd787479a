import numpy as np
import pytest

from asyncred.red_core import RedConfig, fixed_point_direct_solve, step_size_bound
from asyncred.solvers import (DivergenceError, SolverBudget, Trace, bc_red,
                              gm_red, sg_red, sync_red)

from conftest import identity_instance, small_grid_instance


def cfg_for(r, lam=0, scale=1.0):
    gamma = scale * step_size_bound(r.fidelity.lipschitz, r.tau, lam)
    return RedConfig(tau=r.tau, gamma=gamma)


class TestBudget:
    def test_requires_a_limit(self):
        with pytest.raises(ValueError):
            SolverBudget()

    def test_iteration_budget(self):
        b = SolverBudget(max_outer_iterations=3)
        assert not b.exhausted(2, 0.0)
        assert b.exhausted(3, 0.0)

    def test_wall_budget(self):
        b = SolverBudget(max_wall_ms=50.0)
        assert not b.exhausted(10**9, 49.0)
        assert b.exhausted(0, 50.0)


class TestTrace:
    def test_first_record_normalizes_to_one(self):
        t = Trace()
        t.append(0, 0.0, 8.0, None)
        t.append(1, 0.0, 2.0, None)
        assert t.records[0].norm_res == 1.0
        assert t.records[1].norm_res == pytest.approx(0.25)

    def test_running_min(self):
        t = Trace()
        for it, res in [(0, 8.0), (1, 2.0), (2, 5.0)]:
            t.append(it, 0.0, res, None)
        assert [rec.min_res_sq for rec in t.records] == [8.0, 2.0, 2.0]

    def test_iterations_strictly_increase(self):
        t = Trace()
        t.append(0, 0.0, 1.0, None)
        with pytest.raises(ValueError):
            t.append(0, 0.0, 1.0, None)


class TestGmRed:
    def test_scalar_recursion_exact_with_zero_target(self):
        # A = I, y = 0: the iterate halves every step at gamma = 1/4, which
        # is exact in floating point
        r = identity_instance(4)
        x0 = np.array([1.0, -2.0, 0.5, 3.0])
        x, trace = gm_red(r, RedConfig(tau=1.0, gamma=0.25), x0, SolverBudget(50))
        assert np.array_equal(x, x0 * 0.5**50)

    def test_scalar_recursion_general_target(self, rng):
        b0 = rng.standard_normal(4)
        r = identity_instance(4, y=b0)
        x0 = rng.standard_normal(4)
        x, _ = gm_red(r, RedConfig(tau=1.0, gamma=0.25), x0, SolverBudget(20))
        assert np.allclose(x - b0, 0.5**20 * (x0 - b0), rtol=1e-9, atol=1e-18)

    def test_reaches_direct_solve_limit(self):
        r, _ = small_grid_instance(8, 4, seed=21)
        x_star = fixed_point_direct_solve(r)
        x, trace = gm_red(r, cfg_for(r), np.zeros(r.n), SolverBudget(1200))
        assert trace.final.norm_res < 1e-10
        assert np.linalg.norm(x - x_star) < 1e-6 * max(1.0, np.linalg.norm(x_star))

    def test_divergence_raises(self):
        r = identity_instance(4)
        x0 = np.ones(4)
        with pytest.warns(UserWarning):
            with np.errstate(over="ignore", invalid="ignore"):
                with pytest.raises(DivergenceError) as err:
                    gm_red(r, RedConfig(tau=1.0, gamma=2.0), x0, SolverBudget(3000))
        assert err.value.iteration > 0

    def test_warns_above_stepsize_bound(self):
        r = identity_instance(4)
        with pytest.warns(UserWarning):
            gm_red(r, RedConfig(tau=1.0, gamma=0.9), np.ones(4), SolverBudget(2))


class TestBcRed:
    def test_single_block_identical_to_gm(self, rng):
        r, _ = small_grid_instance(8, 8, seed=22)
        assert r.b == 1
        x0 = rng.standard_normal(r.n)
        xg, tg = gm_red(r, cfg_for(r), x0, SolverBudget(80))
        xb, tb = bc_red(r, cfg_for(r), x0, SolverBudget(80), seed=0)
        assert np.array_equal(xg, xb)
        assert [a.res_sq for a in tg.records] == [a.res_sq for a in tb.records]

    def test_converges_to_oracle(self):
        r, _ = small_grid_instance(8, 4, seed=23)
        x_star = fixed_point_direct_solve(r)
        x, _ = bc_red(r, cfg_for(r), np.zeros(r.n), SolverBudget(1500), seed=3)
        assert np.linalg.norm(x - x_star) < 1e-6 * max(1.0, np.linalg.norm(x_star))

    def test_seed_determinism(self):
        r, _ = small_grid_instance(8, 4, seed=24)
        runs = [bc_red(r, cfg_for(r), np.zeros(r.n), SolverBudget(40), seed=9)
                for _ in range(2)]
        assert np.array_equal(runs[0][0], runs[1][0])
        assert ([a.res_sq for a in runs[0][1].records]
                == [a.res_sq for a in runs[1][1].records])


class TestSyncRed:
    def test_matches_gm_bitwise_single_worker(self, rng):
        r, _ = small_grid_instance(8, 4, seed=25)
        x0 = rng.standard_normal(r.n)
        xg, _ = gm_red(r, cfg_for(r), x0, SolverBudget(60))
        xs, _ = sync_red(r, cfg_for(r), x0, SolverBudget(60), n_workers=1)
        assert np.array_equal(xg, xs)

    def test_matches_gm_with_four_workers(self, rng):
        r, _ = small_grid_instance(8, 4, seed=25)
        x0 = rng.standard_normal(r.n)
        xg, _ = gm_red(r, cfg_for(r), x0, SolverBudget(60))
        xs, _ = sync_red(r, cfg_for(r), x0, SolverBudget(60), n_workers=4)
        assert np.abs(xg - xs).max() <= 1e-12 * max(1.0, np.abs(xg).max())

    def test_single_block_with_spare_workers(self, rng):
        r, _ = small_grid_instance(8, 8, seed=26)
        x0 = rng.standard_normal(r.n)
        xs, _ = sync_red(r, cfg_for(r), x0, SolverBudget(30), n_workers=3)
        xg, _ = gm_red(r, cfg_for(r), x0, SolverBudget(30))
        assert np.array_equal(xs, xg)

    def test_rejects_zero_workers(self):
        r, _ = small_grid_instance(8, 4)
        with pytest.raises(ValueError):
            sync_red(r, cfg_for(r), np.zeros(r.n), SolverBudget(1), n_workers=0)


class TestSgRed:
    def test_single_measurement_block_identical_to_gm(self, rng):
        r, _ = small_grid_instance(8, 4, seed=27)  # ell == 1
        x0 = rng.standard_normal(r.n)
        xg, _ = gm_red(r, cfg_for(r), x0, SolverBudget(50))
        xs, _ = sg_red(r, cfg_for(r), x0, SolverBudget(50), w=3, seed=0)
        assert np.array_equal(xg, xs)

    def test_seed_determinism(self):
        r, _ = small_grid_instance(8, 4, seed=28, ell_blocks=True)
        a, ta = sg_red(r, cfg_for(r, scale=0.5), np.zeros(r.n), SolverBudget(60),
                       w=2, seed=5)
        b, tb = sg_red(r, cfg_for(r, scale=0.5), np.zeros(r.n), SolverBudget(60),
                       w=2, seed=5)
        assert np.array_equal(a, b)
        assert [x.res_sq for x in ta.records] == [x.res_sq for x in tb.records]

    def test_tail_floor_drops_with_minibatch_size(self):
        # Monte-Carlo check of the variance floor: median tail residual over
        # 5 seeds must be lower at w=4 than at w=1
        r, _ = small_grid_instance(16, 4, ratio=1.0, seed=29, tau_rel=0.2,
                                   ell_blocks=True)
        cfg = cfg_for(r, scale=0.3)
        tails = {1: [], 4: []}
        for seed in range(5):
            for w in (1, 4):
                _, trace = sg_red(r, cfg, np.zeros(r.n), SolverBudget(350),
                                  w=w, seed=seed)
                cut = 0.8 * trace.final.iteration
                tail = [rec.res_sq for rec in trace.records if rec.iteration > cut]
                tails[w].append(float(np.median(tail)))
        assert np.median(tails[4]) < np.median(tails[1])


class TestBaselineAgreement:
    def test_all_serial_solvers_share_the_limit(self):
        r, _ = small_grid_instance(8, 4, seed=30)
        x_star = fixed_point_direct_solve(r)
        scale = max(1.0, np.linalg.norm(x_star))
        budget = SolverBudget(1500)
        xg, tg = gm_red(r, cfg_for(r), np.zeros(r.n), budget)
        xb, _ = bc_red(r, cfg_for(r), np.zeros(r.n), budget, seed=1)
        xs, _ = sync_red(r, cfg_for(r), np.zeros(r.n), budget, n_workers=2)
        for x in (xg, xb, xs):
            assert np.linalg.norm(x - x_star) < 1e-5 * scale
        assert tg.final.norm_res < 1e-8
        for a, b in ((xg, xb), (xg, xs), (xb, xs)):
            assert np.linalg.norm(a - b) < 1e-5 * scale

    def test_gm_residual_monotone_on_affine_instance(self):
        r, _ = small_grid_instance(8, 4, seed=31)
        _, trace = gm_red(r, cfg_for(r), np.zeros(r.n), SolverBudget(300))
        res = [rec.res_sq for rec in trace.records]
        assert all(b <= a * (1 + 1e-10) for a, b in zip(res, res[1:]))
